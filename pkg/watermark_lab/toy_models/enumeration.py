"""
Exhaustive enumeration of a fixed-length output space.

Sequences are ordered lexicographically, so the position of a sequence in the
enumeration is its base-V number (see sequence_index).
"""

import itertools
from typing import Sequence

from ..errors import EnumerationCapError
from ..models.core import TokenSequence, Vocabulary

DEFAULT_ENUMERATION_CAP = 100_000


def check_enumerable(vocab_size: int, length: int, cap: int = DEFAULT_ENUMERATION_CAP) -> int:
    """
    Return V**length, refusing spaces larger than the cap.

    Raises:
        EnumerationCapError: If the space exceeds the cap
    """
    size = vocab_size**length
    if size > cap:
        raise EnumerationCapError(f"vocab {vocab_size}, length {length}", size, cap)
    return size


def enumerate_outputs(
    vocabulary: Vocabulary, length: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> list[TokenSequence]:
    """
    All sequences of the given length, lexicographically ordered.

    Args:
        vocabulary: Token alphabet
        length: Sequence length (>= 1)
        cap: Maximum number of sequences

    Returns:
        Duplicate-free list of TokenSequence

    Raises:
        EnumerationCapError: If vocabulary.size**length exceeds the cap
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    check_enumerable(vocabulary.size, length, cap)
    return [
        TokenSequence(tokens=tokens)
        for tokens in itertools.product(range(vocabulary.size), repeat=length)
    ]


def sequence_index(tokens: Sequence[int], vocab_size: int) -> int:
    """Lexicographic rank of a sequence among all sequences of its length."""
    index = 0
    for token in tokens:
        index = index * vocab_size + int(token)
    return index
