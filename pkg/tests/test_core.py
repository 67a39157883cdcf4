import hashlib

import numpy as np
import pytest
from pydantic import ValidationError

from watermark_lab.core.prf import TWO_POW_64, derive_subkey, subkey_unit
from watermark_lab.core.quality import compare_quality
from watermark_lab.core.rng import RngStream
from watermark_lab.models.core import (
    QualityScore,
    SecretKey,
    TokenSequence,
    Verdict,
    serialize_tokens,
)


def test_derive_subkey_is_keyed_blake2b(key):
    expected = int.from_bytes(
        hashlib.blake2b(b"context", key=key.key_bytes, digest_size=8).digest(), "big"
    )
    assert derive_subkey(key, b"context") == expected
    assert 0 <= derive_subkey(key, b"other") < TWO_POW_64
    assert derive_subkey(key, b"context") != derive_subkey(key, b"context2")


def test_subkey_unit_strictly_inside_unit_interval(key):
    values = [subkey_unit(key, bytes([i])) for i in range(200)]
    assert all(0.0 < v < 1.0 for v in values)


def test_serialize_tokens_big_endian():
    assert serialize_tokens((1, 256)) == b"\x00\x00\x00\x01\x00\x00\x01\x00"
    assert TokenSequence(tokens=(1, 256)).to_bytes() == serialize_tokens((1, 256))


def test_secret_key_width():
    with pytest.raises(ValidationError):
        SecretKey(key_bytes=b"short")


def test_token_sequence_rejects_negative_tokens():
    with pytest.raises(ValidationError):
        TokenSequence(tokens=(0, -1))


def test_hamming():
    a = TokenSequence(tokens=(0, 1, 2, 0))
    b = TokenSequence(tokens=(0, 2, 2, 1))
    assert a.hamming(b) == 2
    with pytest.raises(ValueError):
        a.hamming(TokenSequence(tokens=(0,)))


def test_rng_stream_reproducible_by_label():
    a = RngStream(7, "run").child("trial/3")
    b = RngStream(7, "run").child("trial/3")
    c = RngStream(7, "run").child("trial/4")
    draws_a = [a.uniform() for _ in range(5)]
    assert draws_a == [b.uniform() for _ in range(5)]
    assert draws_a != [c.uniform() for _ in range(5)]
    assert RngStream(7, "k").secret_key() == RngStream(7, "k").secret_key()


def test_rng_stream_seed_range():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(1 << 64)


def test_compare_quality_tie_band():
    ref = QualityScore(value=0.5)
    assert compare_quality(QualityScore(value=0.53), ref, 0.02) == Verdict.win
    assert compare_quality(QualityScore(value=0.51), ref, 0.02) == Verdict.tie
    assert compare_quality(QualityScore(value=0.49), ref, 0.02) == Verdict.tie
    assert compare_quality(QualityScore(value=0.47), ref, 0.02) == Verdict.lose
    # zero band: any drop loses
    assert compare_quality(QualityScore(value=0.4999), ref, 0.0) == Verdict.lose
    assert compare_quality(ref, ref, 0.0) == Verdict.tie
    with pytest.raises(ValueError):
        compare_quality(ref, ref, -0.1)


def test_quality_score_ordering_and_range():
    assert QualityScore(value=0.2) < QualityScore(value=0.3)
    with pytest.raises(ValidationError):
        QualityScore(value=1.5)


def test_derive_subkey_bits_are_balanced(key):
    n = 100_000
    values = np.array([derive_subkey(key, i.to_bytes(4, "big")) for i in range(n)], dtype=np.uint64)
    bits = (values[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    ones = bits.mean(axis=0)
    assert np.abs(ones - 0.5).max() <= 4 * np.sqrt(0.25 / n)


def test_compare_quality_is_antisymmetric():
    rng = np.random.default_rng(5)
    opposite = {Verdict.win: Verdict.lose, Verdict.lose: Verdict.win, Verdict.tie: Verdict.tie}
    for delta in (0.0, 0.02, 0.1):
        for a, b in rng.random((500, 2)):
            qa, qb = QualityScore(value=float(a)), QualityScore(value=float(b))
            assert compare_quality(qb, qa, delta) == opposite[compare_quality(qa, qb, delta)]
