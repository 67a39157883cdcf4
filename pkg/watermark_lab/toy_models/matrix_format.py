"""
Plain-text matrix format for Markov models and graph weight matrices.

A file is a sequence of comment headers and whitespace-separated blocks:

    # watermark-lab matrix v1
    # kind=markov vocab_size=3 order=1 length=4
    # block=initial
    3.3333333333333331e-01 3.3333333333333331e-01 3.3333333333333331e-01
    # block=transition
    <one row per context, contexts in base-V order>

Values are written with 17 significant digits so float64 round-trips exactly;
undefined rows are written as `nan`. Weight matrices use kind=matrix and a
single block named `weights`.
"""

import io
import logging
from pathlib import Path
from typing import Any, Union

import numpy as np

from ..errors import MarkovModelError
from ..models.core import Vocabulary
from .markov import MarkovModel

logger = logging.getLogger(__name__)

MAGIC = "watermark-lab matrix v1"
VALUE_FORMAT = "%.16e"


def _write(path: Path, meta: dict[str, Any], blocks: dict[str, np.ndarray]) -> None:
    buffer = io.StringIO()
    buffer.write(f"# {MAGIC}\n")
    buffer.write("# " + " ".join(f"{key}={value}" for key, value in meta.items()) + "\n")
    for name, block in blocks.items():
        buffer.write(f"# block={name}\n")
        np.savetxt(buffer, np.atleast_2d(block), fmt=VALUE_FORMAT)
    Path(path).write_text(buffer.getvalue())


def _read(path: Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != f"# {MAGIC}":
        raise ValueError(f"{path}: not a watermark-lab matrix file")
    meta = dict(item.split("=", 1) for item in lines[1].lstrip("# ").split())

    blocks: dict[str, list[str]] = {}
    current = None
    for line in lines[2:]:
        if line.startswith("# block="):
            current = line.split("=", 1)[1].strip()
            blocks[current] = []
        elif current is not None and line.strip():
            blocks[current].append(line)
    arrays = {
        name: np.loadtxt(io.StringIO("\n".join(rows)), ndmin=2) for name, rows in blocks.items()
    }
    return meta, arrays


def dump_matrix(path: Union[str, Path], matrix: np.ndarray, **meta: Any) -> None:
    """Write a dense matrix (e.g. graph weights) with optional metadata."""
    _write(Path(path), {"kind": "matrix", **meta}, {"weights": matrix})


def load_matrix(path: Union[str, Path]) -> tuple[np.ndarray, dict[str, str]]:
    """Read a matrix written by dump_matrix; returns (matrix, metadata)."""
    meta, blocks = _read(Path(path))
    if meta.get("kind") != "matrix":
        raise ValueError(f"{path}: expected kind=matrix, got {meta.get('kind')}")
    return blocks["weights"], meta


def dump_markov_model(model: MarkovModel, path: Union[str, Path]) -> None:
    meta = {
        "kind": "markov",
        "vocab_size": model.vocabulary.size,
        "order": model.order,
        "length": model.generation_length,
    }
    _write(
        Path(path),
        meta,
        {"initial": model.initial_distribution, "transition": model.transition_table},
    )
    logger.info(f"Wrote Markov model to {path}")


def load_markov_model(path: Union[str, Path]) -> MarkovModel:
    """
    Read a Markov model file.

    Raises:
        MarkovModelError: If the file does not describe a valid model
    """
    try:
        meta, blocks = _read(Path(path))
    except (OSError, IndexError, ValueError) as e:
        raise MarkovModelError(f"{path}: {e}") from e
    if meta.get("kind") != "markov":
        raise MarkovModelError(f"{path}: expected kind=markov, got {meta.get('kind')}")
    try:
        return MarkovModel(
            vocabulary=Vocabulary(size=int(meta["vocab_size"])),
            order=int(meta["order"]),
            transition_table=blocks["transition"],
            initial_distribution=blocks["initial"].ravel(),
            generation_length=int(meta["length"]),
        )
    except (KeyError, ValueError) as e:
        raise MarkovModelError(f"{path}: {e}") from e
