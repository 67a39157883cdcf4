"""
Quality-floor graphs over an enumerable output space.

Vertices are the outputs y with Q(x, y) >= q; the weight of (y_i, y_j) is the
exact probability that one perturbation call maps y_i to y_j. Mass flowing to
dropped vertices is removed, so rows of a q > 0 graph may sum to less than 1.
The random walk on the graph uses the row-normalized transition matrix.
"""

import logging
from math import gcd
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from ..core.oracles import QualityOracle
from ..errors import EmptyGraphError, EnumerationCapError, PreconditionError
from ..models.core import Prompt, TokenSequence

logger = logging.getLogger(__name__)

DEFAULT_GRAPH_VERTEX_CAP = 10_000
ROW_SUM_TOLERANCE = 1e-10


class PerturbationGraph(BaseModel):
    """Weighted digraph G of perturbation transitions above a quality floor."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    vertices: list[TokenSequence]
    vertex_indices: np.ndarray = Field(..., description="Positions of the vertices in the enumeration")
    weight_matrix: np.ndarray
    qualities: np.ndarray = Field(..., description="Q(x, y) of each vertex")
    quality_floor: float
    prompt_label: str = "prompt"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def out_weights(self) -> np.ndarray:
        return self.weight_matrix.sum(axis=1)


GraphLike = Union[PerturbationGraph, np.ndarray]


def weights_of(g: GraphLike) -> np.ndarray:
    return g.weight_matrix if isinstance(g, PerturbationGraph) else np.asarray(g, dtype=np.float64)


def output_qualities(quality: QualityOracle, x: Prompt, outputs: list[TokenSequence]) -> np.ndarray:
    return np.array([quality(x, y).value for y in outputs])


def build_quality_graph(
    kernel: np.ndarray,
    quality: QualityOracle,
    x: Prompt,
    q: float,
    outputs: list[TokenSequence],
    vertex_cap: int = DEFAULT_GRAPH_VERTEX_CAP,
    qualities: Optional[np.ndarray] = None,
) -> PerturbationGraph:
    """
    Restrict the exact perturbation kernel to outputs of quality >= q.

    Args:
        kernel: Dense kernel over the full enumeration (kernel_matrix)
        quality: Quality oracle Q
        x: Prompt
        q: Quality floor
        outputs: Lexicographic enumeration matching the kernel's rows
        vertex_cap: Maximum number of retained vertices
        qualities: Precomputed Q(x, y) of every output, reused across a q sweep

    Returns:
        PerturbationGraph

    Raises:
        EmptyGraphError: If no output reaches quality q
        EnumerationCapError: If more than vertex_cap outputs are retained
    """
    if kernel.shape != (len(outputs), len(outputs)):
        raise ValueError(f"kernel shape {kernel.shape} does not match {len(outputs)} outputs")
    if qualities is None:
        qualities = output_qualities(quality, x, outputs)
    keep = np.flatnonzero(qualities >= q)
    if keep.size == 0:
        raise EmptyGraphError(f"no outputs at quality {q} (max quality {qualities.max():.6f})")
    if keep.size > vertex_cap:
        raise EnumerationCapError(f"quality graph at q={q}", int(keep.size), vertex_cap)
    logger.info(f"Quality graph at q={q:.6f}: {keep.size} of {len(outputs)} vertices")
    return PerturbationGraph(
        vertices=[outputs[i] for i in keep],
        vertex_indices=keep,
        weight_matrix=kernel[np.ix_(keep, keep)],
        qualities=qualities[keep],
        quality_floor=q,
        prompt_label=x.identifier,
    )


def transition_matrix(g: GraphLike) -> np.ndarray:
    """
    Row-normalized walk P(i, j) = weight(i, j) / weight(i, *).

    Raises:
        PreconditionError: If some vertex has no outgoing weight
    """
    weights = weights_of(g)
    out = weights.sum(axis=1)
    if (out <= 0).any():
        stuck = int(np.flatnonzero(out <= 0)[0])
        raise PreconditionError(f"vertex {stuck} has no outgoing weight")
    return weights / out[:, None]


def is_irreducible(g: GraphLike) -> bool:
    """Strong connectivity of the positive-weight digraph."""
    weights = weights_of(g)
    if weights.shape[0] == 0:
        return False
    n_components, _ = connected_components(csr_matrix(weights > 0), directed=True, connection="strong")
    return n_components == 1


def period(g: GraphLike) -> int:
    """
    Period of an irreducible digraph.

    BFS levels from vertex 0 give every edge (u, v) a closed-walk length
    difference level(u) + 1 - level(v); the period is the gcd of those.

    Raises:
        PreconditionError: If the graph is not irreducible
    """
    weights = weights_of(g)
    if not is_irreducible(weights):
        raise PreconditionError("period is only defined for irreducible graphs; check is_irreducible first")
    adjacency = csr_matrix(weights > 0)
    levels = shortest_path(adjacency, unweighted=True, indices=0).astype(np.int64)
    sources, targets = adjacency.nonzero()
    differences = np.abs(levels[sources] + 1 - levels[targets])
    result = 0
    for d in np.unique(differences):
        result = gcd(result, int(d))
    return result


def is_aperiodic(g: GraphLike) -> bool:
    return period(g) == 1


def balanced_stationary(weights: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """
    Closed-form stationary law pi(i) proportional to weight(i, *).

    This is a fixed point only when every vertex's in-weight equals its
    out-weight, so that condition is checked first.

    Raises:
        PreconditionError: If some vertex is unbalanced
    """
    weights = np.asarray(weights, dtype=np.float64)
    out_weight = weights.sum(axis=1)
    in_weight = weights.sum(axis=0)
    if not np.allclose(in_weight, out_weight, rtol=0.0, atol=tol * max(1.0, out_weight.max())):
        raise PreconditionError("in-weight differs from out-weight; closed-form stationary law does not apply")
    return out_weight / out_weight.sum()
