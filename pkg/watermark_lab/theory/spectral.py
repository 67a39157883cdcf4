"""
Stationary distributions, spectral gaps and mixing times of dense
row-stochastic matrices.

The walk's distribution after t steps from start law mu is mu P^t (row vector),
so the stationary law solves pi P = pi, i.e. P^T pi = pi. Distances between
distributions are total variation, half the L1 norm.
"""

import logging
import math
from typing import Optional

import numpy as np

from ..errors import ConvergenceError, EnumerationCapError, PreconditionError
from ..models.records import SpectralReport
from .graph import (
    ROW_SUM_TOLERANCE,
    GraphLike,
    is_aperiodic,
    is_irreducible,
    transition_matrix,
    weights_of,
)

logger = logging.getLogger(__name__)

STATIONARY_TOLERANCE = 1e-12
GAP_TOLERANCE = 1e-8
DEFAULT_EIGEN_CAP = 2000
MAX_ITERATIONS = 1_000_000
GAP_BLOCK_SIZE = 4
DENSE_EIGEN_LIMIT = 2000


def _check_stochastic(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"transition matrix must be square, got shape {P.shape}")
    if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > ROW_SUM_TOLERANCE:
        raise ValueError("transition matrix must be row-stochastic within 1e-10")
    return P


def stationary_distribution(
    P: np.ndarray,
    tol: float = STATIONARY_TOLERANCE,
    max_iterations: int = MAX_ITERATIONS,
) -> np.ndarray:
    """
    Fixed point of pi P = pi by power iteration from the uniform law.

    Args:
        P: Row-stochastic matrix of an irreducible aperiodic chain
        tol: L1 residual at which iteration stops
        max_iterations: Iteration cap

    Returns:
        Probability vector pi

    Raises:
        ConvergenceError: If the residual stays above tol for max_iterations steps
    """
    P = _check_stochastic(P)
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for iteration in range(1, max_iterations + 1):
        nxt = pi @ P
        nxt /= nxt.sum()
        residual = np.abs(nxt - pi).sum()
        pi = nxt
        if residual <= tol:
            logger.debug(f"stationary distribution converged after {iteration} iterations")
            return pi
    raise ConvergenceError(
        f"power iteration did not reach residual {tol} in {max_iterations} iterations; "
        "the chain is probably reducible or periodic"
    )


def block_iteration_radius(B: np.ndarray, tol: float, max_iterations: int) -> float:
    """
    Spectral radius of B by block (subspace) iteration with QR.

    Stops once the dominant Ritz pair (lambda, v) of the block satisfies
    ||B v - lambda v|| <= tol.
    """
    n = B.shape[0]
    block = min(n, GAP_BLOCK_SIZE)
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((n, block)))
    for _ in range(max_iterations):
        Z = B @ Q
        if np.linalg.norm(Z) == 0.0:
            return 0.0
        Q, _ = np.linalg.qr(Z)
        ritz_values, ritz_vectors = np.linalg.eig(Q.T @ B @ Q)
        top = int(np.argmax(np.abs(ritz_values)))
        v = Q @ ritz_vectors[:, top]
        residual = float(np.linalg.norm(B @ v - ritz_values[top] * v))
        if residual <= tol:
            return float(np.abs(ritz_values[top]))
    raise ConvergenceError(f"spectral gap estimate did not settle within {max_iterations} iterations")


def spectral_gap(
    P: np.ndarray,
    pi: np.ndarray,
    tol: float = GAP_TOLERANCE,
    eigen_cap: int = DEFAULT_EIGEN_CAP,
    max_iterations: int = 100_000,
) -> float:
    """
    Second-largest eigenvalue modulus g of P.

    Removing the top eigenpair leaves B = P - 1 pi^T, whose spectral radius is
    g. Up to DENSE_EIGEN_LIMIT states the full spectrum of B is computed
    directly; larger matrices fall back to block iteration, whose Ritz values
    give the modulus even when the dominant eigenvalues are a complex pair.

    Args:
        P: Row-stochastic matrix
        pi: Its stationary distribution
        tol: Ritz-pair residual tolerance of the block iteration
        eigen_cap: Largest matrix size accepted
        max_iterations: Iteration cap of the block iteration

    Returns:
        g in [0, 1)

    Raises:
        EnumerationCapError: If P is larger than eigen_cap
        ConvergenceError: If the block iteration does not settle
    """
    P = _check_stochastic(P)
    n = P.shape[0]
    if n > eigen_cap:
        raise EnumerationCapError("spectral gap", n, eigen_cap)
    if n == 1:
        return 0.0
    B = P - np.outer(np.ones(n), pi)
    if n <= DENSE_EIGEN_LIMIT:
        radius = float(np.abs(np.linalg.eigvals(B)).max())
    else:
        radius = block_iteration_radius(B, tol, max_iterations)
    return min(max(radius, 0.0), 1.0 - np.finfo(float).eps)


def mixing_time_bound(g: float, pi_min: float, eps_dist: float) -> float:
    """
    Unit-constant mixing bound (1 / (1 - g)) * ln(1 / (pi_min * eps_dist)).

    Raises:
        PreconditionError: If g >= 1
    """
    if g >= 1.0:
        raise PreconditionError(f"mixing bound needs g < 1, got {g}")
    if not 0.0 < pi_min <= 1.0:
        raise ValueError(f"pi_min must be in (0, 1], got {pi_min}")
    if not 0.0 < eps_dist <= 1.0:
        raise ValueError(f"eps_dist must be in (0, 1], got {eps_dist}")
    return (1.0 / (1.0 - g)) * math.log(1.0 / (pi_min * eps_dist))


def worst_case_distance(M: np.ndarray, pi: np.ndarray) -> float:
    """Max over start states of the TV distance between rows of M and pi."""
    return float(0.5 * np.abs(M - pi[None, :]).sum(axis=1).max())


def distance_after(P: np.ndarray, pi: np.ndarray, t: int) -> float:
    """Worst-case TV distance to pi after exactly t steps."""
    return worst_case_distance(np.linalg.matrix_power(P, t), pi)


def empirical_mixing_time(
    P: np.ndarray,
    pi: np.ndarray,
    eps_dist: float,
    max_steps: int = MAX_ITERATIONS,
) -> int:
    """
    Smallest t >= 1 with every basis start within eps_dist (TV) of pi.

    Raises:
        ConvergenceError: If t would exceed max_steps
    """
    P = _check_stochastic(P)
    M = P.copy()
    for t in range(1, max_steps + 1):
        if worst_case_distance(M, pi) <= eps_dist:
            return t
        M = M @ P
    raise ConvergenceError(f"distance to stationarity still above {eps_dist} after {max_steps} steps")


def analyze_chain(
    g: GraphLike,
    q: float,
    eps_dist: float = 0.01,
    eigen_cap: int = DEFAULT_EIGEN_CAP,
    with_empirical: bool = True,
) -> SpectralReport:
    """
    Full diagnostic report for one graph.

    Reducible or periodic graphs get a report with the failed precondition and
    no spectral quantities.
    """
    weights = weights_of(g)
    n = weights.shape[0]
    irreducible = is_irreducible(weights)
    aperiodic: Optional[bool] = is_aperiodic(weights) if irreducible else None
    if not (irreducible and aperiodic):
        note = "not irreducible" if not irreducible else "periodic"
        logger.warning(f"Graph at q={q:.6f} is {note}; skipping spectral analysis")
        return SpectralReport(
            q=q,
            n_vertices=n,
            irreducible=irreducible,
            aperiodic=aperiodic,
            eps_dist=eps_dist,
            note=note,
        )

    P = transition_matrix(weights)
    pi = stationary_distribution(P)
    gap = spectral_gap(P, pi, eigen_cap=eigen_cap)
    pi_min = float(pi.min())
    bound = mixing_time_bound(gap, pi_min, eps_dist)
    empirical = empirical_mixing_time(P, pi, eps_dist) if with_empirical else None
    return SpectralReport(
        q=q,
        n_vertices=n,
        irreducible=True,
        aperiodic=True,
        stationary=pi.tolist(),
        gap=gap,
        pi_min=pi_min,
        eps_dist=eps_dist,
        mixing_bound=bound,
        mixing_steps=math.ceil(bound),
        empirical_mixing=empirical,
    )
