"""Ensembles of regularized targeted estimators blended by a simplex QP.

Each base estimator is one :class:`RegularizationTriple`.  The blend weights
minimize ``x' Omega x + (x' b)^2`` over the probability simplex, where
``Omega`` estimates the covariance of the base estimates (from influence
values or from the bootstrap) and ``b`` holds bias proxies: the distance from
each base estimate to a percentile bootstrap interval of the unregularized
estimator.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, SolverError
from .ltmle import LTMLEConfig, RegularizationTriple, TargetingProblem, eif_values
from .mdp import Dataset, DiscountSpec, QStack, StochasticPolicy
from .seeding import replicate_rng

DEFAULT_B = 200
DEFAULT_CI_LEVEL = 0.1


def bootstrap_indices(n: int, B: int, seed: int) -> np.ndarray:
    """``(B, n)`` trajectory indices drawn with replacement.

    Replicate ``b`` uses the generator keyed by ``(seed, b)``, so any subset
    of replicates can be regenerated independently.
    """
    if n < 1 or B < 1:
        raise ConfigurationError("bootstrap needs n >= 1 and B >= 1")
    return np.stack([replicate_rng(seed, b).integers(0, n, size=n) for b in range(B)])


def bootstrap_counts(n: int, B: int, seed: int) -> np.ndarray:
    """Multiplicity of each trajectory in each replicate, shape ``(B, n)``."""
    return _cached_counts(int(n), int(B), int(seed))


@functools.lru_cache(maxsize=32)
def _cached_counts(n: int, B: int, seed: int) -> np.ndarray:
    # several estimators in one trial share the same replicates
    idx = bootstrap_indices(n, B, seed) + n * np.arange(B)[:, None]
    counts = np.bincount(idx.ravel(), minlength=B * n).reshape(B, n).astype(float)
    counts.flags.writeable = False
    return counts


def bootstrap_resample(dataset: Dataset, B: int, seed: int) -> list[Dataset]:
    return [dataset.subset(row) for row in bootstrap_indices(dataset.n, B, seed)]


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def covariance_bootstrap(values) -> np.ndarray:
    """Covariance across replicates, normalized by ``B``; ``values`` is ``(B, K)``."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ConfigurationError("need a (B, K) table with B >= 2")
    centered = values - values.mean(axis=0)
    return _symmetrize(centered.T @ centered / values.shape[0])


def covariance_eif(per_trajectory) -> np.ndarray:
    """Sample covariance of per-trajectory influence values divided by ``n``."""
    values = np.asarray(per_trajectory, dtype=float)
    n = values.shape[0]
    if values.ndim != 2 or n < 2:
        raise ConfigurationError("need an (n, K) table with n >= 2")
    centered = values - values.mean(axis=0)
    return _symmetrize(centered.T @ centered / (n - 1) / n)


def percentile_interval(values, ci_level: float = DEFAULT_CI_LEVEL) -> tuple[float, float]:
    """Nearest-rank ``(ci_level/2, 1 - ci_level/2)`` percentiles.

    The ``p``-th percentile of ``B`` sorted values is element
    ``ceil(p B) - 1`` (0-based), clamped to the valid range.
    """
    if not 0.0 < ci_level < 1.0:
        raise ConfigurationError("ci_level must lie in (0, 1)")
    v = np.sort(np.asarray(values, dtype=float))
    B = len(v)

    def rank(p):
        return min(max(math.ceil(p * B - 1e-9) - 1, 0), B - 1)

    return float(v[rank(ci_level / 2)]), float(v[rank(1 - ci_level / 2)])


def bias_estimates(g, reference_replicates, ci_level: float = DEFAULT_CI_LEVEL) -> np.ndarray:
    """Distance from each ``g_k`` to the percentile interval of the reference replicates."""
    lo, hi = percentile_interval(reference_replicates, ci_level)
    g = np.asarray(g, dtype=float)
    return np.maximum(lo - g, 0.0) + np.maximum(g - hi, 0.0)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = 1}`` by sorting."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(v) + 1)
    r = np.nonzero(u - (css - 1.0) / ks > 0)[0][-1]
    theta = (css[r] - 1.0) / (r + 1)
    return np.maximum(v - theta, 0.0)


def qp_matrix(omega, b) -> np.ndarray:
    """``Omega + b b'`` after symmetrizing ``Omega`` and flooring its eigenvalues at 0."""
    omega = _symmetrize(np.asarray(omega, dtype=float))
    b = np.asarray(b, dtype=float)
    w, V = np.linalg.eigh(omega)
    if w.min() < 0:
        omega = _symmetrize((V * np.maximum(w, 0.0)) @ V.T)
    return omega + np.outer(b, b)


def kkt_residual(M: np.ndarray, x: np.ndarray) -> float:
    """Fixed-point residual ``||x - P(x - grad)||_inf`` of ``x' M x`` on the simplex.

    ``M`` is rescaled to unit max-norm first, so the value is scale free.
    """
    scale = np.abs(M).max()
    if scale == 0:
        return 0.0
    Mn = M / scale
    return float(np.abs(x - project_simplex(x - 2.0 * Mn @ x)).max())


def _active_set_polish(M: np.ndarray, x0: np.ndarray, support_tol: float = 1e-9) -> np.ndarray | None:
    """Refine a near-optimal point by solving the equality-constrained KKT
    system on its support, dropping negative coordinates and adding
    coordinates whose gradient is below the multiplier."""
    K = len(x0)
    S = list(np.flatnonzero(x0 > support_tol))
    if not S:
        return None
    for _ in range(4 * K + 4):
        m = len(S)
        A = np.zeros((m + 1, m + 1))
        A[:m, :m] = 2.0 * M[np.ix_(S, S)]
        A[:m, m] = 1.0
        A[m, :m] = 1.0
        rhs = np.zeros(m + 1)
        rhs[m] = 1.0
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        xs = sol[:m]
        if np.any(xs < 0):
            S.pop(int(np.argmin(xs)))
            if not S:
                return None
            continue
        x = np.zeros(K)
        x[S] = xs
        grad = 2.0 * M @ x
        level = grad[S].mean() if S else 0.0
        outside = [j for j in range(K) if j not in S]
        if outside:
            j = min(outside, key=lambda i: grad[i])
            if grad[j] < level - 1e-12:
                S.append(j)
                S.sort()
                continue
        return x / x.sum()
    return None


def solve_simplex_qp(
    omega_hat,
    b_hat,
    max_iter: int = 10_000,
    tol: float = 1e-8,
) -> np.ndarray:
    """Minimize ``x' (Omega + b b') x`` over the probability simplex.

    Accelerated projected gradient with adaptive restart, followed by an
    active-set solve of the KKT system on the detected support.  Raises
    :class:`SolverError` carrying the best iterate if the KKT residual stays
    above ``tol``.
    """
    M = qp_matrix(omega_hat, b_hat)
    K = M.shape[0]
    scale = np.abs(M).max()
    if scale == 0:
        return np.full(K, 1.0 / K)
    Mn = M / scale
    L = 2.0 * max(np.linalg.eigvalsh(Mn).max(), 1e-15)

    def f(x):
        return float(x @ Mn @ x)

    x = np.full(K, 1.0 / K)
    y, t_mom, fx = x.copy(), 1.0, f(x)
    candidates = []
    for it in range(max_iter):
        if it % 50 == 0:
            # a KKT point is globally optimal, so an exact solve on the current support ends the search
            polished = _active_set_polish(Mn, x)
            if polished is not None and np.all(polished >= 0) and kkt_residual(Mn, polished) < 0.1 * tol:
                candidates.append(polished)
                break
        x_new = project_simplex(y - 2.0 * Mn @ y / L)
        f_new = f(x_new)
        if f_new > fx:
            y, t_mom = x.copy(), 1.0
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom**2))
        y = x_new + (t_mom - 1.0) / t_next * (x_new - x)
        x, fx, t_mom = x_new, f_new, t_next
        if it % 25 == 0 and kkt_residual(Mn, x) < 0.1 * tol:
            break

    candidates.append(x)
    polished = _active_set_polish(Mn, x)
    if polished is not None and np.all(polished >= 0):
        candidates.append(polished)
    candidates.extend(np.eye(K))
    best = min(candidates, key=lambda c: (f(c), kkt_residual(Mn, c)))
    if kkt_residual(Mn, best) > tol:
        raise SolverError(
            "simplex QP did not reach the KKT tolerance",
            best=best,
            diagnostics={"kkt_residual": kkt_residual(Mn, best), "iterations": max_iter},
        )
    return best


def qp_objective(omega_hat, b_hat, x) -> float:
    x = np.asarray(x, dtype=float)
    omega = _symmetrize(np.asarray(omega_hat, dtype=float))
    return float(x @ omega @ x + (x @ np.asarray(b_hat, dtype=float)) ** 2)


def default_grid(horizon: int) -> list[RegularizationTriple]:
    """Regularization triples for a horizon ``T``.

    ``alpha in {0, 0.5, 1}``, ``tau in {ceil(T/4), ceil(T/2), T}`` and
    ``lam in {0, 0.01}``, plus a single ``tau = 0`` member (all ``eps`` are
    zero there, so alpha and lam are irrelevant).  The unregularized
    ``(1, T, 0)`` comes last.
    """
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    taus = sorted({math.ceil(horizon / 4), math.ceil(horizon / 2), horizon})
    last = RegularizationTriple.unregularized(horizon)
    grid = [RegularizationTriple(1.0, 0, 0.0)]
    for alpha in (0.0, 0.5, 1.0):
        for tau in taus:
            for lam in (0.0, 0.01):
                trip = RegularizationTriple(alpha, tau, lam)
                if trip != last and trip not in grid:
                    grid.append(trip)
    grid.append(last)
    return grid


@dataclass(frozen=True, eq=False)
class EstimatorBank:
    """Base estimates ``g_1..g_K`` and the replicate or influence tables behind
    their covariance.  ``reference_replicates`` are bootstrap values of the
    last (unregularized) member, used for the bias interval."""

    triples: list
    g: np.ndarray
    reference_replicates: np.ndarray
    per_trajectory_eifs: np.ndarray | None = None
    bootstrap_values: np.ndarray | None = None

    def __post_init__(self):
        if not self.triples:
            raise ConfigurationError("bank needs at least one triple")

    def to_dict(self) -> dict:
        return {"triples": [t.as_list() for t in self.triples], "g": self.g.tolist()}


@dataclass(frozen=True, eq=False)
class EnsembleSolution:
    x_hat: np.ndarray
    omega_hat: np.ndarray
    b_hat: np.ndarray
    objective_value: float
    kkt_residual: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "x_hat": self.x_hat.tolist(),
            "omega_hat": self.omega_hat.tolist(),
            "b_hat": self.b_hat.tolist(),
            "objective_value": self.objective_value,
            "kkt_residual": self.kkt_residual,
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True, eq=False)
class RLTMLEResult:
    estimate: float
    solution: EnsembleSolution
    bank: EstimatorBank

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "solution": self.solution.to_dict(), "bank": self.bank.to_dict()}


def _check_triples(triples, horizon: int) -> list:
    triples = list(triples) if triples is not None else default_grid(horizon)
    if not triples:
        raise ConfigurationError("need at least one regularization triple")
    if not triples[-1].is_unregularized(horizon):
        raise ConfigurationError(f"the last triple must be the unregularized (1, {horizon}, 0)")
    return triples


def _blend(bank: EstimatorBank, omega: np.ndarray, ci_level: float, extra: dict) -> RLTMLEResult:
    b_hat = bias_estimates(bank.g, bank.reference_replicates, ci_level)
    x_hat = solve_simplex_qp(omega, b_hat)
    estimate = float(np.clip(x_hat @ bank.g, bank.g.min(), bank.g.max()))
    M = qp_matrix(omega, b_hat)
    solution = EnsembleSolution(
        x_hat, omega, b_hat, qp_objective(omega, b_hat, x_hat), kkt_residual(M, x_hat), extra
    )
    return RLTMLEResult(estimate, solution, bank)


def rltmle2(
    dataset: Dataset,
    q: QStack,
    pi_e: StochasticPolicy,
    pi_b: StochasticPolicy,
    discount: DiscountSpec,
    triples: Sequence[RegularizationTriple] | None = None,
    B: int = DEFAULT_B,
    ci_level: float = DEFAULT_CI_LEVEL,
    config: LTMLEConfig | None = None,
    seed: int = 0,
) -> RLTMLEResult:
    """Bootstrap-covariance ensemble.

    Every triple is run on the data and on ``B`` whole-trajectory resamples
    (with ``q`` held fixed); the replicate table gives ``Omega`` and its last
    column gives the bias interval.
    """
    triples = _check_triples(triples, dataset.horizon)
    if B < 2:
        raise ConfigurationError("need at least 2 bootstrap replicates")
    problem = TargetingProblem.from_dataset(dataset, q, pi_e, pi_b, discount, config)
    base = problem.run(triples)
    boot = problem.run(triples, bootstrap_counts(dataset.n, B, seed))
    bank = EstimatorBank(triples, base.estimates[0], boot.estimates[:, -1], bootstrap_values=boot.estimates)
    extra = {"B": B, "ci_level": ci_level, "epsilon": base.epsilon[0].tolist()}
    return _blend(bank, covariance_bootstrap(boot.estimates), ci_level, extra)


def rltmle1(
    dataset: Dataset,
    q: QStack,
    pi_e: StochasticPolicy,
    pi_b: StochasticPolicy,
    discount: DiscountSpec,
    triples: Sequence[RegularizationTriple] | None = None,
    B: int = DEFAULT_B,
    ci_level: float = DEFAULT_CI_LEVEL,
    config: LTMLEConfig | None = None,
    seed: int = 0,
) -> RLTMLEResult:
    """Influence-function-covariance ensemble.

    ``Omega`` is the sample covariance of the per-trajectory influence values
    of the targeted fits divided by ``n``; only the unregularized member is
    bootstrapped, for the bias interval.
    """
    triples = _check_triples(triples, dataset.horizon)
    problem = TargetingProblem.from_dataset(dataset, q, pi_e, pi_b, discount, config)
    base = problem.run(triples, keep_tables=True)
    eifs = np.column_stack(
        [eif_values(dataset, QStack(base.q_tables[0, 0, k], q.delta, discount), pi_e, pi_b, discount)
         for k in range(len(triples))]
    )
    boot = problem.run(triples[-1:], bootstrap_counts(dataset.n, B, seed))
    bank = EstimatorBank(triples, base.estimates[0], boot.estimates[:, 0], per_trajectory_eifs=eifs)
    K = len(triples)
    omega = covariance_eif(eifs) if dataset.n > 1 else np.zeros((K, K))
    extra = {"B": B, "ci_level": ci_level, "epsilon": base.epsilon[0].tolist()}
    return _blend(bank, omega, ci_level, extra)
