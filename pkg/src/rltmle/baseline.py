"""Importance sampling family, direct method, WDR, partial returns and MAGIC."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DegenerateWeightsWarning
from .mdp import Dataset, DiscountSpec, QStack, StochasticPolicy, discounted_returns, ratio_matrix


@dataclass(frozen=True, eq=False)
class StabilizedWeights:
    """Self-normalized ratios ``w[i, t] = rho_{1:t}^(i) / sum_j rho_{1:t}^(j)``.

    Column ``t - 1`` holds step ``t``; the implicit ``w_0`` is ``1 / n``.
    ``degenerate[t - 1]`` is True where every ratio vanished and ``w_t = 0``.
    """

    w: np.ndarray
    degenerate: np.ndarray

    @property
    def any_degenerate(self) -> bool:
        return bool(self.degenerate.any())


def _normalize_columns(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    totals = rho.sum(axis=0)
    degenerate = totals <= 0
    w = np.divide(rho, totals, out=np.zeros_like(rho, dtype=float), where=~degenerate)
    return w, degenerate


def _warn_degenerate(degenerate: np.ndarray) -> None:
    if np.any(degenerate):
        steps = sorted(set((np.argwhere(degenerate)[:, -1] + 1).tolist()))
        warnings.warn(f"all importance ratios are zero at steps {steps}", DegenerateWeightsWarning, stacklevel=3)


def stabilized_weights(dataset: Dataset, pi_e: StochasticPolicy, pi_b: StochasticPolicy) -> StabilizedWeights:
    if dataset.n < 1:
        raise ConfigurationError("need at least one trajectory")
    w, degenerate = _normalize_columns(ratio_matrix(dataset, pi_e, pi_b))
    _warn_degenerate(degenerate)
    return StabilizedWeights(w, degenerate)


def dm_estimate(q: QStack, pi_e: StochasticPolicy, initial_observation: int) -> float:
    """Plug-in value ``sum_a pi_e(a | o_1) Q_1(o_1, a)``."""
    return float(pi_e.table(q.horizon)[0, initial_observation] @ q.q[0, initial_observation])


def trajectory_values(dataset: Dataset, q: QStack, pi_e: StochasticPolicy):
    """``Q_t(o_t, a_t)``, ``V_t(o_t)`` and ``V_{t+1}(o_{t+1})`` along every trajectory."""
    T = dataset.horizon
    if q.horizon != T:
        raise ConfigurationError(f"QStack horizon {q.horizon} does not match data horizon {T}")
    t_idx = np.broadcast_to(np.arange(T), dataset.actions.shape)
    q_sa = q.q[t_idx, dataset.observations, dataset.actions]
    v_s = q.values(pi_e)[t_idx, dataset.observations]
    v_next = np.zeros_like(v_s)
    v_next[:, :-1] = v_s[:, 1:]
    return q_sa, v_s, v_next


@dataclass(frozen=True, eq=False)
class PartialReturnTerms:
    """Per-trajectory numerators from which every ``g_j`` is assembled.

    With ``rho_ext[:, j] = rho_{1:j}`` (so ``rho_{1:0} = 1``)::

        step[:, t-1] = rho_{1:t} (R_t - Q_t)
        prev[:, t-1] = rho_{1:t-1} V_t
        tail[:, j]   = rho_{1:j} V_{j+1}      (V_{T+1} = 0)
    """

    rho_ext: np.ndarray
    step: np.ndarray
    prev: np.ndarray
    tail: np.ndarray
    gamma: float

    @classmethod
    def build(cls, dataset, q, pi_e, pi_b, discount: DiscountSpec) -> "PartialReturnTerms":
        rho = ratio_matrix(dataset, pi_e, pi_b)
        n, T = rho.shape
        q_sa, v_s, _ = trajectory_values(dataset, q, pi_e)
        rho_ext = np.ones((n, T + 1))
        rho_ext[:, 1:] = rho
        tail = np.zeros((n, T + 1))
        tail[:, :T] = rho_ext[:, :T] * v_s
        return cls(rho_ext, rho * (dataset.rewards - q_sa), rho_ext[:, :T] * v_s, tail, discount.gamma)

    @property
    def horizon(self) -> int:
        return self.step.shape[1]

    def combine(self, multiplicity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``g_0..g_T`` for each row of trajectory multiplicities.

        ``multiplicity`` has shape ``(B, n)`` (all ones for the observed
        sample, bootstrap counts for replicates).  Returns ``g`` of shape
        ``(B, T + 1)`` and the ``(B, T)`` degeneracy mask of the weights.
        """
        T = self.horizon
        S = multiplicity @ self.rho_ext
        degenerate = S <= 0
        inv = np.divide(1.0, S, out=np.zeros_like(S), where=~degenerate)
        powers = self.gamma ** np.arange(T + 1)
        steps = powers[:T] * ((multiplicity @ self.step) * inv[:, 1:] + (multiplicity @ self.prev) * inv[:, :T])
        g = np.zeros((multiplicity.shape[0], T + 1))
        g[:, 1:] = np.cumsum(steps, axis=1)
        g += powers * (multiplicity @ self.tail) * inv
        return g, degenerate[:, 1:]

    def per_trajectory(self) -> np.ndarray:
        """Contributions ``n * g_j^(i)`` whose column means are ``g_j``; shape ``(n, T + 1)``."""
        n, T = self.step.shape
        S = self.rho_ext.sum(axis=0)
        inv = np.divide(1.0, S, out=np.zeros_like(S), where=S > 0)
        powers = self.gamma ** np.arange(T + 1)
        steps = powers[:T] * (self.step * inv[1:] + self.prev * inv[:T])
        g = np.zeros((n, T + 1))
        g[:, 1:] = np.cumsum(steps, axis=1)
        g += powers * self.tail * inv
        return n * g


@dataclass(frozen=True, eq=False)
class PartialReturnMatrix:
    """``g[i, j]`` is trajectory ``i``'s contribution to ``g_j``, scaled by ``n``."""

    g: np.ndarray

    @property
    def means(self) -> np.ndarray:
        return self.g.mean(axis=0)


def partial_returns(dataset, q, pi_e, pi_b, discount: DiscountSpec) -> PartialReturnMatrix:
    """Off-policy ``j``-step returns for ``j = 0..T``.

    ``g_j`` keeps the weighted Bellman corrections up to step ``j`` and
    bootstraps the rest with ``V_{j+1}``; ``g_0`` is the direct method and
    ``g_T`` is WDR.
    """
    terms = PartialReturnTerms.build(dataset, q, pi_e, pi_b, discount)
    _warn_degenerate(terms.rho_ext.sum(axis=0)[1:] <= 0)
    return PartialReturnMatrix(terms.per_trajectory())


def wdr_estimate(dataset, q, pi_e, pi_b, discount: DiscountSpec) -> float:
    """Weighted doubly robust estimate.

    ``sum_i [V_1(o_1) / n + sum_t gamma^(t-1) w_t^(i) (R_t - Q_t + gamma V_{t+1})]``
    with ``V_{T+1} = 0``.  Steps where every ratio is zero contribute nothing.
    """
    q_sa, _, v_next = trajectory_values(dataset, q, pi_e)
    w = stabilized_weights(dataset, pi_e, pi_b).w
    factors = discount.factors(dataset.horizon)
    corr = (w * (dataset.rewards - q_sa + discount.gamma * v_next)).sum(axis=0)
    return dm_estimate(q, pi_e, dataset.initial_observation) + float(factors @ corr)


@dataclass(frozen=True)
class ISFamily:
    IS: float
    PDIS: float
    WIS: float
    CWPDIS: float

    def as_dict(self) -> dict:
        return {"is": self.IS, "pdis": self.PDIS, "wis": self.WIS, "cwpdis": self.CWPDIS}


def is_family(dataset, pi_e, pi_b, discount: DiscountSpec) -> ISFamily:
    """Trajectory-wise and per-decision importance sampling, plain and weighted."""
    rho = ratio_matrix(dataset, pi_e, pi_b)
    factors = discount.factors(dataset.horizon)
    returns = discounted_returns(dataset, discount)
    w, degenerate = _normalize_columns(rho)
    _warn_degenerate(degenerate)
    disc_r = dataset.rewards * factors
    return ISFamily(
        IS=float(np.mean(rho[:, -1] * returns)),
        PDIS=float(np.mean((rho * disc_r).sum(axis=1))),
        WIS=float(w[:, -1] @ returns),
        CWPDIS=float((w * disc_r).sum()),
    )


@dataclass(frozen=True, eq=False)
class MagicResult:
    estimate: float
    x_hat: np.ndarray
    g: np.ndarray
    omega_hat: np.ndarray
    b_hat: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def magic_estimate(
    dataset,
    q,
    pi_e,
    pi_b,
    discount: DiscountSpec,
    B: int = 200,
    ci_level: float = 0.1,
    seed: int = 0,
) -> MagicResult:
    """Convex blend of ``g_0..g_T`` minimizing an estimated MSE.

    The covariance is the sample covariance of the per-trajectory partial
    returns divided by ``n``; biases are distances to a percentile bootstrap
    interval of ``g_T`` built from ``B`` whole-trajectory resamples.
    """
    from .ensemble import bias_estimates, bootstrap_counts, covariance_eif, solve_simplex_qp

    if B < 100:
        raise ConfigurationError("MAGIC needs at least 100 bootstrap replicates")
    terms = PartialReturnTerms.build(dataset, q, pi_e, pi_b, discount)
    per_traj = terms.per_trajectory()
    g = per_traj.mean(axis=0)
    omega = covariance_eif(per_traj) if dataset.n > 1 else np.zeros((len(g), len(g)))
    boot, _ = terms.combine(bootstrap_counts(dataset.n, B, seed))
    b_hat = bias_estimates(g, boot[:, -1], ci_level)
    x_hat = solve_simplex_qp(omega, b_hat)
    return MagicResult(float(x_hat @ g), x_hat, g, omega, b_hat, {"B": B, "ci_level": ci_level})
