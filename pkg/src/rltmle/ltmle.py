"""Longitudinal targeted maximum likelihood for finite-horizon tabular MDPs.

The initial ``Q_t`` tables are rescaled into ``[0, 1]`` using the range bound
``Delta_t``, thresholded away from 0 and 1, and fluctuated backward in time by
a single logistic intercept ``eps_t`` per step.  Each ``eps_t`` maximizes an
importance-weighted Bernoulli likelihood whose outcome is the rescaled
one-step-ahead target ``R_t + gamma V_{t+1}(eps_{t+1})``.

Weighted fits only ever see a handful of distinct ``(o_t, a_t, r_t, o_{t+1})``
tuples per step, so trajectories are aggregated into those groups before the
1-D solves.  Bootstrap replicates are handled as rows of trajectory
multiplicities, which lets a whole batch of replicates share one solve.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, DegenerateWeightsWarning, InvariantViolation, SolverError
from .mdp import Dataset, DiscountSpec, QStack, StochasticPolicy, Trajectory, importance_ratios, ratio_matrix


def default_delta_schedule(n: int) -> float:
    """``delta_n = min(0.01, n^(-1/2) / 4)``."""
    return min(0.01, 0.25 / math.sqrt(max(n, 1)))


@dataclass(frozen=True)
class RegularizationTriple:
    """``alpha`` softens the weights, ``tau`` truncates the targeted horizon and
    ``lam`` is the L1 penalty on each ``eps_t``."""

    alpha: float = 1.0
    tau: int = 0
    lam: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.tau) != self.tau or self.tau < 0:
            raise ConfigurationError(f"tau must be a non-negative integer, got {self.tau}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        object.__setattr__(self, "tau", int(self.tau))

    @classmethod
    def unregularized(cls, horizon: int) -> "RegularizationTriple":
        return cls(1.0, horizon, 0.0)

    def is_unregularized(self, horizon: int) -> bool:
        return self.alpha == 1.0 and self.tau == horizon and self.lam == 0.0

    def as_list(self) -> list:
        return [self.alpha, self.tau, self.lam]

    @classmethod
    def from_list(cls, values) -> "RegularizationTriple":
        alpha, tau, lam = values
        return cls(float(alpha), int(tau), float(lam))


@dataclass(frozen=True)
class LTMLEConfig:
    """Numerical settings for the targeting step.

    ``delta_schedule`` maps the number of targeting trajectories to the
    threshold ``delta_n``; ``split_fraction`` is the share of data reserved
    for the initial estimator; ``folds`` is used by :func:`cv_ltmle`.
    """

    delta_schedule: Callable[[int], float] = default_delta_schedule
    split_fraction: float = 0.5
    folds: int = 5
    tol: float = 1e-10
    max_iter: int = 200
    bracket: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigurationError("split_fraction must lie in (0, 1)")
        if self.tol <= 0 or self.max_iter < 1 or self.bracket <= 0:
            raise ConfigurationError("solver tolerance, iteration cap and bracket must be positive")

    def delta_n(self, n: int) -> float:
        d = float(self.delta_schedule(n))
        if not 0.0 < d < 0.5:
            raise ConfigurationError(f"threshold schedule returned {d} for n={n}; need 0 < delta_n < 0.5")
        return d

    def to_dict(self) -> dict:
        return {
            "split_fraction": self.split_fraction,
            "folds": self.folds,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "bracket": self.bracket,
        }


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def normalize_q(q_t, delta_t: float) -> np.ndarray:
    """Affine map ``[-Delta_t, Delta_t] -> [0, 1]``."""
    q_t = np.asarray(q_t, dtype=float)
    if delta_t <= 0:
        raise ConfigurationError("range bound must be positive")
    slack = 1e-12 * delta_t
    if np.any(np.abs(q_t) > delta_t + slack):
        raise InvariantViolation(f"Q entry {np.abs(q_t).max()} exceeds the range bound {delta_t}")
    return np.clip((q_t + delta_t) / (2.0 * delta_t), 0.0, 1.0)


def denormalize_q(q_tilde, delta_t: float) -> np.ndarray:
    return 2.0 * delta_t * (np.asarray(q_tilde, dtype=float) - 0.5)


def threshold(q_tilde, delta: float) -> np.ndarray:
    if not 0.0 < delta < 0.5:
        raise ConfigurationError(f"threshold must lie in (0, 0.5), got {delta}")
    return np.clip(np.asarray(q_tilde, dtype=float), delta, 1.0 - delta)


def perturb(q_tilde_delta, epsilon: float) -> np.ndarray:
    """Logistic fluctuation ``sigmoid(logit(q) + eps)``."""
    q = np.asarray(q_tilde_delta, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise InvariantViolation("perturb needs entries strictly inside (0, 1)")
    return sigmoid(logit(q) + epsilon)


def soften(x, alpha: float) -> np.ndarray:
    """``x_k^alpha / sum_l x_l^alpha`` with ``0^0 = 1``.

    An all-zero input returns all zeros and emits :class:`DegenerateWeightsWarning`.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvariantViolation("soften needs non-negative inputs")
    if not np.any(x > 0):
        warnings.warn("all weights are zero", DegenerateWeightsWarning, stacklevel=2)
        return np.zeros_like(x)
    p = np.power(x, alpha)
    return p / p.sum()


@dataclass(frozen=True, eq=False)
class _BatchSolve:
    epsilon: np.ndarray
    residual: np.ndarray
    clamped: np.ndarray
    degenerate: np.ndarray


def _solve_batch(W, U, L, lam, tol: float, max_iter: int, bracket: float) -> _BatchSolve:
    """Row-wise minimizer of ``sum_g W (BernoulliNLL(U, sigmoid(L + eps))) + lam |eps|``.

    The score ``sum_g W (sigmoid(L + eps) - U)`` is increasing in ``eps``, so
    after the soft-threshold test at 0 the root of ``score = -sign(score(0)) lam``
    is bracketed on one side of 0.  It is found by Newton steps that fall back
    to bisection whenever a step leaves the bracket or stops shrinking.  Roots beyond the
    bracket are clamped to its end and flagged.  ``lam`` is a scalar or one
    penalty per row.
    """
    W = np.atleast_2d(W)
    U = np.atleast_2d(U)
    L = np.broadcast_to(L, W.shape)

    def score(e):
        return (W * (sigmoid(L + e[:, None]) - U)).sum(axis=1)

    rows = W.shape[0]
    degenerate = W.sum(axis=1) <= 0
    s0 = score(np.zeros(rows))
    at_zero = degenerate | (np.abs(s0) <= lam)
    target = np.where(s0 > 0, lam, -lam)
    lo = np.where(s0 > 0, -bracket, 0.0)
    hi = np.where(s0 > 0, 0.0, bracket)
    # only the far end on the root's side of 0 can fail to bracket it
    far = score(np.where(s0 > 0, lo, hi)) - target
    below = (s0 > 0) & (far > 0) & ~at_zero
    above = (s0 <= 0) & (far < 0) & ~at_zero
    eps = np.zeros(rows)
    # iterate on the unresolved rows only
    r = np.flatnonzero(~(at_zero | below | above))
    e, a, b, tgt = eps[r], lo[r], hi[r], target[r]
    Wr, Ur, Lr = W[r], U[r], L[r]
    last = b - a
    it = 0
    while r.size:
        if it >= max_iter:
            eps[r] = e
            raise SolverError(
                f"root search did not reach step {tol} in {max_iter} iterations",
                best=eps,
                diagnostics={"width": float(np.max(b - a))},
            )
        p = sigmoid(Lr + e[:, None])
        f = (Wr * (p - Ur)).sum(axis=1) - tgt
        fp = (Wr * p * (1.0 - p)).sum(axis=1)
        neg = f < 0
        a = np.where(neg, e, a)
        b = np.where(neg, b, e)
        step = e - np.divide(f, fp, out=np.full_like(f, np.inf), where=fp > 0)
        # Newton only while it stays inside the bracket and its steps keep halving
        inside = (step >= a) & (step <= b) & (np.abs(step - e) <= 0.5 * last)
        proposal = np.where(inside, step, 0.5 * (a + b))
        last = np.abs(proposal - e)
        done = (np.abs(proposal - e) <= tol) | (b - a <= tol) | (f == 0)
        e = np.where(f == 0, e, proposal)
        eps[r[done]] = e[done]
        if done.any():
            keep = ~done
            r, e, a, b, tgt, last = r[keep], e[keep], a[keep], b[keep], tgt[keep], last[keep]
            Wr, Ur, Lr = Wr[keep], Ur[keep], Lr[keep]
        it += 1
    eps = np.where(at_zero, 0.0, eps)
    eps = np.where(below, -bracket, eps)
    eps = np.where(above, bracket, eps)
    return _BatchSolve(eps, score(eps), below | above, degenerate)


def fit_epsilon(
    weights,
    u_tilde,
    q_tilde_delta,
    lam: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 200,
    bracket: float = 20.0,
) -> float:
    """Weighted, L1-penalized logistic intercept fit with a fixed offset.

    Minimizes ``sum_i w_i [-u_i log p_i - (1 - u_i) log(1 - p_i)] + lam |eps|``
    where ``p_i = sigmoid(logit(q_i) + eps)``.  All-zero weights give 0 with a
    :class:`DegenerateWeightsWarning`.
    """
    w = np.asarray(weights, dtype=float)
    u = np.asarray(u_tilde, dtype=float)
    q = np.asarray(q_tilde_delta, dtype=float)
    if np.any(w < 0):
        raise InvariantViolation("weights must be non-negative")
    if np.any((u < 0) | (u > 1)):
        raise InvariantViolation("outcomes must lie in [0, 1]")
    if np.any((q <= 0) | (q >= 1)):
        raise InvariantViolation("predictions must lie strictly inside (0, 1)")
    if lam < 0:
        raise ConfigurationError("penalty must be non-negative")
    res = _solve_batch(w[None], u[None], logit(q), lam, tol, max_iter, bracket)
    if res.degenerate[0]:
        warnings.warn("all likelihood weights are zero; eps set to 0", DegenerateWeightsWarning, stacklevel=2)
    return float(res.epsilon[0])


@dataclass(frozen=True, eq=False)
class SecondStageFit:
    """Fluctuation coefficients of one targeting run.

    ``score_residuals[t-1]`` is the weighted score ``sum_i w_i (Q~_t(eps_t)_i - U~_i)``
    at the fitted ``eps_t``; it is zero up to solver tolerance when ``lam = 0``.
    """

    epsilon: np.ndarray
    score_residuals: np.ndarray
    threshold_used: float
    clamped: np.ndarray
    degenerate: np.ndarray

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon.tolist(),
            "score_residuals": self.score_residuals.tolist(),
            "threshold_used": self.threshold_used,
            "clamped": (np.flatnonzero(self.clamped) + 1).tolist(),
            "degenerate": (np.flatnonzero(self.degenerate) + 1).tolist(),
        }


@dataclass(frozen=True, eq=False)
class _Block:
    """One set of trajectories sharing an initial Q estimate."""

    observations: np.ndarray
    rho: np.ndarray
    logit_q: np.ndarray
    scale: float
    groups: list

    @property
    def n(self) -> int:
        return self.rho.shape[0]


def _build_block(dataset: Dataset, q: QStack, rho: np.ndarray, delta_n: float, scale: float) -> _Block:
    T = dataset.horizon
    if q.horizon != T:
        raise ConfigurationError(f"QStack horizon {q.horizon} does not match data horizon {T}")
    q_thr = np.stack([threshold(normalize_q(q.q[t], q.delta[t]), delta_n) for t in range(T)])
    obs, act, rew = dataset.observations, dataset.actions, dataset.rewards
    n = dataset.n
    groups = []
    for t in range(T):
        nxt = obs[:, t + 1] if t + 1 < T else np.zeros(n, dtype=obs.dtype)
        keys = np.column_stack([obs[:, t], act[:, t], rew[:, t], nxt]).astype(float)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = np.asarray(inv).reshape(-1)
        onehot = np.zeros((n, len(uniq)))
        onehot[np.arange(n), inv] = 1.0
        groups.append(
            (onehot, uniq[:, 0].astype(np.int64), uniq[:, 1].astype(np.int64), uniq[:, 2], uniq[:, 3].astype(np.int64))
        )
    return _Block(obs, rho, logit(q_thr), scale, groups)


@dataclass(frozen=True, eq=False)
class BankRun:
    """Output of :meth:`TargetingProblem.run` for ``K`` triples and ``B`` rows.

    ``estimates`` is ``(B, K)``; ``epsilon``, ``residuals``, ``clamped`` and
    ``degenerate`` are ``(B, K, T)``.  ``q_tables`` holds the fluctuated
    ``Q_t(eps_t)`` of each block as ``(blocks, B, K, T, O, A)``.
    """

    estimates: np.ndarray
    epsilon: np.ndarray
    residuals: np.ndarray
    clamped: np.ndarray
    degenerate: np.ndarray
    q_tables: np.ndarray | None


class TargetingProblem:
    """Precomputed targeting inputs for one or several blocks of trajectories.

    A single block is the usual split-sample estimator.  Several blocks with
    scales ``1 / V`` give the pooled cross-validated risk in which one
    ``eps_t`` is shared by all folds.
    """

    def __init__(
        self,
        blocks: Sequence[_Block],
        pi_e_table: np.ndarray,
        delta: np.ndarray,
        discount: DiscountSpec,
        initial_observation: int,
        delta_n: float,
        config: LTMLEConfig,
    ):
        self.blocks = list(blocks)
        self.pi = np.asarray(pi_e_table)
        self.delta = np.asarray(delta, dtype=float)
        self.discount = discount
        self.initial_observation = int(initial_observation)
        self.delta_n = delta_n
        self.config = config
        if np.any(self.delta <= 0):
            raise ConfigurationError("range bounds must be positive; check reward_bounds")

    @property
    def horizon(self) -> int:
        return len(self.delta)

    @classmethod
    def from_dataset(
        cls,
        dataset: Dataset,
        q: QStack,
        pi_e: StochasticPolicy,
        pi_b: StochasticPolicy,
        discount: DiscountSpec,
        config: LTMLEConfig | None = None,
    ) -> "TargetingProblem":
        config = config or LTMLEConfig()
        if dataset.n < 1:
            raise ConfigurationError("targeting needs at least one trajectory")
        delta_n = config.delta_n(dataset.n)
        block = _build_block(dataset, q, ratio_matrix(dataset, pi_e, pi_b), delta_n, 1.0)
        return cls([block], pi_e.table(q.horizon), q.delta, discount, dataset.initial_observation, delta_n, config)

    def _weights(self, block: _Block, t: int, alpha: float, mult: np.ndarray | None) -> np.ndarray:
        x = np.power(block.rho[:, t], alpha)
        onehot = block.groups[t][0]
        if mult is None:
            num, den = (x @ onehot)[None], np.array([x.sum()])
        else:
            num, den = mult @ (x[:, None] * onehot), mult @ x
        W = np.divide(num, den[:, None], out=np.zeros_like(num), where=den[:, None] > 0)
        return block.scale * W

    def run(
        self,
        triples: Sequence[RegularizationTriple],
        multiplicity: np.ndarray | None = None,
        keep_tables: bool = False,
    ) -> BankRun:
        """Backward targeting for every triple.

        ``multiplicity`` of shape ``(B, n)`` reweights the trajectories of a
        single block (bootstrap replicates); ``None`` means each trajectory
        counts once.
        """
        T, cfg = self.horizon, self.config
        if multiplicity is not None:
            if len(self.blocks) != 1:
                raise ConfigurationError("multiplicities are only supported for a single block")
            multiplicity = np.atleast_2d(np.asarray(multiplicity, dtype=float))
        rows = 1 if multiplicity is None else multiplicity.shape[0]
        K = len(triples)
        for trip in triples:
            if trip.tau > T:
                raise ConfigurationError(f"tau={trip.tau} exceeds horizon {T}")
        estimates = np.zeros((rows, K))
        eps_out = np.zeros((rows, K, T))
        res_out = np.zeros((rows, K, T))
        clamp_out = np.zeros((rows, K, T), dtype=bool)
        degen_out = np.zeros((rows, K, T), dtype=bool)
        num_obs, num_act = self.pi.shape[1:]
        tables = np.zeros((len(self.blocks), rows, K, T, num_obs, num_act)) if keep_tables else None
        gamma = self.discount.gamma

        alphas = sorted({trip.alpha for trip in triples})
        alpha_of = np.array([alphas.index(trip.alpha) for trip in triples])
        taus = np.array([trip.tau for trip in triples])
        lams = np.repeat([trip.lam for trip in triples], rows)
        o1 = self.initial_observation
        # all triples advance through time together: row k * rows + b is triple k, replicate b
        v_next = [np.zeros((K, rows, num_obs)) for _ in self.blocks]
        for t in range(T - 1, -1, -1):
            d = self.delta[t]
            W_parts, U_parts, L_parts = [], [], []
            for bi, block in enumerate(self.blocks):
                weights = np.stack([self._weights(block, t, alpha, multiplicity) for alpha in alphas])
                _, o_g, a_g, r_g, nxt_g = block.groups[t]
                W_parts.append(weights[alpha_of])
                U_parts.append(np.clip((r_g + gamma * v_next[bi][:, :, nxt_g] + d) / (2.0 * d), 0.0, 1.0))
                L_parts.append(np.broadcast_to(block.logit_q[t, o_g, a_g], (K, rows, len(o_g))))
            W = np.concatenate(W_parts, axis=2).reshape(K * rows, -1)
            U = np.concatenate(U_parts, axis=2).reshape(K * rows, -1)
            L = np.concatenate(L_parts, axis=2).reshape(K * rows, -1)
            eps = np.zeros(K * rows)
            resid = (W * (sigmoid(L) - U)).sum(axis=1)
            clamped = np.zeros(K * rows, dtype=bool)
            degenerate = W.sum(axis=1) <= 0
            # members whose horizon stops short of t keep eps = 0
            solve = np.repeat(t + 1 <= taus, rows)
            if solve.any():
                sol = _solve_batch(W[solve], U[solve], L[solve], lams[solve], cfg.tol, cfg.max_iter, cfg.bracket)
                eps[solve], resid[solve], clamped[solve], degenerate[solve] = (
                    sol.epsilon, sol.residual, sol.clamped, sol.degenerate)
            eps_out[:, :, t] = eps.reshape(K, rows).T
            res_out[:, :, t] = resid.reshape(K, rows).T
            clamp_out[:, :, t] = clamped.reshape(K, rows).T
            degen_out[:, :, t] = degenerate.reshape(K, rows).T
            eps = eps.reshape(K, rows, 1, 1)
            for bi, block in enumerate(self.blocks):
                q_eps = d * np.tanh(0.5 * (block.logit_q[t] + eps))
                v_next[bi] = (self.pi[t] * q_eps).sum(axis=3)
                if keep_tables:
                    tables[bi, :, :, t] = q_eps.transpose(1, 0, 2, 3)
        estimates[:] = np.mean([v[:, :, o1] for v in v_next], axis=0).T
        if degen_out.any():
            warnings.warn("some targeting steps had all-zero weights; eps set to 0 there",
                          DegenerateWeightsWarning, stacklevel=2)
        return BankRun(estimates, eps_out, res_out, clamp_out, degen_out, tables)


@dataclass(frozen=True, eq=False)
class LTMLEResult:
    estimate: float
    fit: SecondStageFit
    eif_values: np.ndarray
    q_targeted: QStack
    triple: RegularizationTriple


def eif_evaluate(
    traj: Trajectory, q_perturbed: QStack, pi_e: StochasticPolicy, pi_b: StochasticPolicy, discount: DiscountSpec
) -> float:
    """``sum_t gamma^(t-1) rho_{1:t} (R_t + gamma V_{t+1}(o_{t+1}) - Q_t(o_t, a_t))`` with ``V_{T+1} = 0``."""
    T = traj.horizon
    rho = importance_ratios(traj, pi_e, pi_b)
    v = q_perturbed.values(pi_e)
    total = 0.0
    for t in range(T):
        o, a = traj.observations[t], traj.actions[t]
        v_next = v[t + 1, traj.observations[t + 1]] if t + 1 < T else 0.0
        resid = traj.rewards[t] + discount.gamma * v_next - q_perturbed.q[t, o, a]
        total += discount.gamma**t * rho[t] * resid
    return float(total)


def eif_values(
    dataset: Dataset, q_perturbed: QStack, pi_e: StochasticPolicy, pi_b: StochasticPolicy, discount: DiscountSpec
) -> np.ndarray:
    """:func:`eif_evaluate` for every trajectory, vectorized."""
    T = dataset.horizon
    rho = ratio_matrix(dataset, pi_e, pi_b)
    t_idx = np.broadcast_to(np.arange(T), dataset.actions.shape)
    v = q_perturbed.values(pi_e)
    q_sa = q_perturbed.q[t_idx, dataset.observations, dataset.actions]
    v_next = np.zeros_like(q_sa)
    v_next[:, :-1] = v[t_idx[:, 1:], dataset.observations[:, 1:]]
    resid = dataset.rewards + discount.gamma * v_next - q_sa
    return (rho * resid) @ discount.factors(T)


def _fit_from_run(run: BankRun, row: int, k: int, delta_n: float) -> SecondStageFit:
    return SecondStageFit(
        run.epsilon[row, k].copy(),
        run.residuals[row, k].copy(),
        delta_n,
        run.clamped[row, k].copy(),
        run.degenerate[row, k].copy(),
    )


def ltmle_backward(
    dataset: Dataset,
    q: QStack,
    pi_e: StochasticPolicy,
    pi_b: StochasticPolicy,
    discount: DiscountSpec,
    reg: RegularizationTriple | None = None,
    config: LTMLEConfig | None = None,
) -> LTMLEResult:
    """Targeted estimate of the value of ``pi_e`` from the targeting split ``dataset``.

    ``q`` should come from data disjoint from ``dataset``.  The default triple
    is the unregularized ``(1, T, 0)``.  The estimate always lies in
    ``[-Delta_1, Delta_1]``.
    """
    reg = reg or RegularizationTriple.unregularized(dataset.horizon)
    problem = TargetingProblem.from_dataset(dataset, q, pi_e, pi_b, discount, config)
    run = problem.run([reg], keep_tables=True)
    q_targeted = QStack(run.q_tables[0, 0, 0], q.delta, discount)
    return LTMLEResult(
        float(run.estimates[0, 0]),
        _fit_from_run(run, 0, 0, problem.delta_n),
        eif_values(dataset, q_targeted, pi_e, pi_b, discount),
        q_targeted,
        reg,
    )


@dataclass(frozen=True, eq=False)
class CVLTMLEResult:
    estimate: float
    fold_estimates: np.ndarray
    fit: SecondStageFit
    folds: int


def cv_ltmle(
    dataset: Dataset,
    initial_estimator: Callable[[Dataset], QStack],
    pi_e: StochasticPolicy,
    pi_b: StochasticPolicy,
    discount: DiscountSpec,
    reg: RegularizationTriple | None = None,
    config: LTMLEConfig | None = None,
) -> CVLTMLEResult:
    """Cross-validated targeting with one ``eps_t`` shared by all folds.

    The data are cut into ``config.folds`` contiguous folds.  For fold ``v``
    the initial estimate is refit on the other folds, and fold ``v`` supplies
    held-out likelihood terms weighted ``1 / V`` with weights softened within
    the fold.  The estimate averages the fold-specific targeted values at the
    initial observation.
    """
    config = config or LTMLEConfig()
    V = config.folds
    if V < 2:
        raise ConfigurationError("cross-validation needs at least 2 folds")
    if dataset.n < V:
        raise ConfigurationError(f"{dataset.n} trajectories cannot fill {V} folds")
    reg = reg or RegularizationTriple.unregularized(dataset.horizon)
    delta_n = config.delta_n(dataset.n)
    rho = ratio_matrix(dataset, pi_e, pi_b)
    folds = np.array_split(np.arange(dataset.n), V)
    blocks, deltas = [], None
    for v, held in enumerate(folds):
        train = np.concatenate([f for u, f in enumerate(folds) if u != v])
        q_v = initial_estimator(dataset.subset(train))
        if deltas is None:
            deltas = q_v.delta
        blocks.append(_build_block(dataset.subset(held), q_v, rho[held], delta_n, 1.0 / V))
    problem = TargetingProblem(
        blocks, pi_e.table(dataset.horizon), deltas, discount, dataset.initial_observation, delta_n, config
    )
    run = problem.run([reg], keep_tables=True)
    o1 = dataset.initial_observation
    fold_values = np.array(
        [(problem.pi[0, o1] * run.q_tables[b, 0, 0, 0, o1]).sum() for b in range(V)]
    )
    return CVLTMLEResult(float(fold_values.mean()), fold_values, _fit_from_run(run, 0, 0, delta_n), V)
