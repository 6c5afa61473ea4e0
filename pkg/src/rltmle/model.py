"""Initial Q estimators: empirical dynamics over observations and bias injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .mdp import Dataset, DiscountSpec, QStack, StochasticPolicy, TabularMDP, range_bounds

DEFAULT_SMOOTHING = 0.5


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Time-homogeneous model ``P(o' | o, a)`` and ``E[R | o, a]``."""

    transition_probs: np.ndarray
    mean_rewards: np.ndarray
    reward_bounds: tuple

    @classmethod
    def from_mdp(cls, mdp: TabularMDP) -> "DynamicsModel":
        """The true dynamics, valid when the observation map is the identity."""
        if not np.array_equal(mdp.observation_map, np.arange(mdp.num_states)):
            raise ConfigurationError("exact dynamics are only available over states for an identity observation map")
        return cls(mdp.transition_matrix, mdp.expected_rewards, mdp.reward_bounds)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Sufficient statistics of logged transitions over observations.

    ``counts[o, a, o']`` counts observed transitions (the last step of each
    trajectory has no successor and is excluded); ``visit_counts[o, a]`` and
    ``reward_sums[o, a]`` cover every step.
    """

    counts: np.ndarray
    reward_sums: np.ndarray
    visit_counts: np.ndarray
    smoothing: float
    reward_bounds: tuple

    @property
    def transition_probs(self) -> np.ndarray:
        num_obs = self.counts.shape[2]
        totals = self.counts.sum(axis=2, keepdims=True)
        probs = (self.counts + self.smoothing) / (totals + self.smoothing * num_obs)
        unseen = (totals[..., 0] == 0)
        probs[unseen] = 1.0 / num_obs
        return probs

    @property
    def mean_rewards(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(self.visit_counts > 0, self.reward_sums / np.maximum(self.visit_counts, 1), 0.0)
        return np.clip(mean, *self.reward_bounds)

    def dynamics(self) -> DynamicsModel:
        return DynamicsModel(self.transition_probs, self.mean_rewards, self.reward_bounds)


def fit_empirical_model(
    dataset: Dataset,
    num_observations: int,
    num_actions: int,
    reward_bounds,
    smoothing: float = DEFAULT_SMOOTHING,
) -> EmpiricalModel:
    """Count-based maximum likelihood model with additive smoothing.

    Pairs never visited get a uniform successor distribution and reward 0.
    """
    if dataset.n == 0:
        raise ConfigurationError("cannot fit a model on an empty dataset")
    if smoothing < 0:
        raise ConfigurationError("smoothing must be non-negative")
    obs, act = dataset.observations, dataset.actions
    counts = np.zeros((num_observations, num_actions, num_observations))
    np.add.at(counts, (obs[:, :-1], act[:, :-1], obs[:, 1:]), 1.0)
    visits = np.zeros((num_observations, num_actions))
    np.add.at(visits, (obs, act), 1.0)
    rsum = np.zeros((num_observations, num_actions))
    np.add.at(rsum, (obs, act), dataset.rewards)
    return EmpiricalModel(counts, rsum, visits, float(smoothing), tuple(reward_bounds))


def q_from_model(model, pi_e: StochasticPolicy, horizon: int, discount: DiscountSpec) -> QStack:
    """Backward induction for ``pi_e`` under a fitted model.

    ``model`` is a :class:`DynamicsModel` or anything with a ``dynamics()``
    method returning one.  Entries are clipped to ``[-Delta_t, Delta_t]``.
    """
    dyn = model.dynamics() if hasattr(model, "dynamics") else model
    P, r = dyn.transition_probs, dyn.mean_rewards
    pi = pi_e.table(horizon)
    delta = range_bounds(dyn.reward_bounds, horizon, discount)
    q = np.zeros((horizon,) + r.shape)
    v_next = np.zeros(r.shape[0])
    for t in range(horizon - 1, -1, -1):
        q[t] = np.clip(r + discount.gamma * (P @ v_next), -delta[t], delta[t])
        v_next = (pi[t] * q[t]).sum(axis=1)
    return QStack(q, delta, discount)


def inject_bias(q: QStack, scale: float, seed) -> QStack:
    """Add ``scale * N(0, 1)`` independently to every entry, then re-clip."""
    if scale < 0:
        raise ConfigurationError("bias scale must be non-negative")
    if scale == 0:
        return q
    rng = np.random.default_rng(seed)
    noisy = q.q + scale * rng.standard_normal(q.q.shape)
    return QStack(noisy, q.delta, q.discount).clipped()


def model_based_q(
    dataset: Dataset,
    mdp: TabularMDP,
    pi_e: StochasticPolicy,
    horizon: int,
    discount: DiscountSpec,
    smoothing: float = DEFAULT_SMOOTHING,
) -> QStack:
    """Fit the empirical model on ``dataset`` and solve it for ``pi_e``."""
    model = fit_empirical_model(dataset, mdp.num_observations, mdp.num_actions, mdp.reward_bounds, smoothing)
    return q_from_model(model, pi_e, horizon, discount)
