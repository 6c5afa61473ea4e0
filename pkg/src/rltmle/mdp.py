"""Finite-horizon tabular MDPs, logged data, importance ratios and exact DP values.

Conventions used throughout the package:

* time is 1-based in docstrings and 0-based in arrays, so reward ``R_t`` lives
  in column ``t - 1``;
* the reward collected at step ``t`` is discounted by ``gamma ** (t - 1)``;
* the cumulative ratio before the first step is 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import AbsoluteContinuityError, ConfigurationError, InvariantViolation

PROB_TOL = 1e-12


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiscountSpec:
    """Discount factor with the first reward undiscounted."""

    gamma: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")

    def factors(self, horizon: int) -> np.ndarray:
        """``gamma ** (t - 1)`` for ``t = 1..horizon``."""
        return self.gamma ** np.arange(horizon, dtype=float)


def range_bounds(reward_bounds: Sequence[float], horizon: int, discount: DiscountSpec) -> np.ndarray:
    """Bounds ``Delta_t`` on the magnitude of the discounted reward-to-go.

    ``Delta_t = max(|r_min|, r_max) * sum_{tau=t}^T gamma^(tau - t)``, returned
    for ``t = 1..T`` as an array of length ``T``.
    """
    r_min, r_max = reward_bounds
    scale = max(abs(r_min), r_max)
    delta = np.zeros(horizon)
    acc = 0.0
    for t in range(horizon - 1, -1, -1):
        acc = scale + discount.gamma * acc
        delta[t] = acc
    return delta


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """A finite MDP with a fixed initial state and an observation map.

    Transitions are stored as padded outcome arrays of shape
    ``(num_states, num_actions, max_outcomes)``; padded slots carry probability 0.
    Build instances with :meth:`from_transitions`.
    """

    num_states: int
    num_actions: int
    next_states: np.ndarray
    outcome_rewards: np.ndarray
    outcome_probs: np.ndarray
    initial_state: int
    reward_bounds: tuple
    observation_map: np.ndarray
    terminal_states: frozenset = field(default_factory=frozenset)

    @classmethod
    def from_transitions(
        cls,
        num_states: int,
        num_actions: int,
        transitions: Mapping[tuple, Iterable[tuple]],
        initial_state: int = 0,
        reward_bounds: Sequence[float] | None = None,
        observation_map: Sequence[int] | None = None,
        terminal_states: Iterable[int] = (),
    ) -> "TabularMDP":
        """Build an MDP from ``{(s, a): [(next_state, reward, prob), ...]}``.

        Every ``(s, a)`` pair must be present.  When ``reward_bounds`` is omitted
        it is taken as the min/max reward appearing in the table.
        """
        outcomes = {}
        for s in range(num_states):
            for a in range(num_actions):
                if (s, a) not in transitions:
                    raise ConfigurationError(f"missing transitions for (state={s}, action={a})")
                outcomes[s, a] = [tuple(o) for o in transitions[s, a]]
        width = max(len(v) for v in outcomes.values())
        nxt = np.zeros((num_states, num_actions, width), dtype=np.int64)
        rew = np.zeros((num_states, num_actions, width))
        prob = np.zeros((num_states, num_actions, width))
        for (s, a), outs in outcomes.items():
            for m, (sp, r, p) in enumerate(outs):
                nxt[s, a, m] = sp
                rew[s, a, m] = r
                prob[s, a, m] = p
        if reward_bounds is None:
            used = rew[prob > 0]
            reward_bounds = (float(used.min()), float(used.max()))
        if observation_map is None:
            observation_map = np.arange(num_states)
        mdp = cls(
            num_states=num_states,
            num_actions=num_actions,
            next_states=_frozen(nxt, np.int64),
            outcome_rewards=_frozen(rew),
            outcome_probs=_frozen(prob),
            initial_state=int(initial_state),
            reward_bounds=(float(reward_bounds[0]), float(reward_bounds[1])),
            observation_map=_frozen(observation_map, np.int64),
            terminal_states=frozenset(int(s) for s in terminal_states),
        )
        mdp.validate()
        return mdp

    def validate(self) -> None:
        sums = self.outcome_probs.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > PROB_TOL):
            bad = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)[0]
            raise InvariantViolation(f"outgoing probabilities of (s, a)={tuple(bad)} sum to {sums[tuple(bad)]}")
        if np.any(self.outcome_probs < 0):
            raise InvariantViolation("negative transition probability")
        if np.any((self.next_states < 0) | (self.next_states >= self.num_states)):
            raise InvariantViolation("next state index out of range")
        r_min, r_max = self.reward_bounds
        live = self.outcome_probs > 0
        if np.any(live & ((self.outcome_rewards < r_min) | (self.outcome_rewards > r_max))):
            raise InvariantViolation(f"reward outside declared bounds {self.reward_bounds}")
        if self.observation_map.shape != (self.num_states,) or np.any(self.observation_map < 0):
            raise InvariantViolation("observation_map must assign an observation to every state")
        if not (0 <= self.initial_state < self.num_states):
            raise InvariantViolation("initial state out of range")

    @property
    def num_observations(self) -> int:
        return int(self.observation_map.max()) + 1

    @property
    def transition_matrix(self) -> np.ndarray:
        """Dense ``P[s, a, s']`` summed over reward outcomes."""
        P = np.zeros((self.num_states, self.num_actions, self.num_states))
        S, A, M = self.next_states.shape
        s_idx, a_idx, _ = np.meshgrid(np.arange(S), np.arange(A), np.arange(M), indexing="ij")
        np.add.at(P, (s_idx, a_idx, self.next_states), self.outcome_probs)
        return P

    @property
    def expected_rewards(self) -> np.ndarray:
        """``E[R | s, a]`` with shape ``(num_states, num_actions)``."""
        return (self.outcome_probs * self.outcome_rewards).sum(axis=2)

    def transitions(self) -> dict:
        out = {}
        for s in range(self.num_states):
            for a in range(self.num_actions):
                live = self.outcome_probs[s, a] > 0
                out[s, a] = [
                    (int(sp), float(r), float(p))
                    for sp, r, p in zip(
                        self.next_states[s, a][live], self.outcome_rewards[s, a][live], self.outcome_probs[s, a][live]
                    )
                ]
        return out

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "initial_state": self.initial_state,
            "reward_bounds": list(self.reward_bounds),
            "observation_map": self.observation_map.tolist(),
            "terminal_states": sorted(self.terminal_states),
            "transitions": [
                [s, a, sp, r, p] for (s, a), outs in self.transitions().items() for sp, r, p in outs
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TabularMDP":
        table: dict = {}
        for s, a, sp, r, p in data["transitions"]:
            table.setdefault((int(s), int(a)), []).append((int(sp), float(r), float(p)))
        return cls.from_transitions(
            num_states=int(data["num_states"]),
            num_actions=int(data["num_actions"]),
            transitions=table,
            initial_state=int(data.get("initial_state", 0)),
            reward_bounds=data.get("reward_bounds"),
            observation_map=data.get("observation_map"),
            terminal_states=data.get("terminal_states", ()),
        )


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    """Action distributions indexed by observation, optionally by time.

    ``probs`` has shape ``(num_observations, num_actions)`` for a stationary
    policy, or ``(horizon, num_observations, num_actions)``.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float, copy=True)
        if probs.ndim not in (2, 3):
            raise ConfigurationError("policy table must be 2-D (obs, action) or 3-D (time, obs, action)")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > PROB_TOL):
            raise InvariantViolation("every policy row must be a probability distribution")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, num_observations: int, num_actions: int) -> "StochasticPolicy":
        return cls(np.full((num_observations, num_actions), 1.0 / num_actions))

    @property
    def stationary(self) -> bool:
        return self.probs.ndim == 2

    @property
    def num_observations(self) -> int:
        return self.probs.shape[-2]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[-1]

    def table(self, horizon: int) -> np.ndarray:
        """Time-indexed table of shape ``(horizon, num_observations, num_actions)``."""
        if self.stationary:
            return np.broadcast_to(self.probs, (horizon,) + self.probs.shape)
        if self.probs.shape[0] < horizon:
            raise ConfigurationError(f"policy defined for {self.probs.shape[0]} steps, horizon is {horizon}")
        return self.probs[:horizon]

    def to_dict(self) -> dict:
        return {"stationary": self.stationary, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "StochasticPolicy":
        return cls(np.asarray(data["probs"], dtype=float))


def check_policy(policy: StochasticPolicy, mdp: TabularMDP) -> None:
    if policy.num_observations != mdp.num_observations or policy.num_actions != mdp.num_actions:
        raise ConfigurationError(
            f"policy is defined over ({policy.num_observations} observations, {policy.num_actions} actions); "
            f"MDP has ({mdp.num_observations}, {mdp.num_actions})"
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One logged episode; every array has length ``horizon``."""

    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    @property
    def steps(self) -> list:
        return [(int(s), int(a), float(r)) for s, a, r in zip(self.states, self.actions, self.rewards)]


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` trajectories of a common horizon stored as ``(n, T)`` arrays."""

    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_policy: StochasticPolicy | None = None
    seed: int | None = None

    def __post_init__(self):
        shapes = {self.states.shape, self.observations.shape, self.actions.shape, self.rewards.shape}
        if len(shapes) != 1 or self.states.ndim != 2:
            raise ConfigurationError(f"trajectory arrays must share one (n, T) shape, got {shapes}")
        if self.states.shape[0] and np.any(self.states[:, 0] != self.states[0, 0]):
            raise ConfigurationError("all trajectories must start in the same state")
        for name in ("states", "observations", "actions", "rewards"):
            getattr(self, name).setflags(write=False)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def initial_observation(self) -> int:
        return int(self.observations[0, 0])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.observations[i], self.actions[i], self.rewards[i])

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.states[index].copy(),
            self.observations[index].copy(),
            self.actions[index].copy(),
            self.rewards[index].copy(),
            self.behavior_policy,
            self.seed,
        )

    def split(self, fraction_for_model: float) -> tuple["Dataset", "Dataset"]:
        """Leading block for model fitting, trailing block for targeting."""
        if not 0.0 < fraction_for_model < 1.0:
            raise ConfigurationError("split fraction must lie in (0, 1)")
        cut = int(round(fraction_for_model * self.n))
        if cut < 1 or cut >= self.n:
            raise ConfigurationError(f"cannot split {self.n} trajectories with fraction {fraction_for_model}")
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, self.n))

    @classmethod
    def concatenate(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.observations for p in parts]),
            np.concatenate([p.actions for p in parts]),
            np.concatenate([p.rewards for p in parts]),
            parts[0].behavior_policy,
            parts[0].seed,
        )

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(self.n):
                fh.write(
                    json.dumps(
                        {
                            "states": self.states[i].tolist(),
                            "observations": self.observations[i].tolist(),
                            "actions": self.actions[i].tolist(),
                            "rewards": self.rewards[i].tolist(),
                        }
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path, mdp: TabularMDP | None = None) -> "Dataset":
        """Read trajectories written by :meth:`to_jsonl`.

        Lines without an ``observations`` field get them from ``mdp``.
        """
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ConfigurationError(f"{path}: no trajectories")
        states = np.array([r["states"] for r in rows], dtype=np.int64)
        if all("observations" in r for r in rows):
            obs = np.array([r["observations"] for r in rows], dtype=np.int64)
        elif mdp is not None:
            obs = mdp.observation_map[states]
        else:
            raise ConfigurationError("observations missing and no MDP supplied to derive them")
        return cls(
            states,
            obs,
            np.array([r["actions"] for r in rows], dtype=np.int64),
            np.array([r["rewards"] for r in rows], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class QStack:
    """Action-value tables ``Q_1..Q_T`` over (observation, action).

    ``q`` has shape ``(T, num_observations, num_actions)`` and ``delta`` holds
    the range bounds ``Delta_t`` so that ``|Q_t| <= Delta_t``.
    """

    q: np.ndarray
    delta: np.ndarray
    discount: DiscountSpec

    def __post_init__(self):
        q = _frozen(self.q)
        delta = _frozen(self.delta)
        if q.ndim != 3 or delta.shape != (q.shape[0],):
            raise ConfigurationError("QStack needs q of shape (T, O, A) and delta of shape (T,)")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "delta", delta)

    @property
    def horizon(self) -> int:
        return self.q.shape[0]

    def values(self, pi_e: StochasticPolicy) -> np.ndarray:
        """State values ``V_t(o) = sum_a pi_e(a|o) Q_t(o, a)`` with ``V_{T+1} = 0``.

        Returns shape ``(T + 1, num_observations)``.
        """
        T = self.horizon
        v = np.zeros((T + 1, self.q.shape[1]))
        v[:T] = (pi_e.table(T) * self.q).sum(axis=2)
        return v

    def clipped(self) -> "QStack":
        bound = self.delta[:, None, None]
        return QStack(np.clip(self.q, -bound, bound), self.delta, self.discount)

    def to_dict(self) -> dict:
        return {"gamma": self.discount.gamma, "delta": self.delta.tolist(), "q": self.q.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "QStack":
        return cls(np.asarray(data["q"], dtype=float), np.asarray(data["delta"], dtype=float),
                   DiscountSpec(float(data["gamma"])))


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (shape ``(n, k)``)."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cum[:, -1:]
    idx = (u >= cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def simulate(mdp: TabularMDP, policy: StochasticPolicy, horizon: int, n: int, seed: int) -> Dataset:
    """Roll out ``n`` episodes of length ``horizon`` from the initial state.

    Actions are drawn from ``policy`` applied to the observation of the current
    state.  The result depends only on the arguments.
    """
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    check_policy(policy, mdp)
    rng = np.random.default_rng(seed)
    table = policy.table(horizon)
    states = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon))
    s = np.full(n, mdp.initial_state, dtype=np.int64)
    for t in range(horizon):
        states[:, t] = s
        a = _sample_categorical(rng, table[t][mdp.observation_map[s]])
        m = _sample_categorical(rng, mdp.outcome_probs[s, a])
        actions[:, t] = a
        rewards[:, t] = mdp.outcome_rewards[s, a, m]
        s = mdp.next_states[s, a, m]
    return Dataset(states, mdp.observation_map[states], actions, rewards, policy, seed)


def step_ratios(dataset: Dataset, pi_e: StochasticPolicy, pi_b: StochasticPolicy) -> np.ndarray:
    """Per-step ratios ``pi_e(a_t|o_t) / pi_b(a_t|o_t)`` with shape ``(n, T)``."""
    T = dataset.horizon
    t_idx = np.broadcast_to(np.arange(T), dataset.actions.shape)
    num = pi_e.table(T)[t_idx, dataset.observations, dataset.actions]
    den = pi_b.table(T)[t_idx, dataset.observations, dataset.actions]
    if np.any(den <= 0):
        i, t = np.argwhere(den <= 0)[0]
        raise AbsoluteContinuityError(
            f"trajectory {i}, step {t + 1}: behavior policy gives probability 0 to the logged action"
        )
    return num / den


def ratio_matrix(dataset: Dataset, pi_e: StochasticPolicy, pi_b: StochasticPolicy) -> np.ndarray:
    """Cumulative ratios ``rho_{1:t}`` for every trajectory, shape ``(n, T)``."""
    return np.cumprod(step_ratios(dataset, pi_e, pi_b), axis=1)


def importance_ratios(traj: Trajectory, pi_e: StochasticPolicy, pi_b: StochasticPolicy) -> np.ndarray:
    """Cumulative importance ratios ``rho_{1:t}``, ``t = 1..T``, for one trajectory."""
    T = traj.horizon
    te, tb = pi_e.table(T), pi_b.table(T)
    out = np.empty(T)
    acc = 1.0
    for t, (o, a) in enumerate(zip(traj.observations, traj.actions)):
        den = tb[t, o, a]
        if den <= 0:
            raise AbsoluteContinuityError(f"step {t + 1}: behavior policy gives probability 0 to action {a}")
        acc *= te[t, o, a] / den
        out[t] = acc
    return out


def return_to_go(traj: Trajectory, t: int, discount: DiscountSpec) -> float:
    """Discounted reward-to-go from 1-based step ``t``."""
    if not 1 <= t <= traj.horizon:
        raise ConfigurationError(f"t must lie in 1..{traj.horizon}")
    tail = np.asarray(traj.rewards[t - 1 :], dtype=float)
    return float(np.dot(discount.factors(len(tail)), tail))


def discounted_returns(dataset: Dataset, discount: DiscountSpec) -> np.ndarray:
    """Full discounted return of every trajectory."""
    return dataset.rewards @ discount.factors(dataset.horizon)


def exact_q_functions(
    mdp: TabularMDP, policy: StochasticPolicy, horizon: int, discount: DiscountSpec
) -> QStack:
    """True ``Q_t`` over states by backward induction on the known model."""
    check_policy(policy, mdp)
    P = mdp.transition_matrix
    r = mdp.expected_rewards
    pi = policy.table(horizon)[:, mdp.observation_map, :]
    q = np.zeros((horizon, mdp.num_states, mdp.num_actions))
    v_next = np.zeros(mdp.num_states)
    for t in range(horizon - 1, -1, -1):
        q[t] = r + discount.gamma * (P @ v_next)
        v_next = (pi[t] * q[t]).sum(axis=1)
    return QStack(q, range_bounds(mdp.reward_bounds, horizon, discount), discount)


def exact_policy_value(
    mdp: TabularMDP, policy: StochasticPolicy, horizon: int, discount: DiscountSpec
) -> float:
    """Expected discounted return of ``policy`` from the initial state."""
    qs = exact_q_functions(mdp, policy, horizon, discount)
    pi = policy.table(horizon)[0, mdp.observation_map[mdp.initial_state]]
    return float(pi @ qs.q[0, mdp.initial_state])
