"""The three benchmark domains: ModelWin, ModelFail and a 4x4 GridWorld."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .mdp import StochasticPolicy, TabularMDP, check_policy


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    name: str
    mdp: TabularMDP
    behavior: StochasticPolicy
    evaluation: StochasticPolicy
    default_horizon: int

    def __post_init__(self):
        check_policy(self.behavior, self.mdp)
        check_policy(self.evaluation, self.mdp)
        if np.any((self.behavior.probs == 0) & (self.evaluation.probs > 0)):
            raise ConfigurationError(f"{self.name}: evaluation policy not absolutely continuous w.r.t. behavior")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "default_horizon": self.default_horizon,
            "mdp": self.mdp.to_dict(),
            "behavior": self.behavior.to_dict(),
            "evaluation": self.evaluation.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnvironmentSpec":
        return cls(
            name=data["name"],
            mdp=TabularMDP.from_dict(data["mdp"]),
            behavior=StochasticPolicy.from_dict(data["behavior"]),
            evaluation=StochasticPolicy.from_dict(data["evaluation"]),
            default_horizon=int(data["default_horizon"]),
        )


def make_modelwin(horizon: int = 20, p_behavior: float = 0.73) -> EnvironmentSpec:
    """Three-state loop: s1 branches to s2 (+1) or s3 (-1), both return to s1.

    Action a1 reaches s2 w.p. 0.4, a2 w.p. 0.6.  The behavior policy plays a1 at
    s1 w.p. ``p_behavior`` and the evaluation policy w.p. ``1 - p_behavior``;
    both are uniform at s2 and s3.
    """
    s1, s2, s3 = 0, 1, 2
    transitions = {
        (s1, 0): [(s2, 1.0, 0.4), (s3, -1.0, 0.6)],
        (s1, 1): [(s2, 1.0, 0.6), (s3, -1.0, 0.4)],
    }
    for s in (s2, s3):
        for a in (0, 1):
            transitions[s, a] = [(s1, 0.0, 1.0)]
    mdp = TabularMDP.from_transitions(3, 2, transitions, initial_state=s1, reward_bounds=(-1.0, 1.0))
    behavior = np.full((3, 2), 0.5)
    behavior[s1] = (p_behavior, 1 - p_behavior)
    evaluation = np.full((3, 2), 0.5)
    evaluation[s1] = (1 - p_behavior, p_behavior)
    return EnvironmentSpec("modelwin", mdp, StochasticPolicy(behavior), StochasticPolicy(evaluation), horizon)


def make_modelfail(horizon: int = 2, p_behavior: float = 0.88) -> EnvironmentSpec:
    """Aliased four-state chain: s1, s2, s3 share one observation.

    From s1, a1 leads to s2 and a2 to s3 with reward 0.  Leaving s2 pays +1 and
    leaving s3 pays -1, both into the absorbing s4.  The behavior policy plays
    a1 w.p. ``p_behavior`` under the aliased observation, the evaluation policy
    w.p. ``1 - p_behavior``; both are uniform once in s4.
    """
    s1, s2, s3, s4 = range(4)
    transitions = {
        (s1, 0): [(s2, 0.0, 1.0)],
        (s1, 1): [(s3, 0.0, 1.0)],
    }
    for a in (0, 1):
        transitions[s2, a] = [(s4, 1.0, 1.0)]
        transitions[s3, a] = [(s4, -1.0, 1.0)]
        transitions[s4, a] = [(s4, 0.0, 1.0)]
    mdp = TabularMDP.from_transitions(
        4, 2, transitions, initial_state=s1, reward_bounds=(-1.0, 1.0),
        observation_map=[0, 0, 0, 1], terminal_states=[s4],
    )
    behavior = np.array([[p_behavior, 1 - p_behavior], [0.5, 0.5]])
    evaluation = np.array([[1 - p_behavior, p_behavior], [0.5, 0.5]])
    return EnvironmentSpec("modelfail", mdp, StochasticPolicy(behavior), StochasticPolicy(evaluation), horizon)


GRID_SIZE = 4
UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


def grid_state(row: int, col: int) -> int:
    """0-based index of the cell at (row, col); cells are numbered down each column."""
    return col * GRID_SIZE + row


def grid_cell(state: int) -> tuple[int, int]:
    return state % GRID_SIZE, state // GRID_SIZE


def _grid_move(state: int, action: int) -> int:
    row, col = grid_cell(state)
    dr, dc = _MOVES[action]
    r, c = row + dr, col + dc
    if 0 <= r < GRID_SIZE and 0 <= c < GRID_SIZE:
        return grid_state(r, c)
    return state


def _near_optimal_actions(bonus: int, penalty: int, terminal: int) -> dict[int, int]:
    """Prescribed action per cell: shortest path to the bonus cell around the
    penalty cell and the terminal, then ``DOWN`` at the bonus cell.

    Ties prefer DOWN, RIGHT, LEFT, UP in that order.
    """
    n = GRID_SIZE * GRID_SIZE
    blocked = {penalty, terminal}
    dist = {bonus: 0}
    queue = deque([bonus])
    while queue:
        s = queue.popleft()
        for prev in range(n):
            if prev in dist or prev in blocked:
                continue
            if any(_grid_move(prev, a) == s for a in range(4)):
                dist[prev] = dist[s] + 1
                queue.append(prev)
    prescribed = {bonus: DOWN}
    for s in range(n):
        if s in (bonus, terminal):
            continue
        best = None
        for a in (DOWN, RIGHT, LEFT, UP):
            nxt = _grid_move(s, a)
            if nxt == s or nxt not in dist:
                continue
            if best is None or dist[nxt] < dist[best[1]]:
                best = (a, nxt)
        prescribed[s] = best[0] if best else DOWN
    return prescribed


def make_gridworld(
    horizon: int = 100,
    terminal: int = 12,
    bonus: int = 8,
    penalty: int = 6,
    p_prescribed: float = 0.99,
) -> EnvironmentSpec:
    """4x4 deterministic grid with cells ``s1..s16`` numbered down the columns.

    Entering a cell pays -1, except the bonus cell (+1), the penalty cell (-10)
    and the terminal cell (+10).  The terminal cell is absorbing with reward 0.
    ``terminal``, ``bonus`` and ``penalty`` are 1-based cell labels.

    Behavior is the uniform policy; evaluation follows :func:`_near_optimal_actions`
    with probability ``p_prescribed`` and spreads the rest over the other actions.
    Both policies are uniform in the terminal cell.
    """
    n = GRID_SIZE * GRID_SIZE
    term, good, bad = terminal - 1, bonus - 1, penalty - 1
    if len({term, good, bad}) != 3 or not all(0 <= s < n for s in (term, good, bad)):
        raise ConfigurationError("terminal, bonus and penalty must be distinct cells in 1..16")

    def entry_reward(s: int) -> float:
        if s == term:
            return 10.0
        if s == good:
            return 1.0
        if s == bad:
            return -10.0
        return -1.0

    transitions = {}
    for s in range(n):
        for a in range(4):
            if s == term:
                transitions[s, a] = [(s, 0.0, 1.0)]
            else:
                nxt = _grid_move(s, a)
                transitions[s, a] = [(nxt, entry_reward(nxt), 1.0)]
    mdp = TabularMDP.from_transitions(
        n, 4, transitions, initial_state=0, reward_bounds=(-10.0, 10.0), terminal_states=[term]
    )
    behavior = np.full((n, 4), 0.25)
    evaluation = np.full((n, 4), (1 - p_prescribed) / 3)
    for s, a in _near_optimal_actions(good, bad, term).items():
        evaluation[s, a] = p_prescribed
    evaluation[term] = 0.25
    return EnvironmentSpec("gridworld", mdp, StochasticPolicy(behavior), StochasticPolicy(evaluation), horizon)


ENVIRONMENTS = {
    "modelwin": make_modelwin,
    "modelfail": make_modelfail,
    "gridworld": make_gridworld,
}


def make_environment(name: str, horizon: int | None = None) -> EnvironmentSpec:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return factory() if horizon is None else factory(horizon=horizon)
