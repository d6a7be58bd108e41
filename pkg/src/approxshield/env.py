"""Labelled, fully observed discrete environments.

Two environments are provided:

* :class:`ConveyorWorld` -- a gridworld whose bottom row is a conveyor belt
  that carries the agent into an acid cell no matter what it does.
* :class:`ChainMdp` -- a small Markov chain with a closed-form probability of
  staying safe, used as an oracle substrate.

Environments are stateless with respect to the agent position: ``step`` takes
the current state explicitly, which makes exhaustive enumeration trivial.
Observations are the states themselves.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

_AP_RE = re.compile(r"^[a-z][a-z0-9-]*$")

ACTIONS = ("up", "down", "left", "right", "stay")
_DELTAS = {"up": (0, 1), "down": (0, -1), "left": (-1, 0), "right": (1, 0), "stay": (0, 0)}
_LATERAL = {
    "up": ("left", "right"),
    "down": ("left", "right"),
    "left": ("up", "down"),
    "right": ("up", "down"),
}

Cell = tuple[int, int]


class ContractViolation(RuntimeError):
    """Raised when an environment is driven outside its contract."""


@dataclass(frozen=True)
class LabeledStep:
    state: int
    labels: frozenset[str]
    reward: float = 0.0
    terminal: bool = False


@dataclass
class TransitionTable:
    """Explicit ``p(s'|s,a)`` with labelling and terminal mask."""

    probs: np.ndarray  # (S, A, S)
    labels: list[frozenset[str]]
    terminal: np.ndarray  # (S,) bool
    rewards: np.ndarray  # (S, A, S) reward received on that transition

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]


def _check_ap(name: str) -> str:
    if not name or not _AP_RE.match(name):
        raise ValueError(f"invalid atomic proposition {name!r}")
    return name


def _adjacent(a: Cell, b: Cell) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


@dataclass
class ConveyorWorldSpec:
    """Geometry of the conveyor-belt gridworld. ``y = 0`` is the bottom row."""

    width: int = 7
    height: int = 7
    start: Cell = (0, 0)
    goal: Cell = (6, 6)
    belt: list[Cell] = field(default_factory=lambda: [(1, 0), (2, 0), (3, 0), (4, 0), (5, 0)])
    acid: Cell = (6, 0)
    slip_prob: float = 0.0

    def __post_init__(self) -> None:
        self.start = tuple(self.start)
        self.goal = tuple(self.goal)
        self.acid = tuple(self.acid)
        self.belt = [tuple(c) for c in self.belt]
        self.validate()

    def _inside(self, c: Cell) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")
        for c in [self.start, self.goal, self.acid, *self.belt]:
            if not self._inside(c):
                raise ValueError(f"cell {c} outside the grid")
        if len(set(self.belt)) != len(self.belt):
            raise ValueError("belt cells must be distinct")
        for a, b in zip(self.belt, self.belt[1:]):
            if not _adjacent(a, b):
                raise ValueError(f"belt cells {a} and {b} are not adjacent")
        if self.belt and not _adjacent(self.belt[-1], self.acid):
            raise ValueError("last belt cell must be adjacent to the acid")
        if self.goal in self.belt or self.goal == self.acid:
            raise ValueError("goal may not lie on the belt or the acid")
        if self.acid in self.belt:
            raise ValueError("acid may not lie on the belt")
        if self.start == self.acid or self.start == self.goal:
            raise ValueError("start must be a non-terminal cell")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "conveyor",
            "width": self.width,
            "height": self.height,
            "start": list(self.start),
            "goal": list(self.goal),
            "belt": [list(c) for c in self.belt],
            "acid": list(self.acid),
            "slip_prob": self.slip_prob,
        }


class ConveyorWorld:
    """Gridworld with a conveyor belt leading into acid.

    Reward is +1 for entering the goal and 0 otherwise. Goal and acid are
    terminal. On a belt cell the agent advances one cell toward the acid
    whatever the action. Elsewhere a move succeeds with probability
    ``1 - slip_prob`` and otherwise slips to one of the two perpendicular
    directions; ``stay`` never slips. Moves into the wall leave the agent in
    place.
    """

    actions = ACTIONS
    atomic_propositions = frozenset({"acid", "goal", "belt"})

    def __init__(self, spec: ConveyorWorldSpec | None = None):
        self.spec = spec or ConveyorWorldSpec()
        self._belt_next: dict[Cell, Cell] = {}
        for i, c in enumerate(self.spec.belt):
            nxt = self.spec.belt[i + 1] if i + 1 < len(self.spec.belt) else self.spec.acid
            self._belt_next[c] = nxt

    @property
    def num_states(self) -> int:
        return self.spec.width * self.spec.height

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    def cell(self, state: int) -> Cell:
        return state % self.spec.width, state // self.spec.width

    def state_of(self, cell: Cell) -> int:
        return cell[1] * self.spec.width + cell[0]

    def labels(self, state: int) -> frozenset[str]:
        c = self.cell(state)
        if c == self.spec.acid:
            return frozenset({"acid"})
        if c == self.spec.goal:
            return frozenset({"goal"})
        if c in self._belt_next:
            return frozenset({"belt"})
        return frozenset()

    def is_terminal(self, state: int) -> bool:
        c = self.cell(state)
        return c == self.spec.acid or c == self.spec.goal

    def _move(self, c: Cell, direction: str) -> Cell:
        dx, dy = _DELTAS[direction]
        nxt = (c[0] + dx, c[1] + dy)
        return nxt if self.spec._inside(nxt) else c

    def arrival_reward(self, state: int) -> float:
        return 1.0 if self.cell(state) == self.spec.goal else 0.0

    def _outcomes(self, state: int, action: int) -> list[tuple[float, int]]:
        c = self.cell(state)
        if c in self._belt_next:
            return [(1.0, self.state_of(self._belt_next[c]))]
        name = self.actions[action]
        slip = self.spec.slip_prob
        if name == "stay" or slip == 0.0:
            return [(1.0, self.state_of(self._move(c, name)))]
        left, right = _LATERAL[name]
        return [
            (1.0 - slip, self.state_of(self._move(c, name))),
            (slip / 2.0, self.state_of(self._move(c, left))),
            (slip / 2.0, self.state_of(self._move(c, right))),
        ]

    def _arrive(self, cell: Cell) -> LabeledStep:
        s = self.state_of(cell)
        return LabeledStep(s, self.labels(s), self.arrival_reward(s), self.is_terminal(s))

    def reset(self, rng: np.random.Generator | None = None) -> LabeledStep:
        s = self.state_of(self.spec.start)
        return LabeledStep(s, self.labels(s), 0.0, False)

    def step(self, state: int, action: int, rng: np.random.Generator) -> LabeledStep:
        if self.is_terminal(state):
            raise ContractViolation(f"step from terminal state {state}")
        if not 0 <= action < self.num_actions:
            raise ContractViolation(f"invalid action {action}")
        c = self.cell(state)
        if c in self._belt_next:
            return self._arrive(self._belt_next[c])
        name = self.actions[action]
        slip = self.spec.slip_prob
        if name != "stay" and slip > 0.0:
            u = rng.random()
            if u >= 1.0 - slip:
                name = _LATERAL[name][0 if u < 1.0 - slip / 2.0 else 1]
        return self._arrive(self._move(c, name))

    def enumerate_transitions(self) -> TransitionTable:
        return _enumerate(self)

    def to_dict(self) -> dict[str, Any]:
        return self.spec.to_dict()


@dataclass
class ChainMdpSpec:
    """A chain ``0 -> 1 -> ... -> n-1``.

    From state ``i`` the chain stays put with probability ``stay_safe[i]`` and
    advances to ``i + 1`` otherwise. States labelled ``unsafe`` are terminal,
    as is the last state.
    """

    num_states: int = 2
    stay_safe: list[float] = field(default_factory=lambda: [0.9, 1.0])
    labelling: dict[int, list[str]] = field(default_factory=lambda: {1: ["unsafe"]})
    start: int = 0

    def __post_init__(self) -> None:
        self.labelling = {int(k): list(v) for k, v in self.labelling.items()}
        self.validate()

    def validate(self) -> None:
        if self.num_states < 2:
            raise ValueError("chain needs at least two states")
        if len(self.stay_safe) != self.num_states:
            raise ValueError("stay_safe must have one entry per state")
        if any(not 0.0 <= p <= 1.0 for p in self.stay_safe):
            raise ValueError("stay_safe probabilities must lie in [0, 1]")
        for s, names in self.labelling.items():
            if not 0 <= s < self.num_states:
                raise ValueError(f"labelled state {s} out of range")
            for n in names:
                _check_ap(n)
        if not any("unsafe" in v for v in self.labelling.values()):
            raise ValueError("at least one state must be labelled unsafe")
        if not 0 <= self.start < self.num_states:
            raise ValueError("start out of range")

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "chain",
            "num_states": self.num_states,
            "stay_safe": list(self.stay_safe),
            "labelling": {str(k): list(v) for k, v in sorted(self.labelling.items())},
            "start": self.start,
        }


class ChainMdp:
    actions = ("stay",)

    def __init__(self, spec: ChainMdpSpec | None = None):
        self.spec = spec or ChainMdpSpec()
        self.atomic_propositions = frozenset(
            n for names in self.spec.labelling.values() for n in names
        )

    @property
    def num_states(self) -> int:
        return self.spec.num_states

    @property
    def num_actions(self) -> int:
        return 1

    def labels(self, state: int) -> frozenset[str]:
        return frozenset(self.spec.labelling.get(state, ()))

    def is_terminal(self, state: int) -> bool:
        return state == self.num_states - 1 or "unsafe" in self.labels(state)

    def arrival_reward(self, state: int) -> float:
        return 0.0

    def _outcomes(self, state: int, action: int) -> list[tuple[float, int]]:
        p = self.spec.stay_safe[state]
        if p >= 1.0:
            return [(1.0, state)]
        return [(p, state), (1.0 - p, state + 1)]

    def reset(self, rng: np.random.Generator | None = None) -> LabeledStep:
        s = self.spec.start
        return LabeledStep(s, self.labels(s), 0.0, False)

    def step(self, state: int, action: int, rng: np.random.Generator) -> LabeledStep:
        if self.is_terminal(state):
            raise ContractViolation(f"step from terminal state {state}")
        if action != 0:
            raise ContractViolation(f"invalid action {action}")
        p = self.spec.stay_safe[state]
        nxt = state if rng.random() < p else state + 1
        return LabeledStep(nxt, self.labels(nxt), 0.0, self.is_terminal(nxt))

    def enumerate_transitions(self) -> TransitionTable:
        return _enumerate(self)

    def to_dict(self) -> dict[str, Any]:
        return self.spec.to_dict()


Environment = ConveyorWorld | ChainMdp


def _enumerate(env: Environment) -> TransitionTable:
    n, na = env.num_states, env.num_actions
    probs = np.zeros((n, na, n))
    rewards = np.zeros((n, na, n))
    terminal = np.array([env.is_terminal(s) for s in range(n)], dtype=bool)
    for s in range(n):
        for a in range(na):
            if terminal[s]:
                probs[s, a, s] = 1.0
                continue
            for p, s2 in env._outcomes(s, a):
                probs[s, a, s2] += p
                rewards[s, a, s2] = env.arrival_reward(s2)
    return TransitionTable(probs, [env.labels(s) for s in range(n)], terminal, rewards)


def make_env(doc: dict[str, Any]) -> Environment:
    """Build an environment from its JSON description."""
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind == "conveyor":
        return ConveyorWorld(ConveyorWorldSpec(**doc))
    if kind == "chain":
        return ChainMdp(ChainMdpSpec(**doc))
    raise ValueError(f"unknown environment type {kind!r}")


def load_env(path: str | Path) -> Environment:
    return make_env(json.loads(Path(path).read_text()))
