"""Count-based world model, replay buffer and imagined rollouts.

The model is a maximum-likelihood estimate of the environment built from
observed transitions. Rewards are attached to ``(s, a)``; cost, discount and
safety discount are functions of the state alone and are learned from the
state each transition arrives in.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterable, NamedTuple, Protocol

import numpy as np

from .logic import StateFormula, eval_state

MODEL_VERSION = 1


@dataclass(frozen=True)
class TransitionRecord:
    state: int
    action: int
    reward: float
    cost: float
    safety_discount: float
    next_state: int
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO of transition records."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[TransitionRecord] = deque(maxlen=capacity)

    def append(self, record: TransitionRecord) -> None:
        self._items.append(record)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> TransitionRecord:
        return self._items[i]


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> list[TransitionRecord]:
    """Uniform sample with replacement."""
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty replay buffer")
    if batch_size == 0:
        return []
    idx = rng.integers(len(buffer), size=batch_size)
    return [buffer[int(i)] for i in idx]


def make_cost_target(labels: Iterable[str], phi: StateFormula, violation_cost: float) -> float:
    if violation_cost <= 0:
        raise ValueError("violation cost must be positive")
    return 0.0 if eval_state(labels, phi) else float(violation_cost)


def make_safety_discount_target(labels: Iterable[str], phi: StateFormula, gamma: float) -> float:
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return float(gamma) if eval_state(labels, phi) else 0.0


class Prediction(NamedTuple):
    next_probs: np.ndarray
    reward: float
    cost: float
    discount: float
    safety_discount: float


class _Tables(NamedTuple):
    probs: np.ndarray  # (S, A, S)
    cdf: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    cost: np.ndarray  # (S,)
    discount: np.ndarray  # (S,)
    safety_discount: np.ndarray  # (S,)
    terminal: np.ndarray  # (S,) bool


class ActionSampler(Protocol):
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class ImaginedTrace:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    discounts: np.ndarray
    safety_discounts: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class ImaginedBatch:
    """``B`` rollouts padded to ``H`` steps.

    Steps past a predicted terminal state repeat the terminal state and carry
    zero reward, cost and discounts, so they never contribute to a return.
    """

    states: np.ndarray  # (B, H) int
    actions: np.ndarray  # (B, H) int
    rewards: np.ndarray  # (B, H)
    costs: np.ndarray  # (B, H)
    discounts: np.ndarray  # (B, H)
    safety_discounts: np.ndarray  # (B, H)
    lengths: np.ndarray  # (B,) int

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.horizon)[None, :] < self.lengths[:, None]

    def trace(self, i: int) -> ImaginedTrace:
        n = int(self.lengths[i])
        return ImaginedTrace(
            self.states[i, :n].copy(),
            self.actions[i, :n].copy(),
            self.rewards[i, :n].copy(),
            self.costs[i, :n].copy(),
            self.discounts[i, :n].copy(),
            self.safety_discounts[i, :n].copy(),
        )


class TabularWorldModel:
    """Approximate transition system learned by counting.

    ``pessimistic`` switches the prior for never-seen states from cost 0 to
    cost ``C`` (and safety discount 0).
    """

    def __init__(
        self,
        num_states: int,
        num_actions: int,
        gamma: float = 0.999,
        violation_cost: float = 1.0,
        pessimistic: bool = False,
    ):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if violation_cost <= 0:
            raise ValueError("violation cost must be positive")
        self.num_states = num_states
        self.num_actions = num_actions
        self.gamma = float(gamma)
        self.violation_cost = float(violation_cost)
        self.pessimistic = bool(pessimistic)
        self.transition_counts = np.zeros((num_states, num_actions, num_states), dtype=np.int64)
        self.reward_sums = np.zeros((num_states, num_actions))
        self.state_counts = np.zeros(num_states, dtype=np.int64)
        self.cost_sums = np.zeros(num_states)
        self.violation_counts = np.zeros(num_states, dtype=np.int64)
        self.terminal_counts = np.zeros(num_states, dtype=np.int64)
        self._tables: _Tables | None = None

    @property
    def visit_counts(self) -> np.ndarray:
        return self.transition_counts.sum(axis=2)

    def observe_state(self, state: int, cost: float, safety_discount: float, terminal: bool) -> None:
        self.state_counts[state] += 1
        self.cost_sums[state] += cost
        self.violation_counts[state] += safety_discount == 0.0
        self.terminal_counts[state] += bool(terminal)
        self._tables = None

    def observe(self, record: TransitionRecord) -> None:
        s, a = record.state, record.action
        self.transition_counts[s, a, record.next_state] += 1
        self.reward_sums[s, a] += record.reward
        self.observe_state(record.next_state, record.cost, record.safety_discount, record.terminal)

    def tables(self) -> _Tables:
        if self._tables is None:
            self._tables = self._build_tables()
        return self._tables

    def _build_tables(self) -> _Tables:
        S, A = self.num_states, self.num_actions
        counts = self.transition_counts
        visits = counts.sum(axis=2)
        seen = visits > 0
        # unvisited pairs self-loop
        loops = np.zeros_like(counts)
        loops[np.arange(S)[:, None], np.arange(A)[None, :], np.arange(S)[:, None]] = 1
        eff = np.where(seen[..., None], counts, loops)
        total = eff.sum(axis=2, keepdims=True)
        probs = eff / total
        cdf = np.cumsum(eff, axis=2) / total
        reward = np.divide(self.reward_sums, visits, out=np.zeros((S, A)), where=seen)

        n = self.state_counts
        known = n > 0
        prior_cost = self.violation_cost if self.pessimistic else 0.0
        prior_violation = 1.0 if self.pessimistic else 0.0
        cost = np.divide(self.cost_sums, n, out=np.full(S, prior_cost), where=known)
        violation_rate = np.divide(
            self.violation_counts, n, out=np.full(S, prior_violation), where=known
        )
        terminal_rate = np.divide(self.terminal_counts, n, out=np.zeros(S), where=known)
        return _Tables(
            probs,
            cdf,
            reward,
            cost,
            self.gamma * (1.0 - terminal_rate),
            self.gamma * (1.0 - violation_rate),
            terminal_rate > 0.5,
        )

    def predict(self, state: int, action: int) -> Prediction:
        t = self.tables()
        return Prediction(
            t.probs[state, action].copy(),
            float(t.reward[state, action]),
            float(t.cost[state]),
            float(t.discount[state]),
            float(t.safety_discount[state]),
        )

    def sample_next(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cdf = self.tables().cdf[states, actions]
        u = rng.random(len(states))
        return np.minimum((cdf <= u[:, None]).sum(axis=1), self.num_states - 1)

    def imagine(
        self,
        starts: np.ndarray,
        act: Callable[[np.ndarray, int, np.random.Generator], np.ndarray],
        horizon: int,
        rng: np.random.Generator,
    ) -> ImaginedBatch:
        """Roll ``len(starts)`` trajectories of ``horizon`` states.

        ``act(states, t, rng)`` returns one action per trajectory. The first
        state of every trajectory is its start state.
        """
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        tab = self.tables()
        cur = np.asarray(starts, dtype=np.int64).copy()
        B = len(cur)
        out = {k: np.zeros((B, horizon)) for k in ("rewards", "costs", "discounts", "safety")}
        states = np.zeros((B, horizon), dtype=np.int64)
        actions = np.zeros((B, horizon), dtype=np.int64)
        lengths = np.zeros(B, dtype=np.int64)
        alive = np.ones(B, dtype=bool)
        for t in range(horizon):
            a = np.asarray(act(cur, t, rng), dtype=np.int64)
            states[:, t] = cur
            actions[:, t] = a
            out["rewards"][:, t] = np.where(alive, tab.reward[cur, a], 0.0)
            out["costs"][:, t] = np.where(alive, tab.cost[cur], 0.0)
            out["discounts"][:, t] = np.where(alive, tab.discount[cur], 0.0)
            out["safety"][:, t] = np.where(alive, tab.safety_discount[cur], 0.0)
            lengths += alive
            alive = alive & ~tab.terminal[cur]
            if t + 1 < horizon:
                cur = np.where(alive, self.sample_next(cur, a, rng), cur)
        return ImaginedBatch(
            states, actions, out["rewards"], out["costs"], out["discounts"], out["safety"], lengths
        )

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict[str, Any]:
        tc = self.transition_counts
        nz = zip(*np.nonzero(tc))
        return {
            "version": MODEL_VERSION,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": self.gamma,
            "violation_cost": self.violation_cost,
            "pessimistic": self.pessimistic,
            "transitions": {f"{s},{a},{s2}": int(tc[s, a, s2]) for s, a, s2 in nz},
            "reward_sums": _sparse(self.reward_sums),
            "state_counts": _sparse(self.state_counts),
            "cost_sums": _sparse(self.cost_sums),
            "violation_counts": _sparse(self.violation_counts),
            "terminal_counts": _sparse(self.terminal_counts),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TabularWorldModel":
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        m = cls(
            doc["num_states"],
            doc["num_actions"],
            doc["gamma"],
            doc["violation_cost"],
            doc["pessimistic"],
        )
        for key, n in doc["transitions"].items():
            s, a, s2 = (int(x) for x in key.split(","))
            m.transition_counts[s, a, s2] = n
        _fill(m.reward_sums, doc["reward_sums"])
        _fill(m.state_counts, doc["state_counts"])
        _fill(m.cost_sums, doc["cost_sums"])
        _fill(m.violation_counts, doc["violation_counts"])
        _fill(m.terminal_counts, doc["terminal_counts"])
        return m


def _sparse(arr: np.ndarray) -> dict[str, float | int]:
    out: dict[str, float | int] = {}
    for idx in zip(*np.nonzero(arr)):
        v = arr[idx]
        out[",".join(str(int(i)) for i in idx)] = int(v) if arr.dtype.kind == "i" else float(v)
    return out


def _fill(arr: np.ndarray, doc: dict[str, float | int]) -> None:
    for key, v in doc.items():
        arr[tuple(int(x) for x in key.split(","))] = v


def rollout(
    model: TabularWorldModel,
    policy: ActionSampler,
    start: int,
    horizon: int,
    rng: np.random.Generator,
) -> ImaginedTrace:
    """One imagined trajectory from ``start`` under ``policy``."""
    batch = model.imagine(np.array([start]), lambda s, t, r: policy.sample(s, r), horizon, rng)
    return batch.trace(0)
