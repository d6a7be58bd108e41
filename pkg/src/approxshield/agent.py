"""Tabular actors and critics trained on imagined rollouts.

Both policies are softmax tables. Critics are value tables regressed toward
TD-lambda targets. The cost-side critics come as a twin pair with slowly
tracking target copies, and their targets bootstrap from the smaller of
the two target tables.

Batched updates average the per-sample gradient over all occurrences of a
state, so one update moves each visited entry by at most one learning-rate
step whatever the batch size. For critics this makes every update a convex
combination of the old value and the targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Literal

import numpy as np

from .model import ImaginedBatch, ImaginedTrace


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    return -(probs * np.log(probs)).sum(axis=-1)


class TabularPolicy:
    def __init__(self, num_states: int, num_actions: int, logits: np.ndarray | None = None):
        self.num_states = num_states
        self.num_actions = num_actions
        self.logits = np.zeros((num_states, num_actions)) if logits is None else np.array(logits, dtype=float)

    def probs(self, states: np.ndarray | int | None = None) -> np.ndarray:
        if states is None:
            return softmax(self.logits)
        return softmax(self.logits[states])

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        states = np.asarray(states)
        cdf = np.cumsum(self.probs(states), axis=-1)
        cdf /= cdf[..., -1:]
        u = rng.random(states.shape)
        return np.minimum((cdf <= u[..., None]).sum(axis=-1), self.num_actions - 1)

    def act(self, state: int, rng: np.random.Generator) -> int:
        return int(self.sample(np.array([state]), rng)[0])


class ValueTable:
    def __init__(self, num_states: int, lr: float = 0.1, values: np.ndarray | None = None):
        self.lr = lr
        self.values = np.zeros(num_states) if values is None else np.array(values, dtype=float)

    def __call__(self, states: np.ndarray | int) -> np.ndarray:
        return self.values[states]

    def copy(self) -> "ValueTable":
        return ValueTable(len(self.values), self.lr, self.values.copy())


@dataclass
class SafetyCriticPair:
    online: tuple[ValueTable, ValueTable]
    target: tuple[ValueTable, ValueTable]
    nu: float = 0.005

    def __post_init__(self) -> None:
        if not 0.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (0, 1]")

    @classmethod
    def create(
        cls,
        num_states: int,
        lr: float = 0.1,
        nu: float = 0.005,
        init_scale: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> "SafetyCriticPair":
        """Online critics start independently in ``[0, init_scale)``; targets copy them."""
        if init_scale > 0.0:
            if rng is None:
                raise ValueError("random initialisation needs an rng")
            v1 = ValueTable(num_states, lr, rng.uniform(0.0, init_scale, num_states))
            v2 = ValueTable(num_states, lr, rng.uniform(0.0, init_scale, num_states))
        else:
            v1, v2 = ValueTable(num_states, lr), ValueTable(num_states, lr)
        return cls((v1, v2), (v1.copy(), v2.copy()), nu)

    def min_online(self, states: np.ndarray | int) -> np.ndarray:
        return np.minimum(self.online[0](states), self.online[1](states))

    def min_target(self, states: np.ndarray | int) -> np.ndarray:
        return np.minimum(self.target[0](states), self.target[1](states))


@dataclass(frozen=True)
class LambdaReturnSpec:
    lam: float = 0.95
    stream: Literal["reward", "cost"] = "reward"
    discount: Literal["discount", "safety"] = "discount"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def lambda_returns(x: np.ndarray, d: np.ndarray, v: np.ndarray, lam: float) -> np.ndarray:
    """Backward TD-lambda recursion along the last axis.

    ``x[t]`` is the per-step signal, ``d[t]`` its discount and ``v[t]`` the
    bootstrap value of the state at step ``t``::

        V[H-1] = x[H-1] + d[H-1] * v[H-1]
        V[t]   = x[t] + d[t] * ((1 - lam) * v[t+1] + lam * V[t+1])
    """
    x, d, v = np.asarray(x, float), np.asarray(d, float), np.asarray(v, float)
    out = np.empty(np.broadcast_shapes(x.shape, d.shape, v.shape))
    H = out.shape[-1]
    if H < 1:
        raise ValueError("trace must have at least one step")
    out[..., H - 1] = x[..., H - 1] + d[..., H - 1] * v[..., H - 1]
    for t in range(H - 2, -1, -1):
        out[..., t] = x[..., t] + d[..., t] * ((1.0 - lam) * v[..., t + 1] + lam * out[..., t + 1])
    return out


def _streams(trace: ImaginedTrace | ImaginedBatch, spec: LambdaReturnSpec) -> tuple[np.ndarray, np.ndarray]:
    x = trace.rewards if spec.stream == "reward" else trace.costs
    d = trace.discounts if spec.discount == "discount" else trace.safety_discounts
    return x, d


def td_lambda_targets(
    trace: ImaginedTrace | ImaginedBatch,
    value_fn: Callable[[np.ndarray], np.ndarray],
    spec: LambdaReturnSpec,
) -> np.ndarray:
    x, d = _streams(trace, spec)
    return lambda_returns(x, d, value_fn(trace.states), spec.lam)


def twin_td_lambda_targets(
    trace: ImaginedTrace | ImaginedBatch, pair: SafetyCriticPair, lam: float
) -> np.ndarray:
    """Cost targets bootstrapped from ``min`` of the two target critics."""
    spec = LambdaReturnSpec(lam, "cost", "safety")
    return td_lambda_targets(trace, pair.min_target, spec)


def critic_update(table: ValueTable, states: np.ndarray, targets: np.ndarray) -> ValueTable:
    """One gradient step on ``0.5 * (v(s) - target)^2`` averaged per state."""
    states = np.asarray(states).ravel()
    targets = np.asarray(targets, float).ravel()
    if states.shape != targets.shape:
        raise ValueError("states and targets must have equal length")
    if len(states) == 0:
        return table
    n = len(table.values)
    err = np.bincount(states, weights=targets - table.values[states], minlength=n)
    cnt = np.bincount(states, minlength=n)
    table.values += table.lr * err / np.maximum(cnt, 1)
    return table


def entropy_grad(probs: np.ndarray) -> np.ndarray:
    """Gradient of the softmax entropy with respect to the logits."""
    logp = np.log(probs)
    h = -(probs * logp).sum(axis=-1, keepdims=True)
    return -probs * (logp + h)


def policy_gradient(
    logits: np.ndarray, actions: np.ndarray, advantages: np.ndarray, entropy_coef: float
) -> np.ndarray:
    """Ascent direction of ``A * log pi(a) + eta * H(pi)`` per sample.

    ``logits`` has shape ``(N, A)``; ``actions`` and ``advantages`` shape ``(N,)``.
    """
    p = softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(actions)), actions] = 1.0
    return np.asarray(advantages, float)[:, None] * (onehot - p) + entropy_coef * entropy_grad(p)


def surrogate_objective(logits: np.ndarray, action: int, advantage: float, entropy_coef: float) -> float:
    p = softmax(logits)
    return float(advantage * np.log(p[action]) + entropy_coef * entropy(p))


def policy_update(
    policy: TabularPolicy,
    states: np.ndarray,
    actions: np.ndarray,
    advantages: np.ndarray,
    lr: float = 0.05,
    entropy_coef: float = 1e-3,
    reduction: Literal["sum", "mean"] = "mean",
) -> TabularPolicy:
    """Reinforce-with-entropy step on the logits of each visited state.

    ``advantages`` already carry their sign: ``V - v(s)`` to maximise a
    return, ``v(s) - V`` to minimise an expected cost. With ``"sum"`` every
    step contributes a full learning-rate step; ``"mean"`` averages the
    gradients over the occurrences of each state.
    """
    states = np.asarray(states).ravel()
    actions = np.asarray(actions).ravel()
    advantages = np.asarray(advantages, float).ravel()
    if len(states) == 0:
        return policy
    grad = policy_gradient(policy.logits[states], actions, advantages, entropy_coef)
    acc = np.zeros_like(policy.logits)
    np.add.at(acc, states, grad)
    if reduction == "mean":
        acc /= np.maximum(np.bincount(states, minlength=policy.num_states), 1)[:, None]
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    policy.logits += lr * acc
    return policy


def advantages(targets: np.ndarray, baseline: np.ndarray, sign: Literal["maximise", "minimise"]) -> np.ndarray:
    diff = np.asarray(targets, float) - np.asarray(baseline, float)
    if sign == "maximise":
        return diff
    if sign == "minimise":
        return -diff
    raise ValueError(f"unknown sign {sign!r}")


def soft_update(pair: SafetyCriticPair) -> SafetyCriticPair:
    for online, target in zip(pair.online, pair.target):
        target.values = pair.nu * online.values + (1.0 - pair.nu) * target.values
    return pair


# ---------------------------------------------------------------- persistence

def dense_to_doc(arr: np.ndarray) -> dict[str, float]:
    """Non-zero entries keyed by ``"s"`` or ``"s,a"``."""
    return {
        ",".join(str(int(i)) for i in idx): float(arr[idx]) for idx in zip(*np.nonzero(arr))
    }


def doc_to_dense(doc: dict[str, float], shape: tuple[int, ...]) -> np.ndarray:
    arr = np.zeros(shape)
    for key, v in doc.items():
        arr[tuple(int(x) for x in key.split(","))] = v
    return arr


def pair_to_doc(pair: SafetyCriticPair) -> dict[str, Any]:
    return {
        "nu": pair.nu,
        "lr": pair.online[0].lr,
        "online": [dense_to_doc(t.values) for t in pair.online],
        "target": [dense_to_doc(t.values) for t in pair.target],
    }


def pair_from_doc(doc: dict[str, Any], num_states: int) -> SafetyCriticPair:
    lr = doc["lr"]
    online = tuple(ValueTable(num_states, lr, doc_to_dense(d, (num_states,))) for d in doc["online"])
    target = tuple(ValueTable(num_states, lr, doc_to_dense(d, (num_states,))) for d in doc["target"])
    return SafetyCriticPair(online, target, doc["nu"])
