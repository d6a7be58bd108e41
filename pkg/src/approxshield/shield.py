"""Look-ahead shielding on imagined rollouts.

From the current state, ``m`` trajectories are imagined under the task
policy. A trajectory counts as safe when its discounted cost stays strictly
below ``gamma**(H-1) * C``. With bootstrapping, the tail past the
imagination horizon is replaced by the smaller of the two online safety
critics at the final state, and the threshold stretches to
``gamma**(T-1) * C``. The agent follows the task policy when the fraction of
safe trajectories reaches ``1 - eps_safety + eps_approx`` and the safe policy
otherwise.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Literal

import numpy as np

from .agent import SafetyCriticPair, TabularPolicy
from .model import ImaginedBatch, ImaginedTrace, TabularWorldModel
from .smc import Mode, Verdict, decide, threshold

# near-ties with the cost threshold count as violations; guards pow vs cumprod rounding
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class ShieldConfig:
    epsilon_safety: float = 0.1
    epsilon_approx: float = 0.09
    m: int = 185
    horizon: int = 15
    shield_horizon: int = 30
    violation_cost: float = 1.0
    gamma: float = 0.999
    use_bootstrap: bool = True
    literal_discount: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon_safety < 1.0 or not 0.0 < self.epsilon_approx < 1.0:
            raise ValueError("epsilon_safety and epsilon_approx must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.horizon < 1 or self.shield_horizon < self.horizon:
            raise ValueError("need shield_horizon >= horizon >= 1")
        if self.use_bootstrap and self.horizon < 2:
            raise ValueError("bootstrapped costs need horizon >= 2")
        if self.epsilon_safety <= self.epsilon_approx:
            warnings.warn(
                "epsilon_safety <= epsilon_approx: the task policy can never be certified "
                "and the safe policy will always act",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def threshold(self) -> float:
        return threshold(self.epsilon_safety, self.epsilon_approx, Mode.NO_FALSE_POSITIVE)

    @property
    def cost_horizon(self) -> int:
        return self.shield_horizon if self.use_bootstrap else self.horizon


@dataclass
class ShieldDecision:
    action: int
    policy_used: Literal["task", "safe"]
    mu_hat: float
    threshold: float
    costs: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "policy_used": self.policy_used,
            "mu_hat": self.mu_hat,
            "threshold": self.threshold,
        }


def discount_weights(discounts: np.ndarray, literal: bool = False) -> np.ndarray:
    """Weights ``D_t`` with ``D_1 = 1``.

    By default ``D_t`` is the running product of the discounts before step
    ``t``. ``literal=True`` uses ``d_t ** (t-1)`` instead; the two agree when
    the discount is constant.
    """
    d = np.asarray(discounts, float)
    H = d.shape[-1]
    if literal:
        return d ** np.arange(H)
    w = np.ones_like(d)
    if H > 1:
        w[..., 1:] = np.cumprod(d[..., :-1], axis=-1)
    return w


def _arrays(trace: ImaginedTrace | ImaginedBatch | None, costs, discounts):
    if trace is not None:
        return np.asarray(trace.costs, float), np.asarray(trace.discounts, float)
    return np.asarray(costs, float), np.asarray(discounts, float)


def trace_cost(
    trace: ImaginedTrace | ImaginedBatch | None = None,
    *,
    costs: np.ndarray | None = None,
    discounts: np.ndarray | None = None,
    literal: bool = False,
) -> np.ndarray | float:
    """Discounted cost of each trajectory (last axis is time)."""
    c, d = _arrays(trace, costs, discounts)
    if c.shape[-1] < 1:
        raise ValueError("trace must have at least one step")
    out = (discount_weights(d, literal) * c).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def cost_threshold(horizon: int, gamma: float, violation_cost: float) -> float:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    return gamma ** (horizon - 1) * violation_cost


def violates(cost, horizon: int, gamma: float, violation_cost: float):
    """True where ``cost >= gamma**(horizon-1) * C``; ties are violations."""
    limit = cost_threshold(horizon, gamma, violation_cost)
    return np.asarray(cost) >= limit * (1.0 - _TIE_RTOL)


def bootstrapped_cost(
    trace: ImaginedTrace | ImaginedBatch,
    pair: SafetyCriticPair,
    literal: bool = False,
) -> np.ndarray | float:
    """Head cost over the first ``H-1`` steps plus the discounted critic tail."""
    c, d = np.asarray(trace.costs, float), np.asarray(trace.discounts, float)
    H = c.shape[-1]
    if H < 2:
        raise ValueError("bootstrapped cost needs at least two steps")
    w = discount_weights(d, literal)
    head = (w[..., :-1] * c[..., :-1]).sum(axis=-1)
    tail = w[..., -1] * pair.min_online(np.asarray(trace.states)[..., -1])
    out = head + tail
    return float(out) if np.ndim(out) == 0 else out


def estimate_mu_hat(
    model: TabularWorldModel,
    task_policy: TabularPolicy,
    start: int,
    cfg: ShieldConfig,
    pair: SafetyCriticPair | None,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """Fraction of ``m`` imagined task-policy trajectories judged safe."""
    batch = model.imagine(
        np.full(cfg.m, start, dtype=np.int64),
        lambda s, t, r: task_policy.sample(s, r),
        cfg.horizon,
        rng,
    )
    if cfg.use_bootstrap:
        if pair is None:
            raise ValueError("bootstrapping needs safety critics")
        costs = bootstrapped_cost(batch, pair, cfg.literal_discount)
    else:
        costs = trace_cost(batch, literal=cfg.literal_discount)
    bad = violates(costs, cfg.cost_horizon, cfg.gamma, cfg.violation_cost)
    return float(np.count_nonzero(~bad)) / cfg.m, costs


def select_action(
    model: TabularWorldModel,
    task_policy: TabularPolicy,
    safe_policy: TabularPolicy,
    state: int,
    cfg: ShieldConfig,
    pair: SafetyCriticPair | None,
    rng: np.random.Generator,
    action_rng: np.random.Generator | None = None,
) -> ShieldDecision:
    """Pick the next action with the shielded policy.

    ``rng`` drives the imagined rollouts; ``action_rng`` (default ``rng``)
    draws the action itself.
    """
    mu, costs = estimate_mu_hat(model, task_policy, state, cfg, pair, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        verdict = decide(mu, cfg.epsilon_safety, cfg.epsilon_approx, Mode.NO_FALSE_POSITIVE)
    use_task = verdict is Verdict.SAFE
    policy = task_policy if use_task else safe_policy
    action = policy.act(state, action_rng if action_rng is not None else rng)
    return ShieldDecision(action, "task" if use_task else "safe", mu, cfg.threshold, costs)


class DecisionLog:
    """JSON-lines log with one record per environment step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh: IO[str] | None = self.path.open("w", encoding="utf-8", newline="\n")

    def write(self, step: int, state: int, decision: ShieldDecision) -> None:
        assert self._fh is not None
        rec = {"step": step, "state": state, **decision.to_dict()}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "DecisionLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
