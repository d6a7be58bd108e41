"""Statistical checking of bounded safety.

Sample-size bounds from Hoeffding's inequality, Monte-Carlo estimation of the
probability that a trace satisfies a bounded path formula, the threshold
decision rule, and an exact finite-horizon DP used as an oracle.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .env import Environment
from .logic import PathFormula, StateFormula, Trace, eval_path, eval_state

# float slack when comparing an estimate against a threshold such as 1-0.1+0.09
_THRESHOLD_SLACK = 1e-12


class Mode(str, Enum):
    NO_FALSE_POSITIVE = "no-false-positive"
    NO_FALSE_NEGATIVE = "no-false-negative"


class BoundSide(str, Enum):
    TWO_SIDED = "two-sided"
    ONE_SIDED = "one-sided"


class Verdict(str, Enum):
    SAFE = "SAFE"
    UNSAFE = "UNSAFE"


@dataclass(frozen=True)
class SmcConfig:
    epsilon_safety: float = 0.1
    epsilon_approx: float = 0.09
    delta: float = 0.1
    m: int | None = None
    horizon: int = 15
    mode: Mode = Mode.NO_FALSE_POSITIVE
    bound_side: BoundSide = BoundSide.TWO_SIDED

    def __post_init__(self) -> None:
        for name in ("epsilon_safety", "epsilon_approx", "delta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "bound_side", BoundSide(self.bound_side))

    @property
    def samples(self) -> int:
        if self.m is not None:
            return self.m
        return required_samples(self.epsilon_approx, self.delta, self.bound_side)


@dataclass(frozen=True)
class SafetyEstimate:
    mu_hat: float
    m_used: int
    verdict: Verdict
    threshold: float

    def to_dict(self) -> dict:
        return {
            "mu_hat": self.mu_hat,
            "m": self.m_used,
            "threshold": self.threshold,
            "verdict": self.verdict.value,
        }


def required_samples(epsilon: float, delta: float, side: BoundSide | str = BoundSide.TWO_SIDED) -> int:
    """Smallest m with ``P(|mu_hat - mu| >= epsilon) <= delta`` by Hoeffding.

    The one-sided form only bounds overestimation, dropping the factor 2.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    side = BoundSide(side)
    numerator = math.log(2.0 / delta) if side is BoundSide.TWO_SIDED else math.log(1.0 / delta)
    return math.ceil(numerator / (2.0 * epsilon * epsilon))


def threshold(epsilon_safety: float, epsilon_approx: float, mode: Mode | str = Mode.NO_FALSE_POSITIVE) -> float:
    if Mode(mode) is Mode.NO_FALSE_POSITIVE:
        return 1.0 - epsilon_safety + epsilon_approx
    return 1.0 - epsilon_safety - epsilon_approx


def decide(
    mu_hat: float,
    epsilon_safety: float,
    epsilon_approx: float,
    mode: Mode | str = Mode.NO_FALSE_POSITIVE,
) -> Verdict:
    """SAFE iff ``mu_hat`` lies in ``[threshold, 1]``."""
    if not 0.0 <= mu_hat <= 1.0:
        raise ValueError(f"mu_hat must lie in [0, 1], got {mu_hat}")
    t = threshold(epsilon_safety, epsilon_approx, mode)
    if t > 1.0:
        warnings.warn(
            f"threshold {t:.4g} exceeds 1: SAFE is unreachable (epsilon_approx >= epsilon_safety)",
            RuntimeWarning,
            stacklevel=2,
        )
    return Verdict.SAFE if mu_hat >= t - _THRESHOLD_SLACK else Verdict.UNSAFE


def estimate_mu(traces: Iterable[Trace | Sequence], phi: PathFormula, m: int) -> float:
    if m < 1:
        raise ValueError("m must be positive")
    hits = 0
    taken = 0
    for tau in traces:
        hits += eval_path(tau, phi)
        taken += 1
        if taken == m:
            break
    if taken < m:
        raise ValueError(f"trace source exhausted after {taken} of {m} traces")
    return hits / m


def check(traces: Iterable[Trace | Sequence], phi: PathFormula, cfg: SmcConfig) -> SafetyEstimate:
    m = cfg.samples
    mu = estimate_mu(traces, phi, m)
    return SafetyEstimate(
        mu,
        m,
        decide(mu, cfg.epsilon_safety, cfg.epsilon_approx, cfg.mode),
        threshold(cfg.epsilon_safety, cfg.epsilon_approx, cfg.mode),
    )


def induced_chain(probs: np.ndarray, policy: np.ndarray | None = None) -> np.ndarray:
    """Collapse ``p(s'|s,a)`` under ``policy[s, a]`` (uniform if omitted)."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 2:
        return probs
    if policy is None:
        policy = np.full(probs.shape[:2], 1.0 / probs.shape[1])
    return np.einsum("sa,sat->st", policy, probs)


def exact_mu_oracle(
    transitions: np.ndarray,
    labelling: Sequence[Iterable[str]],
    phi: StateFormula,
    n: int,
    state: int,
    policy: np.ndarray | None = None,
) -> float:
    """Exact probability that ``G<=n phi`` holds from ``state``.

    ``transitions`` is either a Markov chain ``T[s, s']`` or an MDP table
    ``p[s, a, s']`` together with ``policy[s, a]``.
    """
    T = induced_chain(transitions, policy)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError("transition matrix must be square")
    rows = T.sum(axis=1)
    if not np.allclose(rows, 1.0, atol=1e-9, rtol=0.0):
        raise ValueError("transition rows must sum to 1")
    if n < 0:
        raise ValueError("horizon must be non-negative")
    sat = np.array([eval_state(labelling[s], phi) for s in range(T.shape[0])], dtype=float)
    mu = sat.copy()
    for _ in range(n):
        mu = sat * (T @ mu)
    return float(mu[state])


# ---------------------------------------------------------------- trace sources

def env_traces(
    env: Environment,
    n: int,
    rng: np.random.Generator,
    policy: Callable[[int, np.random.Generator], int] | None = None,
    start: int | None = None,
) -> Iterator[Trace]:
    """Endless stream of label traces with up to ``n`` transitions.

    Traces stop early at terminal states. Without a policy, actions are drawn
    uniformly.
    """
    if policy is None:
        na = env.num_actions

        def policy(s: int, r: np.random.Generator) -> int:
            return 0 if na == 1 else int(r.integers(na))

    while True:
        s = env.reset(rng).state if start is None else start
        labels = [env.labels(s)]
        terminal = env.is_terminal(s)
        for _ in range(n):
            if terminal:
                break
            step = env.step(s, policy(s, rng), rng)
            s, terminal = step.state, step.terminal
            labels.append(step.labels)
        yield Trace(tuple(labels))


@dataclass(frozen=True)
class Repetition:
    index: int
    mu_hat: float
    accurate: bool
    verdict: Verdict


def repetition_harness(
    make_traces: Callable[[np.random.Generator], Iterable[Trace]],
    phi: PathFormula,
    mu_true: float,
    m: int,
    epsilon_safety: float,
    epsilon_approx: float,
    repetitions: int = 500,
    base_seed: int = 0,
    mode: Mode | str = Mode.NO_FALSE_POSITIVE,
) -> list[Repetition]:
    """Repeat ``estimate_mu`` with independent seeds ``(base_seed, r)``."""
    log = []
    for r in range(repetitions):
        rng = np.random.default_rng([base_seed, r])
        mu_hat = estimate_mu(make_traces(rng), phi, m)
        log.append(
            Repetition(
                r,
                mu_hat,
                abs(mu_hat - mu_true) <= epsilon_approx,
                decide(mu_hat, epsilon_safety, epsilon_approx, mode),
            )
        )
    return log
