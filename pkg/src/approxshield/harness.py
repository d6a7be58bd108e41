"""Shielded model-based training loop, evaluation, metrics and checkpoints.

Each iteration of :func:`train` runs, in order:

1. sample start states from the replay buffer;
2. task critic and task policy updates on task-policy imagination;
3. twin safety-critic regression on the same rollouts, then a soft target update;
4. safe critic and safe policy updates on safe-policy imagination;
5. ``env_steps`` real environment steps with the shielded policy.

The count-based world model is updated as each transition is stored, so
its estimate always covers the whole replay stream.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .agent import (
    LambdaReturnSpec,
    SafetyCriticPair,
    TabularPolicy,
    ValueTable,
    advantages,
    critic_update,
    dense_to_doc,
    doc_to_dense,
    pair_from_doc,
    pair_to_doc,
    policy_update,
    soft_update,
    td_lambda_targets,
    twin_td_lambda_targets,
)
from .env import ConveyorWorldSpec, Environment, make_env
from .logic import StateFormula, eval_state, parse_state_formula
from .model import (
    ReplayBuffer,
    TabularWorldModel,
    TransitionRecord,
    sample_batch,
)
from .shield import DecisionLog, ShieldConfig, select_action
from .smc import BoundSide, required_samples

CHECKPOINT_VERSION = 1
METRICS_HEADER = (
    "episode",
    "steps",
    "return",
    "violations",
    "cum_violations",
    "shield_interventions",
    "mean_mu_hat",
)
RNG_STREAMS = ("env", "action", "train", "shield", "init")


class CheckpointError(ValueError):
    pass


def _default_env() -> dict[str, Any]:
    return ConveyorWorldSpec(slip_prob=0.1).to_dict()


@dataclass
class TrainConfig:
    env: dict[str, Any] = field(default_factory=_default_env)
    formula: str = "!acid"
    seed: int = 0
    gamma: float = 0.999
    lam: float = 0.95
    horizon: int = 15
    shield_horizon: int = 30
    epsilon_safety: float = 0.1
    epsilon_approx: float = 0.09
    delta: float = 0.1
    bound_side: str = "two-sided"
    samples: int | None = None
    violation_cost: float = 1.0
    nu: float = 0.005
    critic_lr: float = 0.1
    policy_lr: float = 0.05
    safe_policy_lr: float | None = 1.0
    entropy_coef: float = 1e-3
    policy_reduction: str = "mean"
    safety_critic_init: float = 0.1
    batch_size: int = 64
    updates_per_iteration: int = 1
    env_steps: int = 50
    warmup_episodes: int = 10
    iterations: int | None = None
    episodes: int | None = 100
    max_episode_steps: int = 200
    shield: bool = True
    bootstrap: bool = True
    literal_discount: bool = False
    pessimistic_prior: bool = False
    buffer_capacity: int = 1_000_000
    checkpoint_every: int = 0
    log_decisions: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.iterations is None and self.episodes is None:
            raise ValueError("set at least one of iterations or episodes")
        for name in ("iterations", "episodes"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.violation_cost <= 0:
            raise ValueError("violation_cost must be positive")
        if min(self.batch_size, self.env_steps, self.max_episode_steps, self.updates_per_iteration) < 1:
            raise ValueError("batch_size, updates_per_iteration, env_steps and max_episode_steps must be positive")
        if self.warmup_episodes < 0 or self.checkpoint_every < 0:
            raise ValueError("warmup_episodes and checkpoint_every must be non-negative")
        if self.samples is not None and self.samples < 1:
            raise ValueError("samples must be positive")
        BoundSide(self.bound_side)
        make_env(self.env)
        parse_state_formula(self.formula)
        self.shield_config()

    @property
    def m(self) -> int:
        if self.samples is not None:
            return self.samples
        return required_samples(self.epsilon_approx, self.delta, self.bound_side)

    def shield_config(self) -> ShieldConfig:
        return ShieldConfig(
            epsilon_safety=self.epsilon_safety,
            epsilon_approx=self.epsilon_approx,
            m=self.m,
            horizon=self.horizon,
            shield_horizon=self.shield_horizon,
            violation_cost=self.violation_cost,
            gamma=self.gamma,
            use_bootstrap=self.bootstrap,
            literal_discount=self.literal_discount,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpisodeMetrics:
    episode: int
    steps: int
    ret: float
    violations: int
    cum_violations: int
    shield_interventions: int
    mean_mu_hat: float

    @property
    def success(self) -> bool:
        return self.ret > 0.0

    def row(self) -> list[str]:
        return [
            str(self.episode),
            str(self.steps),
            repr(float(self.ret)),
            str(self.violations),
            str(self.cum_violations),
            str(self.shield_interventions),
            repr(float(self.mean_mu_hat)),
        ]


def metrics_csv(metrics: list[EpisodeMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


@dataclass
class Agent:
    model: TabularWorldModel
    task_policy: TabularPolicy
    safe_policy: TabularPolicy
    task_critic: ValueTable
    safe_critic: ValueTable
    safety: SafetyCriticPair

    @classmethod
    def create(cls, env: Environment, cfg: TrainConfig, rng: np.random.Generator) -> "Agent":
        S, A = env.num_states, env.num_actions
        return cls(
            TabularWorldModel(S, A, cfg.gamma, cfg.violation_cost, cfg.pessimistic_prior),
            TabularPolicy(S, A),
            TabularPolicy(S, A),
            ValueTable(S, cfg.critic_lr),
            ValueTable(S, cfg.critic_lr),
            SafetyCriticPair.create(S, cfg.critic_lr, cfg.nu, cfg.safety_critic_init * cfg.violation_cost, rng),
        )


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(RNG_STREAMS, children)}


@dataclass
class TrainResult:
    config: TrainConfig
    agent: Agent
    metrics: list[EpisodeMetrics]
    rngs: dict[str, np.random.Generator]
    iterations: int
    buffer: ReplayBuffer

    def checkpoint(self) -> dict[str, Any]:
        return checkpoint_doc(self.config, self.agent, self.rngs, self.iterations, len(self.metrics))


class _Labeller:
    """Per-state cost and safety-discount targets, cached."""

    def __init__(self, env: Environment, phi: StateFormula, cost: float, gamma: float):
        self.safe = [eval_state(env.labels(s), phi) for s in range(env.num_states)]
        self.cost = cost
        self.gamma = gamma

    def targets(self, state: int) -> tuple[float, float]:
        if self.safe[state]:
            return 0.0, self.gamma
        return self.cost, 0.0


def _update_agent(
    agent: Agent,
    cfg: TrainConfig,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
) -> None:
    batch = sample_batch(buffer, cfg.batch_size, rng)
    starts = np.array([r.state for r in batch], dtype=np.int64)
    model = agent.model
    H = cfg.horizon

    # task critic, then task policy with pre-update baselines
    traj = model.imagine(starts, lambda s, t, r: agent.task_policy.sample(s, r), H, rng)
    w = traj.mask & (np.arange(H)[None, :] < H - 1)
    states, actions = traj.states[w], traj.actions[w]
    targets = td_lambda_targets(traj, agent.task_critic, LambdaReturnSpec(cfg.lam, "reward", "discount"))
    adv = advantages(targets, agent.task_critic(traj.states), "maximise")[w]
    critic_update(agent.task_critic, states, targets[w])
    policy_update(agent.task_policy, states, actions, adv, cfg.policy_lr, cfg.entropy_coef, cfg.policy_reduction)

    # twin safety critics on task-policy rollouts
    cost_targets = twin_td_lambda_targets(traj, agent.safety, cfg.lam)[w]
    for critic in agent.safety.online:
        critic_update(critic, states, cost_targets)
    soft_update(agent.safety)

    # safe critic and safe policy
    traj = model.imagine(starts, lambda s, t, r: agent.safe_policy.sample(s, r), H, rng)
    w = traj.mask & (np.arange(H)[None, :] < H - 1)
    states, actions = traj.states[w], traj.actions[w]
    targets = td_lambda_targets(traj, agent.safe_critic, LambdaReturnSpec(cfg.lam, "cost", "discount"))
    adv = advantages(targets, agent.safe_critic(traj.states), "minimise")[w]
    critic_update(agent.safe_critic, states, targets[w])
    safe_lr = cfg.policy_lr if cfg.safe_policy_lr is None else cfg.safe_policy_lr
    policy_update(agent.safe_policy, states, actions, adv, safe_lr, cfg.entropy_coef, cfg.policy_reduction)


class _Episode:
    def __init__(self) -> None:
        self.steps = 0
        self.ret = 0.0
        self.violations = 0
        self.interventions = 0
        self.mu_sum = 0.0
        self.mu_count = 0

    def mean_mu(self) -> float:
        return self.mu_sum / self.mu_count if self.mu_count else math.nan


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    on_episode: Callable[[EpisodeMetrics], None] | None = None,
) -> TrainResult:
    """Run shielded (or unshielded) training; deterministic given ``cfg.seed``."""
    cfg.validate()
    env = make_env(cfg.env)
    phi = parse_state_formula(cfg.formula)
    labeller = _Labeller(env, phi, cfg.violation_cost, cfg.gamma)
    rngs = make_rngs(cfg.seed)
    agent = Agent.create(env, cfg, rngs["init"])
    shield_cfg = cfg.shield_config()
    buffer = ReplayBuffer(cfg.buffer_capacity)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = DecisionLog(out / "decisions.jsonl") if out is not None and cfg.log_decisions else None

    def begin() -> int:
        s = env.reset(rngs["env"]).state
        agent.model.observe_state(s, *labeller.targets(s), False)
        return s

    def store(s: int, a: int, step) -> None:
        cost, safety = labeller.targets(step.state)
        rec = TransitionRecord(s, a, step.reward, cost, safety, step.state, step.terminal)
        buffer.append(rec)
        agent.model.observe(rec)

    na = env.num_actions
    for _ in range(cfg.warmup_episodes):
        s = begin()
        for _ in range(cfg.max_episode_steps):
            a = int(rngs["action"].integers(na))
            step = env.step(s, a, rngs["env"])
            store(s, a, step)
            s = step.state
            if step.terminal:
                break

    metrics: list[EpisodeMetrics] = []
    cum = 0
    total_steps = 0
    it = 0
    s = begin()
    ep = _Episode()
    ep.violations += not labeller.safe[s]

    def done() -> bool:
        return cfg.episodes is not None and len(metrics) >= cfg.episodes

    while (cfg.iterations is None or it < cfg.iterations) and not done():
        if len(buffer):
            for _ in range(cfg.updates_per_iteration):
                _update_agent(agent, cfg, buffer, rngs["train"])
        for _ in range(cfg.env_steps):
            if cfg.shield:
                dec = select_action(
                    agent.model,
                    agent.task_policy,
                    agent.safe_policy,
                    s,
                    shield_cfg,
                    agent.safety,
                    rngs["shield"],
                    rngs["action"],
                )
                a = dec.action
                ep.interventions += dec.policy_used == "safe"
                ep.mu_sum += dec.mu_hat
                ep.mu_count += 1
                if log is not None:
                    log.write(total_steps, s, dec)
            else:
                a = agent.task_policy.act(s, rngs["action"])
            step = env.step(s, a, rngs["env"])
            store(s, a, step)
            total_steps += 1
            ep.steps += 1
            ep.ret += step.reward
            ep.violations += not labeller.safe[step.state]
            s = step.state
            if step.terminal or ep.steps >= cfg.max_episode_steps:
                cum += ep.violations
                m = EpisodeMetrics(
                    len(metrics) + 1, ep.steps, ep.ret, ep.violations, cum, ep.interventions, ep.mean_mu()
                )
                metrics.append(m)
                if on_episode is not None:
                    on_episode(m)
                if done():
                    break
                s = begin()
                ep = _Episode()
                ep.violations += not labeller.safe[s]
        it += 1
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.json", checkpoint_doc(cfg, agent, rngs, it, len(metrics)))

    if log is not None:
        log.close()
    result = TrainResult(cfg, agent, metrics, rngs, it, buffer)
    if out is not None:
        (out / "metrics.csv").write_bytes(metrics_csv(metrics).encode("utf-8"))
        save_checkpoint(out / "checkpoint.json", result.checkpoint())
    return result


# ---------------------------------------------------------------- checkpoints

def checkpoint_doc(
    cfg: TrainConfig,
    agent: Agent,
    rngs: dict[str, np.random.Generator],
    iterations: int = 0,
    episodes: int = 0,
) -> dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "model": agent.model.to_dict(),
        "task_policy": dense_to_doc(agent.task_policy.logits),
        "safe_policy": dense_to_doc(agent.safe_policy.logits),
        "task_critic": dense_to_doc(agent.task_critic.values),
        "safe_critic": dense_to_doc(agent.safe_critic.values),
        "safety_critics": pair_to_doc(agent.safety),
        "rng": {name: rngs[name].bit_generator.state for name in RNG_STREAMS},
        "progress": {"iterations": iterations, "episodes": episodes},
    }


def encode_checkpoint(doc: dict[str, Any]) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(path: str | Path, doc: dict[str, Any]) -> None:
    """Write atomically through a temporary file in the same directory."""
    path = Path(path)
    data = encode_checkpoint(doc)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    config: TrainConfig
    agent: Agent
    rngs: dict[str, np.random.Generator]
    progress: dict[str, int]

    def to_doc(self) -> dict[str, Any]:
        return checkpoint_doc(
            self.config, self.agent, self.rngs, self.progress["iterations"], self.progress["episodes"]
        )


def checkpoint_from_doc(doc: Any) -> Checkpoint:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        cfg = TrainConfig.from_dict(doc["config"])
        env = make_env(cfg.env)
        S, A = env.num_states, env.num_actions
        model = TabularWorldModel.from_dict(doc["model"])
        if (model.num_states, model.num_actions) != (S, A):
            raise CheckpointError("model shape does not match the environment")
        agent = Agent(
            model,
            TabularPolicy(S, A, doc_to_dense(doc["task_policy"], (S, A))),
            TabularPolicy(S, A, doc_to_dense(doc["safe_policy"], (S, A))),
            ValueTable(S, cfg.critic_lr, doc_to_dense(doc["task_critic"], (S,))),
            ValueTable(S, cfg.critic_lr, doc_to_dense(doc["safe_critic"], (S,))),
            pair_from_doc(doc["safety_critics"], S),
        )
        rngs = {}
        for name in RNG_STREAMS:
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = doc["rng"][name]
            rngs[name] = g
        progress = {k: int(doc["progress"][k]) for k in ("iterations", "episodes")}
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, AttributeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(cfg, agent, rngs, progress)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from exc
    return checkpoint_from_doc(doc)


# ---------------------------------------------------------------- evaluation

def evaluate(
    checkpoint: Checkpoint | TrainResult | str | Path,
    episodes: int,
    seed: int = 0,
    shield: bool = True,
    policy: str = "task",
    env_doc: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Roll out frozen policies; nothing is learned.

    ``policy`` selects the acting policy when the shield is off: ``task`` or
    ``safe``.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    cfg, agent = checkpoint.config, checkpoint.agent
    if policy not in ("task", "safe"):
        raise ValueError("policy must be 'task' or 'safe'")
    if episodes < 0:
        raise ValueError("episodes must be non-negative")
    env = make_env(env_doc if env_doc is not None else cfg.env)
    labeller = _Labeller(env, parse_state_formula(cfg.formula), cfg.violation_cost, cfg.gamma)
    rngs = make_rngs(seed)
    shield_cfg = cfg.shield_config()
    acting = agent.task_policy if policy == "task" else agent.safe_policy
    returns, violations, successes, interventions = [], 0, 0, 0
    for _ in range(episodes):
        s = env.reset(rngs["env"]).state
        ret = 0.0
        violations += not labeller.safe[s]
        for _ in range(cfg.max_episode_steps):
            if shield:
                dec = select_action(
                    agent.model, agent.task_policy, agent.safe_policy, s, shield_cfg,
                    agent.safety, rngs["shield"], rngs["action"],
                )
                a = dec.action
                interventions += dec.policy_used == "safe"
            else:
                a = acting.act(s, rngs["action"])
            step = env.step(s, a, rngs["env"])
            ret += step.reward
            violations += not labeller.safe[step.state]
            s = step.state
            if step.terminal:
                break
        returns.append(ret)
        successes += ret > 0.0
    if not returns:
        return {"episodes": 0}
    return {
        "episodes": episodes,
        "mean_return": float(np.mean(returns)),
        "violations": violations,
        "successes": successes,
        "success_rate": successes / episodes,
        "shield_interventions": interventions,
    }
