import json

import numpy as np
import pytest

import approxshield.harness as harness
from approxshield.harness import (
    METRICS_HEADER,
    CheckpointError,
    TrainConfig,
    checkpoint_doc,
    encode_checkpoint,
    evaluate,
    load_checkpoint,
    make_rngs,
    metrics_csv,
    save_checkpoint,
    train,
)


def small(**kw):
    base = dict(episodes=8, warmup_episodes=2, env_steps=20, batch_size=16, samples=20, horizon=6, shield_horizon=12)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(small(), out), out


def test_zero_iterations_only_warms_up():
    res = train(small(iterations=0, episodes=None, warmup_episodes=3))
    assert res.metrics == [] and res.iterations == 0
    assert len(res.buffer) > 0
    assert res.agent.model.to_dict()["transitions"] != {}


def test_determinism_same_seed(tmp_path):
    a = train(small(seed=4), tmp_path / "a")
    b = train(small(seed=4), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)


def test_different_seeds_differ():
    assert metrics_csv(train(small(seed=1)).metrics) != metrics_csv(train(small(seed=2)).metrics)


def test_unshielded_never_calls_the_shield(monkeypatch):
    ref = metrics_csv(train(small(shield=False, seed=3)).metrics)

    def boom(*a, **k):
        raise AssertionError("shield used")

    monkeypatch.setattr(harness, "select_action", boom)
    run = train(small(shield=False, seed=3))
    assert metrics_csv(run.metrics) == ref
    assert all(m.shield_interventions == 0 for m in run.metrics)


def test_unshielded_equals_shield_with_zero_threshold(monkeypatch):
    # accepting every mu-hat makes the shielded path act with the task policy
    ref = train(small(shield=False, seed=5))
    monkeypatch.setattr(harness, "select_action", _always_task)
    run = train(small(shield=True, seed=5))
    assert [(m.steps, m.ret, m.violations) for m in run.metrics] == [(m.steps, m.ret, m.violations) for m in ref.metrics]


def _always_task(model, task, safe, s, cfg, pair, rng, action_rng):
    from approxshield.shield import ShieldDecision

    return ShieldDecision(task.act(s, action_rng), "task", 1.0, 0.0, np.zeros(0))


def test_metrics_integrity(trained):
    res, _ = trained
    ms = res.metrics
    assert len(ms) == 8
    assert [m.episode for m in ms] == list(range(1, 9))
    assert sum(m.violations for m in ms) == ms[-1].cum_violations
    assert all(a.cum_violations <= b.cum_violations for a, b in zip(ms, ms[1:]))
    assert all(1 <= m.steps <= 200 for m in ms)


def test_metrics_csv_format(trained):
    _, out = trained
    data = (out / "metrics.csv").read_bytes()
    assert b"\r" not in data and data.endswith(b"\n")
    lines = data.decode().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[0] == "episode,steps,return,violations,cum_violations,shield_interventions,mean_mu_hat"
    assert len(lines) == 9
    for line in lines[1:]:
        fields = line.split(",")
        assert len(fields) == 7
        float(fields[2]), float(fields[6])


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"episodes": 3, "learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=None, episodes=None)
    with pytest.raises(ValueError):
        TrainConfig(formula="acid &&")
    with pytest.raises(ValueError):
        TrainConfig(horizon=40, shield_horizon=30)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"episodes": 2, "seed": 9}))
    assert TrainConfig.load(p).seed == 9


def test_invalid_config_has_no_side_effect(tmp_path):
    cfg = small()
    cfg.gamma = 2.0
    with pytest.raises(ValueError):
        train(cfg, tmp_path / "never")
    assert not (tmp_path / "never").exists()


def test_default_sample_count():
    assert TrainConfig().m == 185
    assert TrainConfig(samples=512).m == 512


def test_checkpoint_round_trip(trained, tmp_path):
    _, out = trained
    first = (out / "checkpoint.json").read_bytes()
    ck = load_checkpoint(out / "checkpoint.json")
    save_checkpoint(tmp_path / "again.json", ck.to_doc())
    assert (tmp_path / "again.json").read_bytes() == first
    res, _ = trained
    np.testing.assert_array_equal(ck.agent.task_policy.logits, res.agent.task_policy.logits)
    np.testing.assert_array_equal(ck.agent.safety.target[0].values, res.agent.safety.target[0].values)


def test_checkpoint_restores_rng_state(trained):
    res, out = trained
    ck = load_checkpoint(out / "checkpoint.json")
    for name in ck.rngs:
        assert ck.rngs[name].bit_generator.state == res.rngs[name].bit_generator.state


def test_corrupted_checkpoint(tmp_path, trained):
    _, out = trained
    bad = tmp_path / "bad.json"
    bad.write_bytes((out / "checkpoint.json").read_bytes()[:-50])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    doc = json.loads((out / "checkpoint.json").read_text())
    for broken in ({**doc, "version": 2}, {k: v for k, v in doc.items() if k != "model"}, [1, 2]):
        bad.write_text(json.dumps(broken))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_fresh_agent_checkpoint_is_empty(tmp_path):
    cfg = small()
    rngs = make_rngs(0)
    agent = harness.Agent.create(harness.make_env(cfg.env), cfg, rngs["init"])
    save_checkpoint(tmp_path / "fresh.json", checkpoint_doc(cfg, agent, rngs))
    doc = json.loads((tmp_path / "fresh.json").read_text())
    assert doc["model"]["transitions"] == {} and doc["model"]["state_counts"] == {}
    assert encode_checkpoint(doc) == (tmp_path / "fresh.json").read_bytes()


def test_periodic_checkpoints(tmp_path):
    train(small(checkpoint_every=1, episodes=2), tmp_path)
    assert load_checkpoint(tmp_path / "checkpoint.json").progress["episodes"] == 2


def test_evaluate(trained):
    res, out = trained
    assert evaluate(res, 0) == {"episodes": 0}
    a = evaluate(out / "checkpoint.json", 3, seed=2)
    b = evaluate(out / "checkpoint.json", 3, seed=2)
    assert a == b and a["episodes"] == 3
    off = evaluate(res, 3, shield=False, policy="safe")
    assert off["shield_interventions"] == 0
    with pytest.raises(ValueError):
        evaluate(res, 1, policy="other")


def test_evaluate_does_not_learn(trained):
    res, out = trained
    before = (out / "checkpoint.json").read_bytes()
    ck = load_checkpoint(out / "checkpoint.json")
    evaluate(ck, 2)
    assert encode_checkpoint(ck.to_doc()) == before


def test_decision_log_written(tmp_path):
    train(small(episodes=1, log_decisions=True), tmp_path)
    lines = (tmp_path / "decisions.jsonl").read_text().splitlines()
    assert lines and all(json.loads(x)["policy_used"] in ("task", "safe") for x in lines)


def test_loop_order(monkeypatch):
    calls = []
    real = {n: getattr(harness, n) for n in ("critic_update", "policy_update", "soft_update", "td_lambda_targets")}

    def spy(name):
        def f(*a, **k):
            calls.append(name)
            return real[name](*a, **k)

        return f

    for name in real:
        monkeypatch.setattr(harness, name, spy(name))
    train(small(iterations=1, episodes=None))
    assert calls == [
        "td_lambda_targets",
        "critic_update",
        "policy_update",
        "critic_update",
        "critic_update",
        "soft_update",
        "td_lambda_targets",
        "critic_update",
        "policy_update",
    ]


def test_policy_uses_pre_update_baseline(monkeypatch):
    # the safe-policy advantage baseline is read from the safe critic before it moves
    events = []
    real_adv, real_critic = harness.advantages, harness.critic_update

    def adv(targets, baseline, sign):
        events.append(("adv", sign, np.array(baseline, copy=True)))
        return real_adv(targets, baseline, sign)

    def crit(critic, states, targets):
        before = critic.values.copy()
        out = real_critic(critic, states, targets)
        events.append(("critic", before, critic.values.copy()))
        return out

    monkeypatch.setattr(harness, "advantages", adv)
    monkeypatch.setattr(harness, "critic_update", crit)
    train(small(iterations=10, episodes=None, warmup_episodes=5))
    last = [i for i, e in enumerate(events) if e[0] == "adv" and e[1] == "minimise"][-1]
    baseline = events[last][2]
    _, before, after = events[last + 1]
    assert not np.array_equal(before, after)
    assert np.all(np.isin(baseline, before))
    assert not np.all(np.isin(baseline, after))
