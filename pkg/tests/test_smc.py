import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from approxshield.env import ChainMdp, ChainMdpSpec, ConveyorWorld, ConveyorWorldSpec
from approxshield.logic import Atom, Not, Trace, bounded_always, eval_path
from approxshield.smc import (
    BoundSide,
    Mode,
    SmcConfig,
    Verdict,
    check,
    decide,
    env_traces,
    estimate_mu,
    exact_mu_oracle,
    induced_chain,
    repetition_harness,
    required_samples,
    threshold,
)

SAFE = Not(Atom("unsafe"))


def chain_table(stay=0.9):
    env = ChainMdp(ChainMdpSpec(stay_safe=[stay, 1.0]))
    t = env.enumerate_transitions()
    return env, t.probs, t.labels


@pytest.mark.parametrize(
    "eps,delta,side,m",
    [(0.09, 0.1, "two-sided", 185), (0.5, 0.1, "two-sided", 6), (0.09, 0.1, "one-sided", 143), (0.1, 0.1, "two-sided", 150)],
)
def test_required_samples_examples(eps, delta, side, m):
    assert required_samples(eps, delta, side) == m


@pytest.mark.parametrize("eps,delta", [(0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 1.0), (-0.2, 0.5)])
def test_required_samples_rejects_out_of_range(eps, delta):
    with pytest.raises(ValueError):
        required_samples(eps, delta)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.001, 0.99))
def test_required_samples_is_smallest_hoeffding_m(eps, delta):
    m = required_samples(eps, delta)
    bound = lambda k: 2 * math.exp(-2 * k * eps * eps)
    assert bound(m) <= delta * (1 + 1e-12)
    assert m == 1 or bound(m - 1) > delta * (1 - 1e-12)
    assert required_samples(eps, delta, BoundSide.ONE_SIDED) <= m


def test_estimate_mu_counting():
    phi = bounded_always(0, Not(Atom("bad")))
    traces = [Trace.of([s]) for s in (set(), set(), {"bad"}, set())]
    assert estimate_mu(iter(traces), phi, 4) == 0.75
    assert estimate_mu(iter([Trace.of([set()])] * 3), phi, 3) == 1.0


def test_estimate_mu_exhausted_source():
    with pytest.raises(ValueError, match="exhausted"):
        estimate_mu(iter([Trace.of([set()])]), bounded_always(0, SAFE), 2)


def test_estimate_mu_deterministic_given_seed():
    env = ChainMdp(ChainMdpSpec())
    phi = bounded_always(2, SAFE)
    a = estimate_mu(env_traces(env, 2, np.random.default_rng(5)), phi, 185)
    b = estimate_mu(env_traces(env, 2, np.random.default_rng(5)), phi, 185)
    assert a == b


@pytest.mark.parametrize(
    "mu,eps,eps_a,mode,verdict",
    [
        (0.995, 0.1, 0.09, Mode.NO_FALSE_POSITIVE, Verdict.SAFE),
        (0.95, 0.1, 0.09, Mode.NO_FALSE_POSITIVE, Verdict.UNSAFE),
        (0.85, 0.1, 0.09, Mode.NO_FALSE_NEGATIVE, Verdict.SAFE),
        (0.99, 0.1, 0.09, Mode.NO_FALSE_POSITIVE, Verdict.SAFE),
        (0.80, 0.1, 0.09, Mode.NO_FALSE_NEGATIVE, Verdict.UNSAFE),
    ],
)
def test_decide_examples(mu, eps, eps_a, mode, verdict):
    assert decide(mu, eps, eps_a, mode) is verdict


def test_thresholds():
    assert threshold(0.1, 0.09) == pytest.approx(0.99)
    assert threshold(0.1, 0.09, "no-false-negative") == pytest.approx(0.81)


def test_unreachable_threshold_warns():
    with pytest.warns(RuntimeWarning):
        assert decide(1.0, 0.05, 0.09) is Verdict.UNSAFE


def test_decide_rejects_bad_estimate():
    with pytest.raises(ValueError):
        decide(1.5, 0.1, 0.09)


def test_oracle_examples():
    _, probs, labels = chain_table()
    assert exact_mu_oracle(probs, labels, SAFE, 2, 0) == pytest.approx(0.81, abs=1e-15)
    assert exact_mu_oracle(probs, labels, SAFE, 2, 1) == 0.0
    assert exact_mu_oracle(probs, labels, SAFE, 0, 0) == 1.0


def test_oracle_rejects_bad_rows():
    with pytest.raises(ValueError):
        exact_mu_oracle(np.array([[0.5, 0.4], [0.0, 1.0]]), [set(), set()], SAFE, 2, 0)


def test_oracle_monotone_in_horizon():
    env = ConveyorWorld(ConveyorWorldSpec(slip_prob=0.1))
    t = env.enumerate_transitions()
    phi = Not(Atom("acid"))
    for s in (0, 8, 20):
        mus = [exact_mu_oracle(t.probs, t.labels, phi, n, s) for n in range(15)]
        assert all(b <= a + 1e-15 for a, b in zip(mus, mus[1:]))
        assert all(0.0 <= m <= 1.0 for m in mus)


def test_oracle_matches_chain_closed_form():
    for stay in (0.0, 0.3, 0.9, 1.0):
        _, probs, labels = chain_table(stay)
        for n in range(6):
            assert exact_mu_oracle(probs, labels, SAFE, n, 0) == pytest.approx(stay**n, abs=1e-15)


def test_induced_chain_uniform():
    probs = np.zeros((2, 2, 2))
    probs[0, 0, 0] = probs[0, 1, 1] = probs[1, :, 1] = 1.0
    np.testing.assert_allclose(induced_chain(probs), [[0.5, 0.5], [0.0, 1.0]])


def test_estimate_equals_enumeration_on_deterministic_system():
    # enumerate every action sequence on a deterministic world; the trace source
    # yields each one once, so the estimate is exactly the satisfying fraction
    env = ConveyorWorld(ConveyorWorldSpec())
    phi = bounded_always(3, Not(Atom("acid")))
    start = env.state_of((4, 1))
    traces, sat = [], 0
    for seq in itertools.product(range(env.num_actions), repeat=3):
        s, labels = start, [env.labels(start)]
        for a in seq:
            if env.is_terminal(s):
                break
            step = env.step(s, a, np.random.default_rng(0))
            s = step.state
            labels.append(step.labels)
        tr = Trace.of(labels)
        traces.append(tr)
        sat += all("acid" not in x for x in labels)
    assert estimate_mu(iter(traces), phi, len(traces)) == sat / len(traces)


def test_estimate_close_to_oracle_on_slippery_world():
    env = ConveyorWorld(ConveyorWorldSpec(slip_prob=0.1))
    t = env.enumerate_transitions()
    phi_state = Not(Atom("acid"))
    mu = exact_mu_oracle(t.probs, t.labels, phi_state, 6, env.state_of((3, 1)))
    est = estimate_mu(
        env_traces(env, 6, np.random.default_rng(0), start=env.state_of((3, 1))),
        bounded_always(6, phi_state),
        20_000,
    )
    assert abs(est - mu) < 4 * math.sqrt(mu * (1 - mu) / 20_000) + 1e-9


def test_hoeffding_coverage_on_chain():
    env, probs, labels = chain_table()
    mu = exact_mu_oracle(probs, labels, SAFE, 2, 0)
    eps, delta, reps = 0.09, 0.1, 200
    m = required_samples(eps, delta)
    log = repetition_harness(
        lambda rng: env_traces(env, 2, rng), bounded_always(2, SAFE), mu, m, 0.1, eps, repetitions=reps
    )
    misses = sum(not r.accurate for r in log)
    assert misses <= delta * reps + 3 * math.sqrt(delta * (1 - delta) * reps)
    assert all(0.0 <= r.mu_hat <= 1.0 for r in log)


def test_repetition_harness_reproducible():
    env = ChainMdp(ChainMdpSpec())
    run = lambda: repetition_harness(
        lambda rng: env_traces(env, 2, rng), bounded_always(2, SAFE), 0.81, 50, 0.1, 0.09, repetitions=5
    )
    assert run() == run()


def test_check_reports_estimate():
    env = ChainMdp(ChainMdpSpec(stay_safe=[1.0, 1.0]))
    est = check(env_traces(env, 5, np.random.default_rng(0)), bounded_always(5, SAFE), SmcConfig(horizon=5))
    assert est.mu_hat == 1.0 and est.m_used == 185 and est.verdict is Verdict.SAFE
    assert est.to_dict() == {"mu_hat": 1.0, "m": 185, "threshold": pytest.approx(0.99), "verdict": "SAFE"}


def test_smc_config_validation():
    with pytest.raises(ValueError):
        SmcConfig(delta=0.0)
    with pytest.raises(ValueError):
        SmcConfig(m=0)
    assert SmcConfig(m=512).samples == 512
    assert SmcConfig(bound_side="one-sided").samples == 143


def test_paper_sample_count_is_not_reproduced():
    # 512 samples at eps=0.09 matches neither bound at delta=0.1
    assert required_samples(0.09, 0.1, "two-sided") != 512
    assert required_samples(0.09, 0.1, "one-sided") != 512


def test_env_traces_stop_at_terminal():
    env = ChainMdp(ChainMdpSpec(stay_safe=[0.0, 1.0]))
    tr = next(env_traces(env, 10, np.random.default_rng(0)))
    assert len(tr) == 2 and tr[1] == {"unsafe"}


def test_warning_free_default_decide():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        decide(0.5, 0.1, 0.09)
