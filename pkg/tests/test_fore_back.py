import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_model, linear_binary
from preemptkit.diffnet import ModelParams, Network, NetworkDef, dense, desk_cnn, flatten, init_params
from preemptkit.errors import ConfigError
from preemptkit.fore_back import (
    DefenseConfig, average_perturbations, backward_step, batch_defend, fast_preemption,
    forward_step, label_input, sample_seed, stack,
)

EPS = 8 / 255
SHAPE = (1, 4, 4)


def det(**kw):
    """Deterministic single-sample mode used by the closed-form oracles."""
    base = dict(n_samples=1, random_init=False, relaxed=True)
    return DefenseConfig(**{**base, **kw})


def interior(seed=0, margin=2 * EPS, shape=SHAPE):
    return np.random.default_rng(seed).uniform(margin, 1 - margin, size=shape).astype(np.float32)


def logit_model(logits):
    k = len(logits)
    nd = NetworkDef((flatten(), dense(16, k)), SHAPE, k)
    return Network(nd, ModelParams([np.zeros((k, 16), np.float32), np.asarray(logits, np.float32)]))


# -- config --------------------------------------------------------------------


def test_defaults_match_the_reference_settings():
    cfg = DefenseConfig()
    assert (cfg.eps, cfg.eta, cfg.t_forward, cfg.t_backward, cfg.n_samples) == (8 / 255, 0.7, 1, 2, 20)
    assert cfg.steps() == "FBB"
    assert DefenseConfig(schedule="alternate").steps() == "FBF"
    assert cfg.pgd_alpha == pytest.approx(EPS / 4)


def test_saturation_rule_is_enforced_with_its_formula_in_the_message():
    with pytest.raises(ConfigError, match=r"eta \* \(t_forward \+ t_backward\) > 1"):
        DefenseConfig(eta=0.3)
    with pytest.raises(ConfigError):
        DefenseConfig(eta=0.5, t_forward=1, t_backward=1)  # exactly 1 is not enough
    assert DefenseConfig(eta=0.3, relaxed=True).eta == 0.3


@pytest.mark.parametrize("bad", [dict(eps=0), dict(eta=0), dict(t_forward=-1), dict(t_forward=0, t_backward=0),
                                 dict(n_samples=0), dict(optimizer="adam"), dict(schedule="random")])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        DefenseConfig(**{"relaxed": True, **bad})


def test_config_json_and_fingerprint():
    cfg = DefenseConfig(seed=3)
    again = DefenseConfig.from_json(cfg.canonical_json())
    assert again == cfg and again.fingerprint() == cfg.fingerprint()
    assert len(cfg.fingerprint()) == 64
    assert cfg.replace(seed=4).fingerprint() != cfg.fingerprint()
    with pytest.raises(ConfigError, match="unknown"):
        DefenseConfig.from_dict({**json.loads(cfg.canonical_json()), "gamma": 1})


# -- labelling -----------------------------------------------------------------


def test_label_input_argmax_and_ties():
    x = np.zeros(SHAPE, np.float32)
    assert label_input(logit_model([0.9, 0.1]), x) == 0
    assert label_input(logit_model([0.1, 0.9]), x) == 1
    assert label_input(logit_model([0.5, 0.5, 0.5]), x) == 0


# -- single steps on the linear oracle ---------------------------------------


def test_zero_gradient_steps_leave_the_iterate():
    x = interior()
    cfg = det()
    np.testing.assert_array_equal(forward_step(constant_model(), 1, x, x, cfg), x)
    np.testing.assert_array_equal(backward_step(constant_model(), 1, x, x, cfg), x)


@pytest.mark.parametrize("step", [forward_step, backward_step])
def test_linear_step_closed_form(step):
    net, s = linear_binary()
    x = interior()
    out = step(net, 0, x, x, det(eta=0.7))
    np.testing.assert_allclose(out, x - 0.7 * EPS * s, atol=1e-6)


def test_forward_step_decreases_linear_loss():
    net, _ = linear_binary()
    x = interior(1)
    cfg = det(eta=0.4)
    x_t = x
    losses = [float(net.loss(x_t, 0))]
    for _ in range(4):
        x_t = forward_step(net, 0, x_t, x, cfg)
        losses.append(float(net.loss(x_t, 0)))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_forward_step_on_a_partly_moved_iterate():
    # x_t = x - a*eps*s: the inner FGSM sample is clipped at the ball, so the move is eta*(1-a)
    net, s = linear_binary()
    x = interior()
    a = 0.4
    x_t = (x - a * EPS * s).astype(np.float32)
    out = forward_step(net, 0, x_t, x, det(eta=0.5))
    np.testing.assert_allclose(out, x - (a + 0.5 * (1 - a)) * EPS * s, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(["fgsm", "pgd"]), st.booleans())
def test_steps_stay_in_budget(seed, optimizer, ascend):
    nd = desk_cnn((1, 8, 8), 3, 2)
    net = Network(nd, init_params(nd, seed))
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 8, 8)).astype(np.float32)
    x_t = np.clip(x + rng.uniform(-EPS, EPS, size=x.shape), 0, 1).astype(np.float32)
    cfg = DefenseConfig(n_samples=3, optimizer=optimizer, pgd_iters=3, eta=float(rng.uniform(0.1, 2)),
                        relaxed=True)
    out = (backward_step if ascend else forward_step)(net, 1, x_t, x, cfg, rng)
    assert np.max(np.abs(out - x)) <= EPS + 1e-6
    assert out.min() >= 0 and out.max() <= 1


# -- averaging -----------------------------------------------------------------


def test_average_perturbations_basic():
    base = np.full(SHAPE, 0.5, np.float32)
    d = np.random.default_rng(0).uniform(-EPS, EPS, size=SHAPE).astype(np.float32)
    np.testing.assert_allclose(average_perturbations([base + d, base + d], base), d, atol=1e-7)
    # dyadic values keep the cancellation exact
    d2 = np.full(SHAPE, 0.03125, np.float32)
    np.testing.assert_array_equal(average_perturbations([base + d2, base - d2], base), 0)
    assert np.max(np.abs(average_perturbations([base + d, base - d], base))) <= 1e-7
    with pytest.raises(ValueError):
        average_perturbations(np.zeros((0,) + SHAPE), base)
    with pytest.raises(ValueError):
        average_perturbations([base], base[0])


def test_twenty_seeded_samples_on_the_linear_model():
    # oracle: each inner sample moves coordinate i to x - eps*s unless the random
    # start u had u*s > 0, in which case it lands at x + u - eps*s
    net, s = linear_binary()
    x = interior()
    cfg = DefenseConfig(seed=5)
    u = np.random.default_rng(5).uniform(-EPS, EPS, size=(20,) + SHAPE).astype(np.float32)
    moved = np.where(u * s > 0, u - EPS * s, -EPS * s)
    expected = moved.mean(axis=0)
    got = forward_step(net, 0, x, x, cfg.replace(eta=1.0), np.random.default_rng(5)) - x
    np.testing.assert_allclose(got, expected, atol=1e-6)
    # E[delta] = -0.75*eps*s; one draw has std sqrt(2/3 - 9/16)*eps ~ 0.323*eps
    assert np.max(np.abs(got + 0.75 * EPS * s)) <= 4 * 0.323 * EPS / np.sqrt(20)


# -- full cascade --------------------------------------------------------------


def test_defaults_saturate_the_ball_on_the_linear_model():
    net, s = linear_binary()
    x = np.random.default_rng(3).uniform(size=SHAPE).astype(np.float32)
    res = fast_preemption(net, net, x, DefenseConfig(random_init=False, n_samples=1))
    assert res.label_used == label_input(net, x)
    # the gradient sign for label 1 is -s
    s = s if res.label_used == 0 else -s
    np.testing.assert_allclose(res.x_r, np.clip(x - EPS * s, 0, 1), atol=1e-6)


@pytest.mark.parametrize("tf,tb,eta", [(1, 2, 0.7), (1, 2, 0.2), (0, 3, 0.3), (1, 0, 0.6), (0, 1, 0.45),
                                       (1, 4, 0.15), (0, 2, 0.9)])
def test_closed_form_for_at_most_one_forward_step(tf, tb, eta):
    net, s = linear_binary()
    x = interior(tf * 10 + tb)
    res = fast_preemption(net, net, x, det(eta=eta, t_forward=tf, t_backward=tb), label=0)
    expected = np.clip(x - min(eta * (tf + tb), 1) * EPS * s, 0, 1)
    np.testing.assert_allclose(res.x_r, expected, atol=1e-6)


def test_constant_model_in_deterministic_mode_is_a_no_op():
    x = interior()
    res = fast_preemption(constant_model(), constant_model(), x, det(eta=0.7, t_backward=2))
    np.testing.assert_array_equal(res.x_r, x)
    np.testing.assert_array_equal(res.delta, 0)


def test_pure_schedules_reduce_to_repeated_steps():
    nd = desk_cnn((1, 8, 8), 3, 2)
    fb = Network(nd, init_params(nd, 1))
    x = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    for tf, tb, step in ((0, 3, backward_step), (3, 0, forward_step)):
        cfg = DefenseConfig(t_forward=tf, t_backward=tb, n_samples=4, seed=2)
        rng = np.random.default_rng(2)
        x_t = x
        for _ in range(3):
            x_t = step(fb, 1, x_t, x, cfg, rng)
        np.testing.assert_array_equal(fast_preemption(fb, fb, x, cfg, label=1).x_r, x_t)


def test_fast_preemption_is_deterministic_and_in_budget():
    nd = desk_cnn((1, 8, 8), 3, 2)
    fc, fb = Network(nd, init_params(nd, 1)), Network(nd, init_params(nd, 2))
    x = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    cfg = DefenseConfig(seed=9)
    a, b = fast_preemption(fc, fb, x, cfg), fast_preemption(fc, fb, x, cfg)
    assert a.x_r.tobytes() == b.x_r.tobytes() and a.fingerprint == cfg.fingerprint()
    assert np.max(np.abs(a.delta)) <= EPS + 1e-6 and 0 <= a.x_r.min() and a.x_r.max() <= 1
    assert a.seconds >= 0
    c = fast_preemption(fc, fb, x, cfg.replace(optimizer="pgd", pgd_iters=3))
    assert np.max(np.abs(c.delta)) <= EPS + 1e-6


# -- batches ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def small():
    nd = desk_cnn((1, 8, 8), 3, 2)
    fc, fb = Network(nd, init_params(nd, 1)), Network(nd, init_params(nd, 2))
    x = np.random.default_rng(0).uniform(size=(6, 1, 8, 8)).astype(np.float32)
    return fc, fb, x, DefenseConfig(n_samples=4, seed=21)


def test_singleton_batch_equals_fast_preemption(small):
    fc, fb, x, cfg = small
    one = batch_defend(fc, fb, x[:1], cfg)[0]
    np.testing.assert_array_equal(one.x_r, fast_preemption(fc, fb, x[0], cfg, seed=sample_seed(cfg.seed, 0)).x_r)
    assert sample_seed(cfg.seed, 0) == cfg.seed


def test_permuted_batch_gives_permuted_outputs(small):
    fc, fb, x, cfg = small
    base = stack(batch_defend(fc, fb, x, cfg))
    perm = np.array([3, 0, 5, 1, 4, 2])
    shuffled = stack(batch_defend(fc, fb, x[perm], cfg, ids=perm))
    np.testing.assert_array_equal(shuffled, base[perm])


def test_worker_pool_matches_serial(small, monkeypatch):
    fc, fb, x, cfg = small
    serial = stack(batch_defend(fc, fb, x, cfg, workers=1))
    monkeypatch.setenv("PREEMPTKIT_THREADS", "3")
    np.testing.assert_array_equal(stack(batch_defend(fc, fb, x, cfg)), serial)


def test_batch_label_override_and_empty(small):
    fc, fb, x, cfg = small
    res = batch_defend(fc, fb, x[:3], cfg, labels=[2, 2, 2])
    assert [r.label_used for r in res] == [2, 2, 2]
    with pytest.raises(ValueError):
        batch_defend(fc, fb, x[:0], cfg)
