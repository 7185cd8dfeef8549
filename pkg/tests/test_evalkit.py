import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from preemptkit.attacks import AttackBudget
from preemptkit.diffnet import ModelParams, Network, NetworkDef, dense, desk_cnn, init_params
from preemptkit.errors import ConfigError, FormatError, ShapeError
from preemptkit.evalkit import (
    EvalReport, accuracy, clean_robust_eval, netpbm_bytes, perturbation_grayscale, read_netpbm,
    schedule_ablation, ssim, to_u8, write_netpbm,
)
from preemptkit.fore_back import DefenseConfig, batch_defend

EPS = 8 / 255


def test_accuracy():
    net = Network(NetworkDef((dense(2, 2),), (2,), 2), ModelParams([np.eye(2), np.zeros(2)]))
    x = np.random.default_rng(0).uniform(size=(50, 2))
    y = net.predict(x)
    assert accuracy(net, x, y) == 1.0
    y_half = y.copy()
    y_half[:20] = 1 - y_half[:20]
    assert accuracy(net, x, y_half) == pytest.approx(0.6)
    assert accuracy(net, x, 1 - y_half) == pytest.approx(1 - 0.6)
    with pytest.raises(ValueError):
        accuracy(net, x[:0], y[:0])
    with pytest.raises(ShapeError):
        accuracy(net, x, y[:3])


# -- SSIM ----------------------------------------------------------------------


def test_ssim_identity_and_extremes():
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert ssim(x, x) == 1.0
    value = ssim(np.zeros((1, 16, 16)), np.ones((1, 16, 16)))
    assert value == pytest.approx(1e-4 / (1 + 1e-4))
    with pytest.raises(ShapeError):
        ssim(x, x[:1])


@pytest.mark.parametrize("shape", [(1, 16, 16), (3, 32, 20), (1, 11, 11)])
def test_ssim_matches_scikit_image(shape):
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(1)
    a = rng.uniform(size=shape)
    b = np.clip(a + rng.normal(0, 0.1, size=shape), 0, 1)
    ref = skm.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0, channel_axis=0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_ssim_small_images_fall_back_to_global_statistics():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(1, 8, 8)), rng.uniform(size=(1, 8, 8))
    value, fallback = ssim(a, b, return_fallback=True)
    assert fallback
    ma, mb = a.mean(), b.mean()
    va, vb, cov = a.var(), b.var(), np.mean((a - ma) * (b - mb))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    assert value == pytest.approx(expected, rel=1e-12)
    assert not ssim(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)), return_fallback=True)[1]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (1, 12, 12), elements=st.floats(0, 1)), arrays(np.float64, (1, 12, 12),
                                                                           elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    v = ssim(a, b)
    assert -1 - 1e-12 <= v <= 1 + 1e-12
    assert v == pytest.approx(ssim(b, a), abs=1e-12)


# -- perturbation map ----------------------------------------------------------


@pytest.mark.parametrize("channels", [1, 3])
def test_grayscale_endpoints_are_exact(channels):
    for value, expected in ((-EPS, 0.0), (0.0, 0.5), (EPS, 1.0)):
        out = perturbation_grayscale(np.full((channels, 4, 4), value), EPS)
        assert out.shape == (1, 4, 4)
        assert np.all(out == expected)


def test_grayscale_uses_luma_weights_and_is_affine():
    d = np.zeros((3, 1, 1))
    d[0] = EPS  # red at +eps, others at 0
    gray = perturbation_grayscale(d, EPS)[0, 0, 0]
    assert gray == pytest.approx(0.299 * 1.0 + 0.587 * 0.5 + 0.114 * 0.5)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-EPS, EPS, (2, 3, 4, 4))
    mid = perturbation_grayscale((a + b) / 2, EPS)
    avg = (perturbation_grayscale(a, EPS) + perturbation_grayscale(b, EPS)) / 2
    np.testing.assert_allclose(mid, avg, atol=1e-12)


def test_grayscale_errors():
    with pytest.raises(ConfigError):
        perturbation_grayscale(np.zeros((1, 2, 2)), 0.0)
    with pytest.raises(ConfigError):
        perturbation_grayscale(np.full((1, 2, 2), 0.1), EPS)
    with pytest.raises(ShapeError):
        perturbation_grayscale(np.zeros((2, 2, 2)), EPS)


# -- netpbm --------------------------------------------------------------------


def test_round_half_up():
    np.testing.assert_array_equal(to_u8(np.array([0.0, 0.5 / 255, 1.5 / 255, 0.5, 1.0, 1.2, -0.1])),
                                  [0, 1, 2, 128, 255, 255, 0])


def test_pgm_bytes_by_hand():
    img = np.array([[[0.0, 1.0], [0.5, 0.2]]])
    assert netpbm_bytes(img, "hello") == b"P5\n# hello\n2 2\n255\n" + bytes([0, 255, 128, 51])


def test_ppm_interleaves_channels():
    img = np.zeros((3, 1, 2))
    img[0, 0, 0] = 1.0
    img[2, 0, 1] = 1.0
    assert netpbm_bytes(img) == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])


@pytest.mark.parametrize("channels", [1, 3])
def test_netpbm_round_trip_and_pillow_agrees(tmp_path, channels):
    Image = pytest.importorskip("PIL.Image")
    img = np.random.default_rng(0).uniform(size=(channels, 5, 7))
    path = tmp_path / ("a.pgm" if channels == 1 else "a.ppm")
    write_netpbm(path, img, "config abc")
    back, comments = read_netpbm(path)
    np.testing.assert_array_equal(back, to_u8(img))
    assert comments == ["config abc"]
    pil = np.asarray(Image.open(path))
    pil = pil[None] if channels == 1 else pil.transpose(2, 0, 1)
    np.testing.assert_array_equal(pil, to_u8(img))


def test_netpbm_errors(tmp_path):
    with pytest.raises(ShapeError):
        netpbm_bytes(np.zeros((2, 3, 3)))
    (tmp_path / "bad").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_netpbm(tmp_path / "bad")


# -- reports -----------------------------------------------------------------------


def test_report_dict_and_table():
    rep = EvalReport(clean={"original": 0.9, "defended": 0.91}, robust={"original": 0.5, "defended": 0.8},
                     seconds_per_sample=0.01, n=10)
    assert "seconds_per_sample" not in rep.to_dict(timing=False)
    assert rep.to_dict()["seconds_per_sample"] == 0.01
    table = rep.table()
    assert "original" in table and "90.0" in table and "80.0" in table
    assert "defense time" not in rep.table(timing=False)
    assert rep.reference_full_scale["clean"] == 0.953


@pytest.fixture(scope="module")
def tiny():
    nd = desk_cnn((1, 8, 8), 3, 2)
    fc, fb, fv = (Network(nd, init_params(nd, s)) for s in (1, 2, 3))
    x = np.random.default_rng(0).uniform(size=(6, 1, 8, 8)).astype(np.float32)
    y = fv.predict(x)
    cfg = DefenseConfig(n_samples=2)
    return fc, fb, fv, x, y, cfg, batch_defend(fc, fb, x, cfg)


def test_zero_strength_attack_gives_robust_equal_clean(tiny):
    fc, fb, fv, x, y, cfg, res = tiny
    rep = clean_robust_eval(fv, x, y, res, None, f_b=fb, defense_fingerprint=cfg.fingerprint())
    assert rep.robust == rep.clean and rep.clean["original"] == 1.0
    assert 0 <= rep.ssim_min <= rep.ssim_mean <= 1 and rep.ssim_fallback


def test_eval_guards(tiny):
    fc, fb, fv, x, y, cfg, res = tiny
    with pytest.raises(ConfigError, match="distinct"):
        clean_robust_eval(fb, x, y, res, None, f_b=fb)
    with pytest.raises(ConfigError, match="different defense"):
        clean_robust_eval(fv, x, y, res, None, defense_fingerprint=cfg.replace(seed=5).fingerprint())
    with pytest.raises(ShapeError):
        clean_robust_eval(fv, x, y, np.zeros((6, 1, 4, 4)), None)


def test_eval_with_attack_records_budget(tiny):
    fc, fb, fv, x, y, cfg, res = tiny
    b = AttackBudget.default(seed=3, iters=2, restarts=2)
    rep = clean_robust_eval(fv, x, y, res, b, f_b=fb, defense_fingerprint=cfg.fingerprint())
    assert rep.attack["restarts"] == 2 and rep.seeds["attack_seed"] == 3
    assert all(0 <= v <= 1 for v in list(rep.clean.values()) + list(rep.robust.values()))
    again = clean_robust_eval(fv, x, y, res, b, f_b=fb, defense_fingerprint=cfg.fingerprint())
    assert again.to_json(timing=False) == rep.to_json(timing=False)


def test_schedule_ablation_rows(tiny):
    fc, fb, fv, x, y, cfg, _ = tiny
    rows = schedule_ablation(fc, fb, fv, x, y, cfg, AttackBudget.default(iters=2, restarts=1))
    assert list(rows) == ["F1-B2", "F0-B3", "F3-B0", "F2-B1", "Alternate"]
    for r in rows.values():
        assert r["gap"] == pytest.approx(r["white_box"] - r["transfer"])
