import numpy as np
import pytest

from bodysdf import diffcore as dc
from bodysdf.diffcore import Tape
from bodysdf.encoding import EncodingConfig, alpha_schedule, band_weights, encode, encode_dual


CFG = EncodingConfig(num_frequencies=6, ramp_fraction=0.4)


def test_output_length():
    for L in (0, 1, 4, 6):
        cfg = EncodingConfig(num_frequencies=L)
        out = encode(np.zeros((5, 3)), cfg, alpha=L)
        assert out.shape == (5, 3 + 6 * L)
        assert cfg.output_dim == 3 + 6 * L


def test_alpha_zero_only_raw_coords():
    x = np.random.default_rng(0).uniform(-1, 1, (4, 3))
    out = encode(x, CFG, alpha=0.0)
    np.testing.assert_array_equal(out[:, :3], x)
    # sin bands vanish; cos bands are weighted by 0 too
    np.testing.assert_array_equal(out[:, 3:], np.zeros((4, 36)))


def test_alpha_full_all_bands_open():
    w = band_weights(CFG, alpha=6.0)
    np.testing.assert_array_equal(w, np.ones(6))


def test_half_open_band_weight():
    # exact 0.5 in exact arithmetic; fp cos(pi/2) is ~6e-17 so allow one ulp
    w = band_weights(CFG, alpha=2.5)
    assert w[2] == pytest.approx(0.5, abs=1e-16)
    np.testing.assert_array_equal(w[:2], [1.0, 1.0])
    np.testing.assert_array_equal(w[3:], [0.0, 0.0, 0.0])


def test_continuity_in_alpha():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (8, 3))
    eps = 1e-6
    for alpha in (0.3, 1.0, 2.7, 5.5):
        d = np.linalg.norm(encode(x, CFG, alpha + eps) - encode(x, CFG, alpha))
        assert d <= 50.0 * eps


def test_schedule_endpoints_and_midpoint():
    assert alpha_schedule(0, 1000, CFG) == 0.0
    assert alpha_schedule(400, 1000, CFG) == pytest.approx(6.0)
    assert alpha_schedule(1000, 1000, CFG) == 6.0
    # L=6, ramp 0.4, step = 0.2 * total -> alpha = 3
    assert alpha_schedule(200, 1000, CFG) == pytest.approx(3.0)


def test_schedule_monotone():
    vals = [alpha_schedule(s, 500, CFG) for s in range(0, 501, 7)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_schedule_rejects_zero_total():
    with pytest.raises(ValueError):
        alpha_schedule(0, 0, CFG)


def test_dual_encode_matches_numpy_and_fd_gradient():
    rng = np.random.default_rng(2)
    x = rng.uniform(-0.9, 0.9, (6, 3))
    alpha = 3.3
    tape = Tape()
    out_dual = encode_dual(dc.Dual.seed(tape, x), CFG, alpha)
    np.testing.assert_allclose(out_dual.val.data, encode(x, CFG, alpha), atol=1e-15)
    # spatial gradient of each output channel vs central differences
    eps = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        fd = (encode(x + e, CFG, alpha) - encode(x - e, CFG, alpha)) / (2 * eps)
        np.testing.assert_allclose(out_dual.tan.data[i], fd, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        EncodingConfig(num_frequencies=-1)
    with pytest.raises(ValueError):
        EncodingConfig(ramp_fraction=0.0)
