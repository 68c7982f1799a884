import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcn.data import DegradationSpec, Image, make_ilr, save_png
from dmcn.errors import ContractError
from dmcn.metrics import cell, evaluate, evaluate_pairs, psnr, ssim
from dmcn.model import ModelConfig, build_model, identity_init


def brute_ssim(a, b, peak=1.0):
    """Window-by-window SSIM with an explicit 2-D Gaussian weight array."""
    r = np.arange(11) - 5
    g1 = np.exp(-(r**2) / (2 * 1.5**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, w = a.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).random((8, 8, 1))
    assert psnr(a, a) == math.inf


def test_psnr_uniform_offset_8bit():
    a = np.full((16, 16, 1), 100.0)
    assert psnr(a, a + 16, peak=255) == pytest.approx(10 * math.log10(255**2 / 256), abs=1e-12)


def test_psnr_peak_halving():
    rng = np.random.default_rng(0)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert psnr(a, b, 1.0) - psnr(a, b, 0.5) == pytest.approx(20 * math.log10(2), abs=1e-12)
    assert 20 * math.log10(2) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identical_is_exactly_one():
    a = np.random.default_rng(0).random((32, 40))
    assert ssim(a, a) == 1.0


def test_ssim_anticorrelated_is_negative():
    rng = np.random.default_rng(1)
    a = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((24, 30))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-6


def test_ssim_rejects_small_and_colour():
    with pytest.raises(ContractError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))
    with pytest.raises(ContractError):
        ssim(np.zeros((20, 20, 3)), np.zeros((20, 20, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), noise=st.floats(0.0, 1.0))
def test_metric_properties(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    b = np.clip(a + noise * rng.standard_normal(a.shape), 0, 1)
    assert psnr(a, b) == psnr(b, a)
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1.0 <= s <= 1.0
    assert ssim(b, b) == 1.0


def test_cell_format():
    assert cell(34.1912, 0.89414) == "34.19/0.8941"
    assert cell(math.inf, 1.0) == "inf/1.0000"


def _pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        hr = Image(rng.random((96, 96, 1)))
        ilr, hr_c = make_ilr(hr, DegradationSpec(2))
        out.append((f"im{i}", ilr, hr_c))
    return out


def test_identity_model_rows_equal_bicubic():
    model = identity_init(build_model(ModelConfig(channels=4, blocks_per_stage=1)))
    result = evaluate_pairs(model, _pairs(3), 2)
    assert result.methods() == ["Bicubic", "DMCN"]
    assert result.mean_psnr("DMCN") == result.mean_psnr("Bicubic")
    assert result.mean_ssim("DMCN") == result.mean_ssim("Bicubic")


def test_single_image_means_equal_row():
    model = build_model(ModelConfig(channels=4, blocks_per_stage=1))
    result = evaluate_pairs(model, _pairs(1), 2)
    row = next(r for r in result.rows if r.method == "DMCN")
    assert result.mean_psnr("DMCN") == row.psnr and result.mean_ssim("DMCN") == row.ssim


def test_means_are_order_independent():
    model = build_model(ModelConfig(channels=4, blocks_per_stage=1))
    pairs = _pairs(4, seed=3)
    a = evaluate_pairs(model, pairs, 2)
    b = evaluate_pairs(model, list(reversed(pairs)), 2)
    for m in ("Bicubic", "DMCN"):
        assert a.mean_psnr(m) == pytest.approx(b.mean_psnr(m), abs=1e-12)
        assert a.mean_ssim(m) == pytest.approx(b.mean_ssim(m), abs=1e-12)


def test_evaluate_files_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    good = tmp_path / "good.png"
    small = tmp_path / "small.png"
    save_png(good, Image(rng.random((100, 100, 3))))
    save_png(small, Image(rng.random((40, 40, 1))))
    model = identity_init(build_model(ModelConfig(channels=4, blocks_per_stage=1)))
    result = evaluate(model, [good, small], DegradationSpec(2), dataset="toy")
    assert [name for name, _ in result.errors] == ["small.png"]
    assert len(result.rows) == 2
    text = result.table()
    assert "toy" in text and "x2" in text and "PSNR/SSIM" in text
    assert result.summary_csv().splitlines()[0] == "dataset,scale,method,psnr,ssim"


def test_evaluate_empty():
    model = build_model(ModelConfig(channels=4, blocks_per_stage=1))
    with pytest.raises(ContractError):
        evaluate(model, [], DegradationSpec(2))
