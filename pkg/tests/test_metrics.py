import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from offsetlab.engine import RunConfig, run_inference
from offsetlab.acm import Mode, PolicyConfig, PolicyKind
from offsetlab.errors import ImageTooSmall, ShapeMismatch
from offsetlab.metrics import cost_summary, mse, psnr, psnr_from_mse, ssim

images = arrays(np.float64, (8, 8), elements=st.floats(0, 1))


def test_mse_examples():
    a = np.random.default_rng(0).random((4, 4))
    assert mse(a, a) == 0.0
    assert mse(np.zeros((3, 3)), np.ones((3, 3))) == 1.0
    assert mse([0, 0], [1, 0]) == 0.5
    with pytest.raises(ShapeMismatch):
        mse(np.zeros(2), np.zeros(3))


def test_psnr_examples():
    a = np.random.default_rng(0).random((4, 4))
    assert psnr(a, a, 1.0) == 99.0
    assert psnr_from_mse(1.0, 1.0) == 0.0
    assert psnr_from_mse(0.01, 1.0) == 20.0
    assert psnr(np.zeros((2, 2)), np.full((2, 2), 0.1), 1.0) == pytest.approx(20.0, abs=1e-12)


def test_ssim_examples():
    a = np.random.default_rng(1).random((16, 16))
    assert ssim(a, a) == 1.0
    assert ssim(np.full((8, 8), 0.3), np.full((8, 8), 0.3)) == 1.0
    with pytest.raises(ImageTooSmall):
        ssim(np.zeros((4, 8)), np.zeros((4, 8)))


@pytest.mark.parametrize("mu", [0.0, 0.2, 0.4])
def test_ssim_mean_shift_matches_closed_form(mu):
    a = np.full((16, 16), mu)
    got = ssim(a, a + 0.5, 1.0)
    assert got == pytest.approx(oracles.ssim_constant_pair(mu, mu + 0.5), abs=1e-9)
    assert 0.0 < got < 1.0


@given(images, images)
def test_metric_symmetry_and_ranges(a, b):
    assert mse(a, b) == mse(b, a)
    assert psnr(a, b) == psnr(b, a)
    assert -1.0 <= ssim(a, b) <= 1.0
    assert ssim(a, a) == 1.0


@given(st.floats(1e-9, 10), st.floats(1e-9, 10))
def test_psnr_decreases_with_error(e1, e2):
    lo, hi = sorted((e1, e2))
    if lo < hi:
        assert psnr_from_mse(lo) >= psnr_from_mse(hi)
        if psnr_from_mse(lo) < 99.0:
            assert psnr_from_mse(lo) > psnr_from_mse(hi)


def test_cost_summary_examples():
    full = cost_summary(run_inference(RunConfig(policy=PolicyConfig(kind=PolicyKind.FULL_RECOMPUTE))))
    assert full.eval_fraction == 1.0 and full.mean_lambda == 1.0
    assert full.total_block_evals == full.max_possible == 400

    every = PolicyConfig(kind=PolicyKind.PURE_REUSE, eligible_layers=tuple(range(8)))
    reuse = cost_summary(run_inference(RunConfig(policy=every)))
    assert reuse.total_block_evals == 8  # the warmup step only
    assert reuse.eval_fraction == 8 / 400

    faithful = cost_summary(run_inference(RunConfig(policy=PolicyConfig(gamma=0.5))))
    assert faithful.eval_fraction == 1.0 and faithful.mean_lambda < 1.0
    economic = cost_summary(run_inference(RunConfig(policy=PolicyConfig(gamma=0.5, mode=Mode.ECONOMIC))))
    assert economic.eval_fraction <= faithful.eval_fraction
    assert economic.predicted_fraction == pytest.approx(1 - economic.mean_lambda)
