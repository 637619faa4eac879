import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trinet import autodiff as ad
from trinet.autodiff import Tensor
from trinet.objectives import (EmptySelectionWarning, LossConfig, loss_regre, loss_regul, loss_struc,
                               total_loss)

from oracles import max_fd_error


def t(x):
    return Tensor(np.asarray(x, dtype=float).reshape(1, 1, -1))


def test_struc_zero_at_equality():
    z = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert loss_struc(Tensor(z), Tensor(z), positions="all_frames").item() == 0.0


def test_struc_hand_value():
    assert loss_struc(t([1, 1, 1, 1]), t([0, 0, 0, 0]), positions="all_frames").item() == 2.0


def test_struc_scales_with_sqrt_dim():
    e = 0.3
    small = loss_struc(Tensor(np.full((1, 2, 4), e)), Tensor(np.zeros((1, 2, 4))), positions="all_frames")
    large = loss_struc(Tensor(np.full((1, 2, 8), e)), Tensor(np.zeros((1, 2, 8))), positions="all_frames")
    assert large.item() / small.item() == pytest.approx(math.sqrt(2), abs=1e-12)


def test_struc_empty_selection_warns():
    z = Tensor(np.ones((1, 2, 3)))
    with pytest.warns(EmptySelectionWarning):
        assert loss_struc(z, z * 2.0, np.zeros((1, 2), dtype=bool)).item() == 0.0


def test_struc_zero_dim_rejected():
    with pytest.raises(ad.ShapeError):
        loss_struc(Tensor(np.ones((1, 2, 0))), Tensor(np.ones((1, 2, 0))), positions="all_frames")


def test_regre_hand_value():
    assert loss_regre(t([1, 0, 0, 0]), t([0, 0, 0, 0]), positions="all_frames").item() == 0.5
    y = np.random.default_rng(1).normal(size=(2, 3, 4))
    assert loss_regre(Tensor(y), Tensor(y), positions="all_frames").item() == 0.0


def test_regre_shift_invariant():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    base = loss_regre(Tensor(a), Tensor(b), positions="all_frames").item()
    shifted = loss_regre(Tensor(a + 5.0), Tensor(b + 5.0), positions="all_frames").item()
    assert shifted == pytest.approx(base, rel=1e-12)


def test_regul_uniform_logits_entropy():
    y = np.zeros((1, 3, 4))
    got = loss_regul(Tensor(y), Tensor(y), positions="all_frames").item()
    assert got == pytest.approx(3 * math.log(4) / 2, abs=1e-12)


def test_regul_identical_logits_equals_scaled_target_entropy():
    y = np.random.default_rng(3).normal(size=(2, 5, 6))
    p = np.exp(y) / np.exp(y).sum(-1, keepdims=True)
    entropy = -(p * np.log(p)).sum()
    got = loss_regul(Tensor(y), Tensor(y), positions="all_frames").item()
    assert got == pytest.approx(entropy / math.sqrt(6), abs=1e-10)


def test_regul_one_hot_limit():
    y = np.array([[[60.0, -60.0, -60.0], [-60.0, -60.0, 60.0]]])
    assert loss_regul(Tensor(y), Tensor(y), positions="all_frames").item() < 1e-40


def test_regul_temperature_validation():
    y = Tensor(np.zeros((1, 1, 3)))
    with pytest.raises(ValueError):
        loss_regul(y, y, positions="all_frames", temperature=0.0)


def test_regul_temperature_sharpens_target():
    rng = np.random.default_rng(4)
    pred, target = Tensor(rng.normal(size=(1, 4, 5))), rng.normal(size=(1, 4, 5))
    hot = loss_regul(pred, Tensor(target), positions="all_frames", temperature=0.5).item()
    manual = loss_regul(pred, Tensor(target * 2.0), positions="all_frames").item()
    assert hot == pytest.approx(manual, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=4, max_size=4))
def test_regul_gibbs_inequality(logits):
    q = np.exp(np.array(logits) - max(logits))
    q /= q.sum()
    own_entropy = -(q * np.log(q)).sum()
    ce = loss_regul(t(logits), t([0.0] * 4), positions="all_frames").item() * 2.0
    assert ce >= math.log(4) - 1e-12
    assert ce >= own_entropy - 1e-12


@pytest.mark.parametrize("fn", [loss_struc, loss_regre, loss_regul])
def test_masked_only_ignores_unmasked_frames(fn):
    rng = np.random.default_rng(5)
    pred, target = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    mask = np.array([[True, False, False, True], [False, True, False, False]])
    base = fn(Tensor(pred), Tensor(target), mask).item()
    noisy = pred.copy()
    noisy[~mask] += rng.normal(size=noisy[~mask].shape) * 100
    assert fn(Tensor(noisy), Tensor(target), mask).item() == base


@pytest.mark.parametrize("fn", [loss_struc, loss_regre, loss_regul])
@pytest.mark.parametrize("positions", ["masked_only", "all_frames"])
def test_loss_gradients_match_finite_differences(fn, positions):
    rng = np.random.default_rng(6)
    pred, target = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    mask = np.array([[True, False, True], [False, True, True]])
    assert max_fd_error(lambda p: fn(p, Tensor(target), mask, positions), [pred]) < 1e-4


def test_losses_nonnegative():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5)) * 3
        for fn in (loss_struc, loss_regre, loss_regul):
            assert fn(Tensor(a), Tensor(b), positions="all_frames").item() >= 0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(mode="vicreg")
    with pytest.raises(ValueError):
        LossConfig(loss_positions="some")
    with pytest.raises(ValueError):
        LossConfig(regul_temperature=-1)


def _inputs(seed=8):
    rng = np.random.default_rng(seed)
    z, zs = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    y, yr = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
    mask = np.array([[True, True, False], [False, True, False]])
    return z, zs, y, yr, mask


def test_total_baseline_is_struc_only():
    z, zs, y, yr, mask = _inputs()
    total, rep = total_loss(Tensor(z), Tensor(y), Tensor(zs), None, mask, LossConfig(mode="data2vec_baseline"))
    assert rep.l_total == rep.l_struc == total.item()
    assert rep.l_regul is None and rep.l_regre is None
    assert rep.masked_frame_count == 3


def test_total_trinet_sums_hand_computed_components():
    z, zs, y, yr, mask = _inputs()
    sq = ((z - zs)[mask] ** 2).sum() / 2.0
    logq = y - np.log(np.exp(y).sum(-1, keepdims=True))
    p = np.exp(yr) / np.exp(yr).sum(-1, keepdims=True)
    ce = -(p * logq)[mask].sum() / math.sqrt(5)
    _, rep = total_loss(Tensor(z), Tensor(y), Tensor(zs), Tensor(yr), mask, LossConfig())
    assert rep.l_struc == pytest.approx(sq, abs=1e-12)
    assert rep.l_regul == pytest.approx(ce, abs=1e-12)
    assert rep.l_total == pytest.approx(sq + ce, abs=1e-12)
    assert rep.l_regre is None


def test_total_ablated_regre_uses_regression():
    z, zs, y, yr, mask = _inputs()
    _, rep = total_loss(Tensor(z), Tensor(y), Tensor(zs), Tensor(yr), mask, LossConfig(mode="trinet_ablated_regre"))
    assert rep.l_regul is None
    assert rep.l_regre == pytest.approx(((y - yr)[mask] ** 2).sum() / math.sqrt(5), abs=1e-12)
    assert rep.l_total == rep.l_struc + rep.l_regre


def test_total_gradient_is_sum_of_component_gradients():
    z, zs, y, yr, mask = _inputs()

    def grads(build):
        zt, yt = Tensor(z, requires_grad=True), Tensor(y, requires_grad=True)
        ad.zero_grad([zt, yt])
        ad.backward(build(zt, yt))
        return zt.grad, yt.grad

    cfg = LossConfig()
    gz, gy = grads(lambda a, b: total_loss(a, b, Tensor(zs), Tensor(yr), mask, cfg)[0])
    sz, _ = grads(lambda a, b: loss_struc(a, Tensor(zs), mask) + b.sum() * 0.0)
    _, ry = grads(lambda a, b: loss_regul(b, Tensor(yr), mask) + a.sum() * 0.0)
    np.testing.assert_allclose(gz, sz, atol=1e-12)
    np.testing.assert_allclose(gy, ry, atol=1e-12)
    fd = max_fd_error(lambda a, b: total_loss(a, b, Tensor(zs), Tensor(yr), mask, cfg)[0], [z, y])
    assert fd < 1e-4


def test_total_flags_empty_selection():
    z, zs, y, yr, _ = _inputs()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, rep = total_loss(Tensor(z), Tensor(y), Tensor(zs), Tensor(yr), np.zeros((2, 3), dtype=bool),
                            LossConfig())
    assert rep.empty_selection and rep.l_total == 0.0
    assert any(issubclass(w.category, EmptySelectionWarning) for w in caught)
