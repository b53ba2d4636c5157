import numpy as np
import pytest

from paramxfer import autodiff as ad
from paramxfer.autodiff import Tensor, grad_check
from paramxfer.baselines import copy_share_baseline, kd_loss
from paramxfer.codec import ContractError
from paramxfer.zoo import build_model


def test_kd_identical_logits_pure_distillation_is_zero(rng):
    z = rng.standard_normal((6, 5))
    loss = kd_loss(Tensor(z), z, 4.0, 1.0, np.zeros(6, int))
    assert abs(loss.item()) <= 1e-12


def test_kd_rejects_bad_temperature(rng):
    z = Tensor(rng.standard_normal((2, 3)))
    for t in (0.0, -1.0):
        with pytest.raises(ContractError):
            kd_loss(z, z.data, t, 0.5, np.zeros(2, int))
    with pytest.raises(ContractError):
        kd_loss(z, np.zeros((2, 4)), 2.0, 0.5, np.zeros(2, int))


def test_kd_is_nonnegative(rng):
    for _ in range(50):
        s, t = rng.standard_normal((4, 6)) * 3, rng.standard_normal((4, 6)) * 3
        y = rng.integers(0, 6, size=4)
        alpha = float(rng.uniform())
        assert kd_loss(Tensor(s), t, float(rng.uniform(0.5, 8)), alpha, y).item() >= -1e-12


def test_kd_alpha_zero_is_cross_entropy(rng):
    s, t = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    y = rng.integers(0, 4, size=5)
    assert kd_loss(Tensor(s), t, 3.0, 0.0, y).item() == pytest.approx(ad.cross_entropy(Tensor(s), y).item(), abs=1e-12)


def test_kd_gradient(rng):
    t = rng.standard_normal((3, 4))
    y = rng.integers(0, 4, size=3)
    for alpha in (0.0, 0.5, 1.0):
        report = grad_check(lambda s: kd_loss(s, t, 2.0, alpha, y), Tensor(rng.standard_normal((3, 4))))
        assert report.passed, report.max_rel_error


def test_kd_high_temperature_limit(rng):
    # T^2 * KL approaches the mean squared gap of centred logits over 2C as T grows
    s, t = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    sc, tc = s - s.mean(axis=1, keepdims=True), t - t.mean(axis=1, keepdims=True)
    limit = np.mean(np.sum((sc - tc) ** 2, axis=1)) / (2 * 5)
    assert kd_loss(Tensor(s), t, 1e3, 1.0, np.zeros(4, int)).item() == pytest.approx(limit, rel=1e-3)


# ---------------------------------------------------------------------------


def test_copy_share_identical_shapes():
    src = build_model("mlp_small", 4, (8,), r=3, transfer_slots=["fc1"], seed=1)
    dst = build_model("mlp_small", 4, (8,), r=3, transfer_slots=["fc1"], seed=2)
    b_before = dst.factor("fc1").b.data.copy()
    copy_share_baseline(src, dst, {"fc1": "fc1"})
    assert dst.factor("fc1").a.data.tobytes() == src.factor("fc1").a.data.tobytes()
    assert dst.factor("fc1").b.data.tobytes() == b_before.tobytes()


def test_copy_share_top_left_overlap():
    src = build_model("mlp_small", 4, (4,), seed=0)
    dst = build_model("mlp_small", 2, (3,), seed=1)
    src.slot("head").weight.data[...] = np.arange(4 * 64, dtype=float).reshape(4, 64)
    dst_fc1 = dst.slot("fc1").weight.data.copy()
    copy_share_baseline(src, dst, {"head": "head", "fc1": "fc1"})
    np.testing.assert_array_equal(dst.slot("head").weight.data, src.slot("head").weight.data[:2, :64])
    # fc1 is 64x4 in the source and 64x3 in the target: only the first 3 columns move
    np.testing.assert_array_equal(dst.slot("fc1").weight.data, src.slot("fc1").weight.data[:, :3])
    assert dst_fc1.shape == dst.slot("fc1").weight.shape


def test_copy_share_target_larger_keeps_remainder():
    src = build_model("mlp_small", 2, (3,), seed=0)
    dst = build_model("mlp_small", 4, (3,), seed=1)
    before = dst.slot("head").weight.data.copy()
    copy_share_baseline(src, dst, {"head": "head"})
    head = dst.slot("head").weight.data
    np.testing.assert_array_equal(head[:2], src.slot("head").weight.data)
    np.testing.assert_array_equal(head[2:], before[2:])


def test_copy_share_errors():
    fact = build_model("mlp_small", 4, (8,), r=3, transfer_slots=["fc1"], seed=1)
    dense = build_model("mlp_small", 4, (8,), seed=2)
    with pytest.raises(ContractError, match="both"):
        copy_share_baseline(fact, dense, {"fc1": "fc1"})
    empty = build_model("mlp_small", 4, (8,), seed=3)
    empty.slot("fc1").weight.data = np.zeros((0, 8))
    with pytest.raises(ContractError, match="overlap"):
        copy_share_baseline(dense, empty, {"fc1": "fc1"})
