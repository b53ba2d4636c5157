import struct
import warnings

import numpy as np
import pytest

from oracles import best_rank_error
from paramxfer.autodiff import ShapeError, Tensor
from paramxfer.codec import (
    CheckpointError,
    ContractError,
    LowRankParam,
    ParamPartition,
    densify,
    dump_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    reencode_truncated_svd,
    reshape_conv_kernel,
    save_checkpoint,
    unreshape_conv_kernel,
)


def _fro(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def test_densify_examples():
    p = LowRankParam(Tensor([[1.0], [0.0]]), Tensor([[2.0, 3.0]]))
    assert densify(p).data.tolist() == [[2.0, 3.0], [0.0, 0.0]]
    z = LowRankParam(Tensor(np.zeros((3, 2))), Tensor(np.ones((2, 4))))
    assert not densify(z).data.any()


def test_lowrank_shape_contracts():
    with pytest.raises(ShapeError):
        LowRankParam(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4))))
    with pytest.raises(ContractError):
        LowRankParam(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))


def test_partition_disjoint():
    ParamPartition(["head"], ["fc1"])
    with pytest.raises(ContractError):
        ParamPartition(["head"], ["head", "fc1"])


def test_svd_exact_rank_one():
    res = reencode_truncated_svd(np.array([[2.0, 0.0], [0.0, 0.0]]), 1)
    np.testing.assert_allclose(densify(res.param).data, [[2.0, 0.0], [0.0, 0.0]], atol=1e-15)
    assert res.converged


def test_svd_recovers_true_rank(rng):
    for _ in range(20):
        w = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 4))
        res = reencode_truncated_svd(w, 2)
        assert _fro(densify(res.param).data, w) <= 1e-6


def test_svd_roundtrip_full_rank_factors(rng):
    for _ in range(20):
        rows, cols = rng.integers(2, 7, size=2)
        r = min(rows, cols)
        w = densify(LowRankParam(Tensor(rng.standard_normal((rows, r))), Tensor(rng.standard_normal((r, cols))))).data
        back = densify(reencode_truncated_svd(w, r).param).data
        assert _fro(back, w) <= 1e-8


def test_svd_matches_oracle_on_8x8(rng):
    for _ in range(20):
        w = rng.standard_normal((8, 8))
        for r in (1, 3, 5):
            err = _fro(densify(reencode_truncated_svd(w, r).param).data, w)
            assert err <= best_rank_error(w, r) + 1e-6


def test_svd_monotone_in_rank(rng):
    for _ in range(10):
        w = rng.standard_normal((7, 5))
        errs = [_fro(densify(reencode_truncated_svd(w, r).param).data, w) for r in range(1, 6)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_svd_factor_conventions(rng):
    w = rng.standard_normal((9, 6))
    res = reencode_truncated_svd(w, 3)
    b, a = res.param.b.data, res.param.a.data
    assert b.shape == (9, 3) and a.shape == (3, 6)
    np.testing.assert_allclose(a @ a.T, np.eye(3), atol=1e-10)
    # singular values live in b: its column norms are the descending spectrum
    np.testing.assert_allclose(np.linalg.norm(b, axis=0), res.singular_values, rtol=1e-10)
    assert np.all(np.diff(res.singular_values) <= 0)


def test_svd_is_deterministic(rng):
    w = rng.standard_normal((8, 5))
    a, b = reencode_truncated_svd(w, 2, seed=7), reencode_truncated_svd(w, 2, seed=7)
    assert a.param.b.data.tobytes() == b.param.b.data.tobytes()
    assert a.param.a.data.tobytes() == b.param.a.data.tobytes()


def test_svd_rank_out_of_range():
    with pytest.raises(ContractError):
        reencode_truncated_svd(np.ones((3, 2)), 3)
    with pytest.raises(ContractError):
        reencode_truncated_svd(np.ones((3, 2)), 0)
    with pytest.raises(ContractError):
        reencode_truncated_svd(np.ones((3, 2)), 1, iters=0)


def test_svd_warns_when_not_converged(rng):
    # nearly repeated leading singular values converge slowly
    u, _ = np.linalg.qr(rng.standard_normal((30, 30)))
    v, _ = np.linalg.qr(rng.standard_normal((30, 30)))
    s = np.linspace(1.0, 0.9, 30)
    w = u @ np.diag(s) @ v.T
    with pytest.warns(RuntimeWarning):
        res = reencode_truncated_svd(w, 3, iters=1, oversample=0)
    assert not res.converged
    assert res.param.b.shape == (30, 3)


def test_conv_reshape_examples(rng):
    k = Tensor(np.array([1.5, -2.0]).reshape(2, 1, 1, 1))
    m = reshape_conv_kernel(k)
    assert m.shape == (2, 1)
    np.testing.assert_array_equal(unreshape_conv_kernel(m, (2, 1, 1, 1)).data, k.data)

    k = Tensor(rng.standard_normal((4, 3, 3, 3)))
    m = reshape_conv_kernel(k)
    assert m.shape == (4, 27)
    np.testing.assert_array_equal(m.data[1], k.data[1].reshape(-1))
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
        k = Tensor(rng.standard_normal(shape))
        back = unreshape_conv_kernel(reshape_conv_kernel(k), shape)
        assert back.data.tobytes() == k.data.tobytes()


def test_conv_reshape_rejects_non_4d():
    with pytest.raises(ShapeError):
        reshape_conv_kernel(Tensor(np.ones((2, 3))))


def test_checkpoint_roundtrip(tmp_path, rng):
    lr = LowRankParam(Tensor(rng.standard_normal((5, 2))), Tensor(rng.standard_normal((2, 3))), slot_id="fc1")
    dense = Tensor(rng.standard_normal((4,)))
    entries = {"fc1.weight": lr, "fc1.bias": dense}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, entries)
    blob = path.read_bytes()
    assert blob == dump_checkpoint(entries)
    assert blob[:8] == b"PXCKPT01"
    back = load_checkpoint(path)
    assert list(back) == ["fc1.weight", "fc1.bias"]
    w = back["fc1.weight"]
    assert isinstance(w, LowRankParam) and w.slot_id == "fc1.weight"
    assert w.b.data.tobytes() == lr.b.data.tobytes() and w.a.data.tobytes() == lr.a.data.tobytes()
    assert back["fc1.bias"].tobytes() == dense.data.tobytes()


def test_checkpoint_layout_b_then_a(rng):
    lr = LowRankParam(Tensor(np.full((2, 1), 1.0)), Tensor(np.full((1, 3), 2.0)))
    blob = dump_checkpoint({"w": lr})
    (n,) = struct.unpack("<Q", blob[8:16])
    payload = np.frombuffer(blob[16 + n :], dtype="<f8")
    assert payload.tolist() == [1.0, 1.0, 2.0, 2.0, 2.0]


def test_checkpoint_rejects_corruption(rng):
    blob = dump_checkpoint({"w": Tensor(rng.standard_normal(4))})
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob + b"\0")
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOTACKPT" + blob[8:])


def test_svd_quiet_on_well_conditioned_inputs(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for _ in range(10):
            reencode_truncated_svd(rng.standard_normal((8, 8)), 3)
