import math
import struct

import numpy as np
import pytest

from acl_lab.encoder import (EncoderParams, backward, commit_running_stats, forward, init_params,
                             load_checkpoint, save_checkpoint)
from acl_lab.errors import BadMagic, DimMismatch, StaleTrace, TruncatedFile, VersionMismatch
from acl_lab.losses import LossConfig, PairBatch, acl, build_pair_relation
from oracles import grad_close


def jitter_biases(p, seed):
    # generic point: keeps ReLU pre-activations off the kink and h rows non-zero
    rng = np.random.default_rng(seed)
    for name, arr in p.tensors.items():
        if name.endswith(".b") or name in ("g.b1", "g.b2", "g.bn_beta"):
            arr += rng.uniform(-0.3, 0.3, size=arr.shape)
    return p


def toy(seed=0, d_in=5, hidden=(7, 6), d_h=4, d_z=3, head_hidden=5):
    p = init_params(d_in, hidden=hidden, d_h=d_h, d_z=d_z, head_hidden=head_hidden, seed=seed)
    return jitter_biases(p, seed + 1000)


def param_fd(params, loss_fn, eps=1e-6):
    out = {}
    for name, arr in params.trainable().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_fn()
            arr[idx] = old - eps
            dn = loss_fn()
            arr[idx] = old
            g[idx] = (up - dn) / (2 * eps)
        out[name] = g
    return out


def test_zero_network_gives_zero_h():
    p = init_params(3, hidden=(4,), d_h=2, head=False, seed=0, final_activation="identity")
    p.activations[:] = ["identity", "identity"]
    for arr in p.tensors.values():
        arr[...] = 0.0
    h, z, _ = forward(p, np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(h, 0.0)
    assert z is None


def test_eval_bit_identical_and_row_pure():
    p = toy()
    p.tensors["g.bn_run_mean"][...] = 0.3
    p.tensors["g.bn_run_var"][...] = 2.0
    x = np.random.default_rng(1).normal(size=(6, 5))
    h1, z1, _ = forward(p, x[:1], mode="eval")
    h2, z2, _ = forward(p, x[:1], mode="eval")
    assert h1.tobytes() == h2.tobytes() and z1.tobytes() == z2.tobytes()
    perm = np.random.default_rng(2).permutation(6)
    _, z_all, _ = forward(p, x, mode="eval")
    _, z_perm, _ = forward(p, x[perm], mode="eval")
    np.testing.assert_allclose(z_perm, z_all[perm], rtol=0, atol=1e-14)


def test_forward_matches_layerwise_recomputation():
    p = toy(seed=3)
    x = np.random.default_rng(4).normal(size=(8, 5))
    t = p.tensors
    a = np.maximum(x @ t["f.0.W"] + t["f.0.b"], 0)
    a = np.maximum(a @ t["f.1.W"] + t["f.1.b"], 0)
    h_ref = a @ t["f.2.W"] + t["f.2.b"]
    p1 = h_ref @ t["g.W1"] + t["g.b1"]
    bn = (p1 - p1.mean(0)) / np.sqrt(p1.var(0) + 1e-5) * t["g.bn_gamma"] + t["g.bn_beta"]
    z_ref = np.maximum(bn, 0) @ t["g.W2"] + t["g.b2"]
    h, z, _ = forward(p, x)
    np.testing.assert_allclose(h, h_ref, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(z, z_ref, rtol=1e-12, atol=1e-12)


def test_dim_mismatch():
    with pytest.raises(DimMismatch):
        forward(toy(), np.zeros((2, 4)))


def test_zero_upstream_gives_zero_grads():
    p = toy()
    _, _, tr = forward(p, np.random.default_rng(0).normal(size=(6, 5)))
    grads = backward(tr, np.zeros((6, 4)), np.zeros((6, 3)))
    assert set(grads) == set(p.trainable())
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_backward_linear_in_injection_points():
    p = toy()
    rng = np.random.default_rng(5)
    _, _, tr = forward(p, rng.normal(size=(6, 5)))
    gh, gz = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    only_z = backward(tr, None, gz)
    zero_h = backward(tr, np.zeros((6, 4)), gz)
    both = backward(tr, gh, gz)
    only_h = backward(tr, gh, None)
    for k in both:
        np.testing.assert_array_equal(only_z[k], zero_h[k])
        np.testing.assert_allclose(both[k], only_z[k] + only_h[k], rtol=1e-12, atol=1e-14)


def test_stale_trace():
    p = toy()
    _, _, tr = forward(p, np.zeros((4, 5)) + 0.1)
    with pytest.raises(StaleTrace):
        backward(tr, np.zeros((3, 4)), None)
    _, _, ev = forward(p, np.zeros((4, 5)), mode="eval")
    with pytest.raises(StaleTrace):
        backward(ev, np.zeros((4, 4)), None)


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    p = toy(seed=seed, hidden=(6, 5), d_h=4, d_z=3)
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(6, 5))
    gh, gz = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))

    def loss():
        h, z, _ = forward(p, x)
        return float(np.sum(h * gh) + np.sum(z * gz))

    _, _, tr = forward(p, x)
    analytic = backward(tr, gh, gz)
    numeric = param_fd(p, loss)
    for k in analytic:
        ok, worst = grad_close(analytic[k], numeric[k])
        assert ok, (k, worst)


def test_batchnorm_train_statistics():
    p = init_params(6, hidden=(8,), d_h=5, d_z=3, head_hidden=7, seed=1)
    x = np.random.default_rng(2).normal(size=(32, 6))
    _, _, tr = forward(p, x)
    xhat = tr.head["xhat"]
    assert np.max(np.abs(xhat.mean(axis=0))) < 1e-8
    np.testing.assert_allclose(xhat.var(axis=0), 1.0, atol=1e-6 * 1e2)
    y = tr.head["y"]
    np.testing.assert_allclose(y.mean(axis=0), p.tensors["g.bn_beta"], atol=1e-8)


def test_running_stats_committed_outside_forward():
    p = toy()
    before = p.tensors["g.bn_run_mean"].copy()
    _, _, tr = forward(p, np.random.default_rng(0).normal(size=(5, 5)))
    np.testing.assert_array_equal(p.tensors["g.bn_run_mean"], before)
    commit_running_stats(p, tr)
    np.testing.assert_allclose(p.tensors["g.bn_run_mean"], 0.9 * before + 0.1 * tr.head["mu"])
    assert np.all(p.tensors["g.bn_run_var"] > 0)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_end_to_end_acl_gradient(alpha):
    p = jitter_biases(init_params(4, hidden=(5,), d_h=4, d_z=3, head_hidden=4, seed=7), 8)
    x = np.random.default_rng(int(alpha * 10)).normal(size=(6, 4))
    rel = build_pair_relation(3)
    cfg = LossConfig(tau=0.5, m_g=math.pi / 2, alpha=alpha)

    def loss():
        h, z, _ = forward(p, x)
        return acl(PairBatch(z, h), rel, cfg).value

    h, z, tr = forward(p, x)
    res = acl(PairBatch(z, h), rel, cfg)
    analytic = backward(tr, res.grad_second, res.grad_first)
    numeric = param_fd(p, loss)
    for k in analytic:
        ok, worst = grad_close(analytic[k], numeric[k])
        assert ok, (k, worst)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(5, hidden=(6,), d_h=4, d_z=3, n_classes=3, seed=2)
    p.tensors["g.bn_run_var"][...] = np.random.default_rng(0).uniform(0.5, 2.0, 4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.activations == p.activations
    assert list(q.tensors) == list(p.tensors)
    for k in p.tensors:
        assert q.tensors[k].tobytes() == p.tensors[k].tobytes()
        assert q.tensors[k].shape == p.tensors[k].shape
    save_checkpoint(q, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    p = init_params(2, hidden=(), d_h=2, head=False, seed=0)
    save_checkpoint(p, tmp_path / "m")
    raw = (tmp_path / "m").read_bytes()
    assert raw[:4] == b"ACL1"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    (name_len,) = struct.unpack("<I", raw[8:12])
    assert raw[12:12 + name_len] == b"f.0.W"
    rank, d0, d1 = struct.unpack("<3I", raw[12 + name_len:24 + name_len])
    assert (rank, d0, d1) == (2, 2, 2)
    payload = np.frombuffer(raw[24 + name_len:24 + name_len + 32], dtype="<f8")
    np.testing.assert_array_equal(payload, p.tensors["f.0.W"].ravel())


def test_checkpoint_errors(tmp_path):
    p = toy()
    path = tmp_path / "m"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    (tmp_path / "cut").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "cut")
    (tmp_path / "magic").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "ver")
    (tmp_path / "tiny").write_bytes(b"AC")
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "tiny")


def test_params_validate_chain():
    p = toy()
    p.tensors["f.1.W"] = np.zeros((3, 6))
    with pytest.raises(DimMismatch):
        EncoderParams(p.tensors, p.activations).validate()
