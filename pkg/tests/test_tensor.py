import struct

import numpy as np
import pytest

from refex import tensor as T


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    out = T.matmul(None, T.Var(a), T.Var(b))
    np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        T.matmul(None, T.Var(np.zeros((2, 3))), T.Var(np.zeros((2, 3))))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 9)) * 5
    p = T.softmax(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(x + 123.0), p, atol=1e-12)
    # large logits must not overflow thanks to the max shift
    assert np.all(np.isfinite(T.softmax(x * 1e4)))


def test_backward_matches_finite_differences_on_composite():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((2, 5, 4))
    b = rng.standard_normal((5, 4))
    targets = np.array([1, 3])

    def loss():
        s = np.matmul(a, b.T) * 0.7
        p = T.softmax(s)
        logits = np.matmul(p, b)[..., :3].sum(-1)
        return float(T.cross_entropy(None, T.Var(logits), targets).data)

    tape = T.Tape()
    va, vb = T.Var(a), T.Var(b)
    s = T.scale(tape, T.matmul(tape, va, T.transpose(tape, vb)), 0.7)
    p = T.softmax_rows(tape, s)
    z = T.matmul(tape, p, vb)
    logits = T.row_sum(tape, T.take_cols(tape, z, 0, 3))
    out = T.cross_entropy(tape, logits, targets)
    assert abs(float(out.data) - loss()) < 1e-12
    tape.backward(out)
    for var, raw in ((va, a), (vb, b)):
        num = fd_grad(loss, raw)
        rel = np.abs(var.grad - num).max() / max(np.abs(num).max(), 1e-12)
        assert rel < 1e-6


def test_cross_entropy_gradient_vs_fd():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((4, 36))
    targets = np.array([0, 5, 35, 7])
    v = T.Var(logits)
    tape = T.Tape()
    out = T.cross_entropy(tape, v, targets)
    tape.backward(out)
    num = fd_grad(lambda: float(T.cross_entropy(None, T.Var(logits), targets).data), logits)
    assert np.abs(v.grad - num).max() / np.abs(num).max() < 1e-6


def test_cross_entropy_uniform_is_log36():
    out = T.cross_entropy(None, T.Var(np.zeros((1, 36))), np.array([4]))
    assert abs(float(out.data) - np.log(36)) < 1e-12


def test_add_rows_and_take_rows_gradients():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 4, 2)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2, 2))

    def loss():
        return float((np.matmul(a + b[None], np.ones((2, 2)))[:, 1:3] * w).sum())

    tape = T.Tape()
    va, vb = T.Var(a), T.Var(b)
    y = T.take_rows(tape, T.matmul(tape, T.add_rows(tape, va, vb), T.Var(np.ones((2, 2)))), 1, 3)
    tape.backward(y, seed=w.copy())
    np.testing.assert_allclose(va.grad, fd_grad(loss, a), atol=1e-7)
    np.testing.assert_allclose(vb.grad, fd_grad(loss, b), atol=1e-7)


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_reference():
    rng = np.random.default_rng(5)
    p0 = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(20)]
    params = {"w": p0.copy()}
    opt = T.AdamState()
    for g in grads:
        opt.step(params, {"w": g})
    np.testing.assert_allclose(params["w"], reference_adam(p0, grads), atol=1e-12)
    assert opt.t == 20


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.zeros(4)}
    g = np.array([3.0, -0.5, 1e-3, -20.0])
    T.AdamState(lr=1e-3).step(params, {"w": g})
    assert np.abs(params["w"] + 1e-3 * g / (np.abs(g) + 1e-8)).max() < 1e-9


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError, match="L0.W_Q"):
        T.AdamState().step({"L0.W_Q": np.zeros(2)}, {"L0.W_Q": np.array([1.0, np.nan])})


def test_adam_weight_decay_is_decoupled():
    params = {"w": np.array([2.0])}
    T.AdamState(lr=0.1, weight_decay=0.5).step(params, {"w": np.array([1.0])})
    assert abs(params["w"][0] - (2.0 - 0.1 * 0.5 * 2.0 - 0.1)) < 1e-7


def test_grad_check_flags_a_wrong_gradient():
    p = {"x": np.array([1.0, -2.0, 0.5])}

    def f(params):
        return float((params["x"] ** 3).sum())

    good = T.grad_check(f, p, {"x": 3 * p["x"] ** 2}, fraction=1.0)
    assert good.passed and good.max_rel_error < 1e-8
    bad = T.grad_check(f, p, {"x": 3 * p["x"] ** 2 * 1.01}, fraction=1.0)
    assert not bad.passed and bad.worst_param == "x"
    np.testing.assert_array_equal(p["x"], [1.0, -2.0, 0.5])


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        T.grad_check(lambda p: 0.0, {"x": np.zeros(2, np.float32)}, {"x": np.zeros(2)})


# --- checkpoints -----------------------------------------------------------------

def _tensors():
    rng = np.random.default_rng(6)
    return {"L0.H0.W_Q": rng.standard_normal((3, 4)).astype(np.float32),
            "L0.W_o": rng.standard_normal((4, 3)).astype(np.float32)}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    t = _tensors()
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(t, path, {"variant": "two-attr", "layers": 1})
    header, back = T.load_checkpoint(path)
    assert header["variant"] == "two-attr" and header["version"] == 1
    assert [e["name"] for e in header["tensors"]] == list(t)
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"RFXCKPT1"
    (hlen,) = struct.unpack("<I", raw[8:12])
    assert len(raw) == 12 + hlen + 4 * (12 + 12)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(_tensors(), path, {"variant": "two-attr"})
    raw = path.read_bytes()

    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(T.BadMagicError):
        T.load_checkpoint(bad)

    bad.write_bytes(raw[:-4])
    with pytest.raises(T.TruncatedCheckpointError, match="payload has 23 floats"):
        T.load_checkpoint(bad)

    bad.write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(T.LayoutError):
        T.load_checkpoint(bad)

    (hlen,) = struct.unpack("<I", raw[8:12])
    header = raw[12:12 + hlen].replace(b'"version":1', b'"version":9')
    bad.write_bytes(raw[:12] + header + raw[12 + hlen:])
    with pytest.raises(T.VersionMismatchError):
        T.load_checkpoint(bad)
