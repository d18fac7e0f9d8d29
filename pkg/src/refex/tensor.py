"""Dense kernels with hand-derived reverse-mode gradients.

The op set is closed over exactly what the attention-only model needs:
matmul, transpose, add, add_rows, scale, softmax_rows, row_sum, take_cols,
slice_cols and cross_entropy. Arrays may carry one leading batch axis; a 2-D
operand combined with a batched one has its gradient summed over the batch.

Also here: Adam, a central-difference gradient checker and the binary
checkpoint format.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Var:
    """An array plus its accumulated gradient."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = data
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Tape:
    """Ordered record of backward closures; replayed in exact reverse order."""

    def __init__(self):
        self.ops: list[tuple[str, object]] = []

    def record(self, name, backward):
        self.ops.append((name, backward))

    def backward(self, out: Var, seed=None):
        out.grad = np.ones_like(out.data) if seed is None else seed
        for _, fn in reversed(self.ops):
            fn()


def _reduce_to(g, shape):
    # sum a batched gradient back onto an unbatched operand
    if g.ndim == len(shape) + 1:
        return g.sum(axis=0)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(tape: Tape | None, a: Var, b: Var) -> Var:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Var(np.matmul(a.data, b.data))

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate(_reduce_to(np.matmul(g, _swap(b.data)), a.shape))
        gb = np.matmul(_swap(a.data), g)
        b.accumulate(_reduce_to(gb, b.shape))

    if tape is not None:
        tape.record("matmul", backward)
    return out


def transpose(tape, a: Var) -> Var:
    out = Var(_swap(a.data))

    def backward():
        if out.grad is not None:
            a.accumulate(_swap(out.grad))

    if tape is not None:
        tape.record("transpose", backward)
    return out


def add(tape, a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Var(a.data + b.data)

    def backward():
        if out.grad is not None:
            a.accumulate(out.grad)
            b.accumulate(out.grad)

    if tape is not None:
        tape.record("add", backward)
    return out


def add_rows(tape, a: Var, b: Var) -> Var:
    """Add an unbatched (n, d) array to every item of a batched (B, n, d) one."""
    if a.shape[1:] != b.shape:
        raise ValueError(f"add_rows shape mismatch: {a.shape} vs {b.shape}")
    out = Var(a.data + b.data[None])

    def backward():
        if out.grad is not None:
            a.accumulate(out.grad)
            b.accumulate(out.grad.sum(axis=0))

    if tape is not None:
        tape.record("add_rows", backward)
    return out


def scale(tape, a: Var, c: float) -> Var:
    out = Var(a.data * c)

    def backward():
        if out.grad is not None:
            a.accumulate(out.grad * c)

    if tape is not None:
        tape.record("scale", backward)
    return out


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(tape, s: Var) -> Var:
    p = softmax(s.data)
    out = Var(p)

    def backward():
        g = out.grad
        if g is None:
            return
        s.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    if tape is not None:
        tape.record("softmax_rows", backward)
    return out


def row_sum(tape, a: Var) -> Var:
    out = Var(a.data.sum(axis=-1))

    def backward():
        if out.grad is not None:
            a.accumulate(np.broadcast_to(out.grad[..., None], a.shape).copy())

    if tape is not None:
        tape.record("row_sum", backward)
    return out


def take_rows(tape, a: Var, start: int, stop: int) -> Var:
    """Rows ``start:stop`` along the second-to-last axis."""
    out = Var(a.data[..., start:stop, :])

    def backward():
        if out.grad is not None:
            g = np.zeros_like(a.data)
            g[..., start:stop, :] = out.grad
            a.accumulate(g)

    if tape is not None:
        tape.record("take_rows", backward)
    return out


def take_cols(tape, a: Var, start: int, stop: int) -> Var:
    """Columns ``start:stop`` along the last axis."""
    out = Var(a.data[..., start:stop])

    def backward():
        if out.grad is not None:
            g = np.zeros_like(a.data)
            g[..., start:stop] = out.grad
            a.accumulate(g)

    if tape is not None:
        tape.record("take_cols", backward)
    return out


def slice_cols(tape, a: Var, start: int, stop: int) -> Var:
    return take_cols(tape, a, start, stop)


def cross_entropy(tape, logits: Var, targets) -> Var:
    """Mean of -log softmax(logits)[target] over the batch (rows of ``logits``)."""
    targets = np.asarray(targets)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    if logits.data.ndim == 1:
        loss = -logp[targets]
    else:
        loss = -logp[np.arange(len(targets)), targets].mean()
    out = Var(np.asarray(loss, dtype=logits.data.dtype))

    def backward():
        if out.grad is None:
            return
        g = np.exp(logp)
        if g.ndim == 1:
            g[targets] -= 1.0
        else:
            g[np.arange(len(targets)), targets] -= 1.0
            g /= len(targets)
        logits.accumulate(g * out.grad)

    if tape is not None:
        tape.record("cross_entropy", backward)
    return out


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled (AdamW); 0 gives plain Adam
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        """In-place Adam update of ``params`` (name -> array)."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# --- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    tolerance: float
    worst_param: str | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else f"FAIL (worst: {self.worst_param})"
        return f"grad_check max rel err {self.max_rel_error:.3e} < {self.tolerance:g}: {status}"


def grad_check(loss_fn, params: dict, grads: dict, tolerance: float = 1e-4, *,
               fraction: float = 0.1, h: float = 1e-5, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare ``grads`` against central differences of ``loss_fn(params)``.

    A random ``fraction`` of coordinates per parameter is probed (at least one).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. ``params`` is
    perturbed in place and restored.
    """
    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters ({name} is {p.dtype})")
        flat = p.reshape(-1)
        k = max(1, int(round(fraction * flat.size)))
        idx = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            num = (up - down) / (2 * h)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
        per_param[name] = worst
    worst_name = max(per_param, key=per_param.get) if per_param else None
    return GradCheckReport(max(per_param.values(), default=0.0), per_param,
                           tolerance, worst_name)


# --- checkpoints ------------------------------------------------------------------

MAGIC = b"RFXCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class LayoutError(CheckpointError):
    pass


def save_checkpoint(tensors: dict, path, meta: dict) -> None:
    """Write ``tensors`` (name -> array) as float32 LE after a JSON header."""
    entries, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {"version": CKPT_VERSION, **meta, "tensors": entries}
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, tensors)``; tensors are float32 arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise TruncatedCheckpointError(f"{path}: header length missing")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LayoutError(f"{path}: unreadable header: {e}") from e
    if header.get("version") != CKPT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {header.get('version')} != {CKPT_VERSION}")
    payload = raw[12 + hlen:]
    tensors, expected = {}, 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != expected:
            raise LayoutError(
                f"{path}: tensor {entry['name']} offset {entry['offset']} != {expected}")
        if expected + nbytes > len(payload):
            raise TruncatedCheckpointError(
                f"{path}: payload has {len(payload) // 4} floats, header needs "
                f"{(expected + nbytes) // 4}")
        tensors[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=nbytes // 4, offset=expected).reshape(shape).copy()
        expected += nbytes
    if expected != len(payload):
        raise LayoutError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return header, tensors
