"""Dense tensors with taped reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, and every
primitive op that sees an active ``Tape`` appends a closure that knows how to
push gradients back to its inputs.  ``Tape.backward`` replays those closures
in strict reverse execution order, summing contributions, which makes the
result deterministic and makes parameter reuse (shared encoder/decoder) work
without any graph analysis.

Ops never mutate their inputs' data.  Running ops without an active tape is
the inference mode: nothing is recorded and outputs carry no gradient state.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """n-dimensional value; ``grad`` is populated by ``Tape.backward``."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # own the buffer: g may be a view into another tensor's grad
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # convenience arithmetic (tensor-tensor or tensor-scalar)
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of executed primitive ops for reverse-mode accumulation.

    One tape is owned by one thread for its lifetime; distinct tapes may run
    on distinct threads concurrently.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        for t in inputs:
            if t.requires_grad and not getattr(t, "_op_output", False) and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self._leaves.append(t)
        self._records.append((output, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

        Leaves that do not influence the loss end up with zero gradients.
        """
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        for output, _ in self._records:
            output.grad = None
        for t in self._leaves:
            t.grad = np.zeros_like(t.data)
        loss.grad = np.ones_like(loss.data)
        for output, backward in reversed(self._records):
            g = output.grad
            if g is None:
                continue
            backward(g)


class _OpOutput(Tensor):
    __slots__ = ("_op_output",)

    def __init__(self, data):
        super().__init__(data)
        self._op_output = True


def _make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_builder) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = _OpOutput(data)
    out.requires_grad = True
    tape.record(inputs, out, backward_builder(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape an operand had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(g, b.shape))

        return run

    return _make_result(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(-g, b.shape))

        return run

    return _make_result(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(g * a.data, b.shape))

        return run

    return _make_result(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def bwd(out):
        def run(g):
            a.accum_grad(g * s)

        return run

    return _make_result(data, (a,), bwd)


def shift(a: Tensor, s: float) -> Tensor:
    data = a.data + s

    def bwd(out):
        def run(g):
            a.accum_grad(g)

        return run

    return _make_result(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(out):
        def run(g):
            a.accum_grad(g.reshape(a.shape))

        return run

    return _make_result(data, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(out):
        def run(g):
            a.accum_grad(np.transpose(g, inv))

        return run

    return _make_result(data, (a,), bwd)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def bwd(out):
        def run(g):
            a.accum_grad(np.swapaxes(g, ax1, ax2))

        return run

    return _make_result(data, (a,), bwd)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer index; ids may have any shape."""
    ids = np.asarray(ids)
    data = table.data[ids.reshape(-1)].reshape(ids.shape + table.shape[1:])

    def bwd(out):
        def run(g):
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accum_grad(dt)

        return run

    return _make_result(data, (table,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def bwd(out):
        def run(g):
            start = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p.accum_grad(g[start : start + n])
                start += n

        return run

    return _make_result(data, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# matmul and nonlinearities


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a.accum_grad(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b.accum_grad(_unbroadcast(gb, b.shape))

        return run

    return _make_result(data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd(out):
        def run(g):
            a.accum_grad(g * (a.data > 0))

        return run

    return _make_result(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(out):
        def run(g):
            s = out.data
            a.accum_grad(g * s * (1.0 - s))

        return run

    return _make_result(data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Probabilities along ``axis``; max-subtracted for overflow safety."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def run(g):
            s = out.data
            a.accum_grad(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        return run

    return _make_result(data, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain*x+bias.

    ``gain`` and ``bias`` may be any shape broadcastable against ``x``, which
    covers both the transformer case (per-feature affine) and the conv case
    (per-channel affine over flattened spatial positions).
    """
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(out):
        def run(g):
            if gain.requires_grad:
                gain.accum_grad(_unbroadcast(g * xhat, gain.shape))
            if bias.requires_grad:
                bias.accum_grad(_unbroadcast(g, bias.shape))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x.accum_grad(inv * (dxhat - m1 - xhat * m2))

        return run

    return _make_result(data, (x, gain, bias), bwd)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """Cross-correlate ``x`` (c_in, h, w) with ``k`` (c_out, c_in, kh, kw)."""
    c_in, h, w = x.shape
    c_out, kc, kh, kw = k.shape
    if kc != c_in:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, kernels {kc}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d degenerate output {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}")
    if padding:
        xpad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = x.data
    # the im2col buffer feeds both the forward product and the kernel
    # gradient; keeping it on the closure avoids rebuilding it in backward
    cols, oh2, ow2 = kernels.conv2d_im2col(xpad, kh, kw, stride, stride)
    data = kernels.conv2d_forward_from_cols(cols, k.data, oh2, ow2)
    if bias is not None:
        data = data + bias.data[:, None, None]
    inputs = (x, k) if bias is None else (x, k, bias)

    def bwd(out):
        def run(g):
            g = np.ascontiguousarray(g)
            if bias is not None and bias.requires_grad:
                bias.accum_grad(g.sum(axis=(1, 2)))
            if k.requires_grad:
                k.accum_grad(kernels.conv2d_backward_kernels_from_cols(g, cols, c_in, kh, kw))
            if x.requires_grad:
                dxp = kernels.conv2d_backward_input(g, k.data, xpad.shape[1], xpad.shape[2], stride, stride)
                if padding:
                    dxp = dxp[:, padding:-padding, padding:-padding]
                x.accum_grad(dxp)

        return run

    return _make_result(data, inputs, bwd)


# ---------------------------------------------------------------------------
# reductions and losses


def mean_axes(a: Tensor, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axes, keepdims=keepdims)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def bwd(out):
        def run(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.accum_grad(np.broadcast_to(g, a.shape) / count)

        return run

    return _make_result(data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bwd(out):
        def run(g):
            a.accum_grad(np.broadcast_to(g, a.shape).astype(a.data.dtype))

        return run

    return _make_result(data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int = -1) -> Tensor:
    """Mean negative log-probability of ``targets`` over non-ignored rows.

    ``logits`` is (T, V); ``targets`` is (T,) integer class ids.  Rows whose
    target equals ``ignore_id`` contribute neither loss nor gradient.  When
    every row is ignored the loss is 0 with zero gradient.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {logits.shape[0]}")
    valid = targets != ignore_id
    n_valid = int(valid.sum())
    safe_t = np.where(valid, targets, 0)
    if np.any((safe_t < 0) | (safe_t >= logits.shape[1])):
        raise ValueError("target ids out of vocabulary range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(z.shape[0]), safe_t]
    if n_valid == 0:
        data = np.asarray(0.0, dtype=logits.data.dtype)
    else:
        data = np.asarray(nll[valid].mean(), dtype=logits.data.dtype)

    def bwd(out):
        def run(g):
            if n_valid == 0:
                return
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(p.shape[0]), safe_t] -= 1.0
            p[~valid] = 0.0
            logits.accum_grad(g * p / n_valid)

        return run

    return _make_result(data, (logits,), bwd)


def l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute deviation over unmasked elements; 0 with zero grad when
    the mask selects nothing.  Subgradient at exact zeros is taken as 0."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"l1_loss shape mismatch: pred {pred.shape}, target {target.shape}")
    if mask is None:
        m = np.ones(pred.shape, dtype=pred.data.dtype)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=pred.data.dtype), pred.shape)
    n = m.sum()
    diff = pred.data - target
    if n == 0:
        data = np.asarray(0.0, dtype=pred.data.dtype)
    else:
        data = np.asarray((np.abs(diff) * m).sum() / n, dtype=pred.data.dtype)

    def bwd(out):
        def run(g):
            if n == 0:
                return
            pred.accum_grad(g * np.sign(diff) * m / n)

        return run

    return _make_result(data, (pred,), bwd)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Per-parameter first/second moment slots plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step_count = 0


class Adam:
    """Adaptive-moments update (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 state: AdamState | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = state if state is not None else AdamState(params)

    def step(self, lr: float | None = None) -> None:
        """Apply one in-place update from the parameters' current .grad."""
        if lr is None:
            lr = self.lr
        st = self.state
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# numerical gradient checking


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() wrt every element of param."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def sinusoidal_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Classic interleaved sine/cosine position table of shape (length, d)."""
    pe = np.zeros((length, d_model), dtype=np.float64)
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-math.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: d_model // 2])
    return pe.astype(dtype)
