"""Minimal reverse-mode automatic differentiation on numpy float64 buffers.

A ``Tape`` records operations in execution order (which is already a valid
topological order). ``backward`` walks the records in reverse and accumulates
gradients into ``Tensor.grad`` buffers. Ops executed while no tape is active
run in plain inference mode and record nothing.

All buffers are float64 and every reduction uses a fixed summation order, so
repeated runs with identical inputs are bit-identical.

Checkpoint byte layout (``save_tensors`` / ``load_tensors``), little-endian:

    magic   8 bytes  b"SSTENS1\\0"
    count   uint32
    per tensor, in written order:
        name_len  uint16
        name      utf-8 bytes
        ndim      uint8
        dims      ndim * uint32
        data      float64, C order
"""

from __future__ import annotations

import struct
import threading

import numpy as np

_EPS_BN = 1e-5

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered operation record; a tape and its tensors belong to one thread."""

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, object]] = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = None
        return False

    def backward(self, loss: Tensor, params: list[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every participating tensor.

        ``loss`` must be scalar (size 1). Tensors in ``params`` that never
        reached the loss get explicit zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for inputs, output, backward_fn in reversed(self._records):
            if output.grad is None:
                continue
            backward_fn(output.grad)
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)


def backward(tape: Tape, loss: Tensor, params: list[Tensor] | None = None) -> None:
    tape.backward(loss, params)


def record(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    """Create the output tensor of a primitive and register its backward rule.

    ``backward_fn(grad_out)`` must accumulate into the inputs' ``.grad``
    buffers (use ``accumulate``). Recording only happens when a tape is active
    and some input requires grad; otherwise the op is pure inference.
    """
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._records.append((inputs, out, backward_fn))
    return out


def accumulate(t: Tensor, grad: np.ndarray) -> None:
    """Add ``grad`` into ``t.grad`` if the tensor participates in the graph."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return record((a, b), out_data, bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return record((a, b), out_data, bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out_data = a.data @ b.data

    def bw(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return record((a, b), out_data, bw)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)

    def bw(g):
        accumulate(x, g * mask)

    return record((x,), out_data, bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        accumulate(x, g * out_data * (1.0 - out_data))

    return record((x,), out_data, bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def bw(g):
        accumulate(x, g.reshape(x.data.shape))

    return record((x,), out_data, bw)


def mean_over(x, axes: tuple[int, ...]) -> Tensor:
    """Mean over ``axes`` with keepdims."""
    x = _as_tensor(x)
    axes = tuple(axes)
    out_data = x.data.mean(axis=axes, keepdims=True)
    count = int(np.prod([x.data.shape[a] for a in axes]))

    def bw(g):
        accumulate(x, np.broadcast_to(g / count, x.data.shape).copy())

    return record((x,), out_data, bw)


def max_over(x, axes: tuple[int, ...]) -> Tensor:
    """Max over ``axes`` with keepdims; gradient routes to the first maximum.

    "First" is row-major order over the reduced axes.
    """
    x = _as_tensor(x)
    axes = tuple(sorted(a % x.data.ndim for a in axes))
    kept = tuple(a for a in range(x.data.ndim) if a not in axes)
    perm = kept + axes
    moved = np.transpose(x.data, perm)
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    arg = np.argmax(flat, axis=-1)
    out_moved = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if a in axes else s for a, s in enumerate(x.data.shape))
    out_data = out_moved.reshape(out_shape)

    def bw(g):
        g_moved = np.transpose(np.broadcast_to(g, out_shape), perm).reshape(lead + (-1,))
        gx_flat = np.zeros_like(flat)
        np.put_along_axis(gx_flat, arg[..., None], g_moved, axis=-1)
        gx = gx_flat.reshape(moved.shape)
        accumulate(x, np.transpose(gx, np.argsort(perm)))

    return record((x,), out_data, bw)


def concat_channels(a, b) -> Tensor:
    """Concatenate along axis 1 (NCHW channel axis)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def bw(g):
        accumulate(a, g[:, :ca])
        accumulate(b, g[:, ca:])

    return record((a, b), out_data, bw)


def global_avg_pool(x) -> Tensor:
    """NCHW -> N x C x 1 x 1 spatial mean."""
    return mean_over(x, (2, 3))


def global_max_pool(x) -> Tensor:
    """NCHW -> N x C x 1 x 1 spatial max."""
    return max_over(x, (2, 3))


# ---------------------------------------------------------------------------
# convolution / pooling / batch norm
# ---------------------------------------------------------------------------

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NCHW input, OIkk kernel.

    ``padding`` is "same" (output = ceil(in/stride), zero padding split
    low/high) or "valid" (no padding). Implemented as im2col + matmul.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    N, C, H, W = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ValueError(f"kernel expects {Cw} input channels, got {C}")
    if padding == "same":
        pt, pb = _same_pad(H, kh, stride)
        pl, pr = _same_pad(W, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt or pb or pl or pr else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    outH = (Hp - kh) // stride + 1
    outW = (Wp - kw) // stride + 1
    if outH <= 0 or outW <= 0:
        raise ValueError(f"input {H}x{W} too small for kernel {kh}x{kw} stride {stride}")

    cols = np.empty((N, C, kh, kw, outH, outW), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + outH * stride:stride,
                                    dj:dj + outW * stride:stride]
    cols2 = cols.reshape(N, C * kh * kw, outH * outW)
    w2 = w.data.reshape(O, C * kh * kw)
    out_data = np.matmul(w2[None], cols2).reshape(N, O, outH, outW)
    if b is not None:
        out_data = out_data + b.data.reshape(1, O, 1, 1)

    def bw(g):
        g2 = g.reshape(N, O, outH * outW)
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.einsum("nol,ncl->oc", g2, cols2).reshape(w.data.shape)
            accumulate(w, gw)
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], g2).reshape(N, C, kh, kw, outH, outW)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + outH * stride:stride,
                        dj:dj + outW * stride:stride] += gcols[:, :, di, dj]
            accumulate(x, gxp[:, :, pt:Hp - pb, pl:Wp - pr] if pt or pb or pl or pr else gxp)

    inputs = (x, w) if b is None else (x, w, b)
    return record(inputs, out_data, bw)


def maxpool2d(x, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Ties route the gradient to the first maximum in
    row-major window order.
    """
    x = _as_tensor(x)
    N, C, H, W = x.data.shape
    oh, ow = H // window, W // window
    if oh == 0 or ow == 0:
        raise ValueError(f"input {H}x{W} smaller than pooling window {window}")
    d = x.data[:, :, : oh * window, : ow * window]
    blocks = d.reshape(N, C, oh, window, ow, window)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, oh, ow, window * window)
    arg = np.argmax(flat, axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gd = gf.reshape(N, C, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, : oh * window, : ow * window] = gd.reshape(N, C, oh * window, ow * window)
        accumulate(x, gx)

    return record((x,), out_data, bw)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place: running = momentum * running + (1-momentum)
    * batch. Eval mode uses the running buffers and never mutates them.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    N, C, H, W = x.data.shape
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + _EPS_BN)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        accumulate(beta, g.sum(axis=axes))
        accumulate(gamma, (g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        gi = g * gamma.data[None, :, None, None]
        if training:
            gmean = gi.mean(axis=axes)
            gdot = (gi * xhat).mean(axis=axes)
            gx = inv[None, :, None, None] * (
                gi - gmean[None, :, None, None] - xhat * gdot[None, :, None, None])
        else:
            gx = gi * inv[None, :, None, None]
        accumulate(x, gx)

    return record((x, gamma, beta), out_data, bw)


# ---------------------------------------------------------------------------
# parameter init and checkpoints
# ---------------------------------------------------------------------------

def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


_MAGIC = b"SSTENS1\x00"


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays using the layout in the module docstring."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by ``save_tensors``; preserves order."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    return out
