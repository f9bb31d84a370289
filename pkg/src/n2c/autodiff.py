"""Reverse-mode automatic differentiation over dense 4-D tensors.

The operation set is exactly what a convolutional encoder-decoder and its
training losses need: cross-correlation conv2d, ReLU, 2x2 max pooling,
2x nearest-neighbour upsampling, channel concatenation, and same-shape
elementwise arithmetic with a mean reduction.  The recorded graph is
implicit: every operation result keeps references to its parents plus a
closure that maps the upstream gradient to per-parent contributions, and
``backward`` walks that graph exactly once in reverse topological order.

Conventions are fixed so that results are reproducible and testable:

* tensor layout is batch x channel x height x width (rank <= 4),
* convolution is cross-correlation (no kernel flip),
* ReLU's subgradient at 0 is 0,
* max pooling breaks ties in favour of the first element in row-major
  order within each 2x2 block,
* broadcasting is not supported except against Python scalars.

Tensors store float32 by default.  Every operation preserves the dtype of
its inputs, so building the graph from float64 tensors runs the whole
computation in double precision (finite-difference gradient checks need
that headroom).
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (nesting-safe)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense array node of the autodiff graph.

    ``data`` holds the values, ``grad`` the accumulated gradient (eagerly
    zero-initialised for tensors constructed with ``requires_grad=True``,
    lazily populated for operation results).  Repeated ``backward`` calls
    accumulate into ``grad`` until ``zero_grad`` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors are at most rank 4, got rank {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    # -- graph management ----------------------------------------------------

    def detach(self) -> "Tensor":
        """Same values, no graph attachment, no gradient requirement."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self):
        backward(self)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)


def _result(data: np.ndarray, parents: Iterable[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are live."""
    out = Tensor(data, requires_grad=False, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._op = op
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, g))
        if b.requires_grad:
            out.append((b, g))
        return out

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, g))
        if b.requires_grad:
            out.append((b, -g))
        return out

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _require_same_shape(a, b, "mul")

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, g * b.data))
        if b.requires_grad:
            out.append((b, g * a.data))
        return out

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def mul_scalar(a: Tensor, s) -> Tensor:
    s = float(s)

    def grad_fn(g):
        return [(a, g * s)] if a.requires_grad else []

    return _result(a.data * a.data.dtype.type(s), (a,), grad_fn, "mul_scalar")


def square(a: Tensor) -> Tensor:
    def grad_fn(g):
        return [(a, g * (2.0 * a.data))] if a.requires_grad else []

    return _result(a.data * a.data, (a,), grad_fn, "square")


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, reducing to a rank-0 tensor."""
    n = a.data.size
    if n == 0:
        raise ValueError("mean: cannot reduce an empty tensor")

    def grad_fn(g):
        if not a.requires_grad:
            return []
        return [(a, np.full(a.shape, g / n, dtype=a.data.dtype))]

    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), grad_fn, "mean")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def grad_fn(g):
        if not a.requires_grad:
            return []
        return [(a, g * (a.data > 0))]

    return _result(out, (a,), grad_fn, "relu")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Padded input (B,C,H,W) -> column matrix (B, C*k*k, oh*ow)."""
    b, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return win.reshape(b, c * k * k, oh * ow)


def _col2im(gcols: np.ndarray, b: int, c: int, k: int, stride: int,
            oh: int, ow: int, hp: int, wp: int, dtype) -> np.ndarray:
    """Scatter-add column gradients back onto the padded input grid."""
    gx = np.zeros((b, c, hp, wp), dtype=dtype)
    g6 = gcols.reshape(b, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over a (B, C, H, W) input.

    ``w`` has shape (out_ch, in_ch, k, k), ``b`` shape (out_ch,).  Output
    spatial size is floor((H + 2*padding - k) / stride) + 1 per axis.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4 (B,C,H,W), got rank {x.ndim}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4 (O,I,k,k), got rank {w.ndim}")
    oc, ic, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if x.shape[1] != ic:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {ic} "
            f"(weight shape {w.shape})"
        )
    if b.shape != (oc,):
        raise ValueError(f"conv2d: bias shape {b.shape} must be ({oc},)")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if x.data.dtype != w.data.dtype or x.data.dtype != b.data.dtype:
        raise ValueError("conv2d: input, weight and bias dtypes must agree")

    bs, _, h, wd = x.shape
    k = kh
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ValueError(
            f"conv2d: spatial extent {h}x{wd} with padding {padding} is smaller "
            f"than the {k}x{k} kernel"
        )

    xp = _pad2d(x.data, padding)
    cols = _im2col(xp, k, stride, oh, ow)
    w2 = w.data.reshape(oc, ic * k * k)
    out = np.matmul(w2, cols)                      # (B, O, oh*ow)
    out += b.data[None, :, None]
    out = out.reshape(bs, oc, oh, ow)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.reshape(bs, oc, oh * ow))
        outs = []
        if w.requires_grad or x.requires_grad:
            cols_b = _im2col(_pad2d(x.data, padding), k, stride, oh, ow)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)            # (B, C*k*k, oh*ow)
            hp, wp = h + 2 * padding, wd + 2 * padding
            gx = _col2im(gcols, bs, ic, k, stride, oh, ow, hp, wp, g.dtype)
            if padding:
                gx = gx[:, :, padding:hp - padding, padding:wp - padding]
            outs.append((x, gx))
        if w.requires_grad:
            gw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0)
            outs.append((w, gw.reshape(w.shape)))
        if b.requires_grad:
            outs.append((b, g2.sum(axis=(0, 2))))
        return outs

    return _result(out, (x, w, b), grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# pooling / resampling / concatenation
# ---------------------------------------------------------------------------


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; gradient routes to the first argmax."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2: input must be rank 4, got rank {x.ndim}")
    bs, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # blocks[..., :] lists each 2x2 window in row-major order, so argmax
    # picks the first maximal element on ties.
    blocks = x.data.reshape(bs, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(bs, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        if not x.requires_grad:
            return []
        gb = np.zeros((bs, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(bs, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return [(x, gx.reshape(bs, c, h, w))]

    return _result(np.ascontiguousarray(out), (x,), grad_fn, "maxpool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; gradient sums each block."""
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2: input must be rank 4, got rank {x.ndim}")
    bs, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        if not x.requires_grad:
            return []
        gx = g.reshape(bs, c, h, 2, w, 2).sum(axis=(3, 5))
        return [(x, gx)]

    return _result(out, (x,), grad_fn, "upsample_nearest2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits exactly."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels: both inputs must be rank 4")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_channels: batch mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: spatial mismatch {a.shape[2:]} vs {b.shape[2:]}"
        )
    if a.data.dtype != b.data.dtype:
        raise ValueError("concat_channels: dtype mismatch")
    ca = a.shape[1]

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, g[:, :ca]))
        if b.requires_grad:
            out.append((b, g[:, ca:]))
        return out

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn, "concat")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-first topological order of the recorded graph."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``grad`` for every reachable tensor.

    ``loss`` must be rank 0 and produced through recorded operations.
    Calling backward again without ``zero_grad`` adds a second copy of the
    gradients (accumulation is linear).
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be rank 0, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not attached to a recorded graph")

    flow: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    order = _topo_order(loss)
    for node in reversed(order):
        g = flow.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, contrib in node._grad_fn(g):
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + contrib
            else:
                flow[key] = contrib
    for node in order:
        g = flow.get(id(node))
        if g is None or not node.requires_grad:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=node.data.dtype, copy=True)
        else:
            node.grad = node.grad + np.asarray(g, dtype=node.data.dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-4) -> float:
    """Compare autodiff and central-difference gradients of ``fn`` at ``point``.

    ``fn`` must be deterministic and map a tensor to a rank-0 tensor.
    Returns the max elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8).  Run in float64 for tight bounds.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True, dtype=point.data.dtype)
    out = fn(x)
    if out.shape != ():
        raise ValueError("finite_diff_check: fn must return a rank-0 tensor")
    out.backward()
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(x).item()
            flat[i] = orig - step
            fm = fn(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
