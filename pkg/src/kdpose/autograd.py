"""Dense tensors with a small reverse-mode differentiation engine.

Layout is channels-first row-major throughout: images are ``(C, H, W)`` or
batched ``(N, C, H, W)``. Every op checks its output for non-finite values
and raises ``FloatingPointError`` instead of propagating NaN/Inf.
"""
from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated (e.g. non-scalar backward)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """A value in the computation graph.

    ``data`` is a numpy array; ``grad`` has the same shape and is only
    populated on leaves that require gradients. Intermediate nodes keep
    references to their parents and a closure mapping the upstream
    gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = _check_finite(arr, "tensor construction")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, s: float) -> "Tensor":
        return scale(self, s)

    __rmul__ = __mul__


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data, op)
    out.grad = None
    out.op = op
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = fn if needs else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``dloss/dleaf`` into ``.grad`` of every reachable leaf.

    Gradients are summed into leaves, so two calls without zeroing double
    them. Intermediate gradients live only for the duration of the call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- operators


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * a.data.dtype.type(s), "scale", (a,), lambda g: (g * g.dtype.type(s),))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape, dtype = a.shape, a.dtype
    return _result(np.asarray(a.data.sum(), dtype=dtype), "sum", (a,),
                   lambda g: (np.full(shape, g, dtype=dtype),))


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.data.dtype.type(0)), "relu", (a,),
                   lambda g: (g * mask,))


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all elements.

    Gradient flows into whichever argument requires it; pass a detached
    target to treat it as a constant.
    """
    if prediction.shape != target.shape:
        raise DimensionError(f"mse: shape mismatch {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    n = diff.size
    value = np.asarray(np.dot(diff.ravel(), diff.ravel()) / n, dtype=diff.dtype)

    def fn(g):
        d = diff * (g * (2.0 / n)).astype(diff.dtype)
        return d, -d

    return _result(value, "mse", (prediction, target), fn)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the channel axis (axis -3) into consecutive chunks."""
    axis = a.data.ndim - 3
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split_channels: sizes {list(sizes)} do not sum to {a.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def fn(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        outs.append(_result(a.data[sl].copy(), "split", (a,), fn))
        start += size
    return outs


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix laid out as ``(N, Cin*k*k, Ho*Wo)`` for a batched GEMM."""
    n, c = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.reshape(n, c, ho * wo)
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation.

    ``x`` is ``(Cin, H, W)`` or ``(N, Cin, H, W)``; ``weight`` is
    ``(Cout, Cin, k, k)``; ``bias`` is ``(Cout,)``.
    """
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise DimensionError("conv2d: expected (N,)C,H,W input, 4D weight and 1D bias")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("conv2d: square kernels only")
    if bias.shape[0] != cout:
        raise DimensionError(f"conv2d: bias has {bias.shape[0]} entries, weight has {cout} filters")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cin}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: output would be empty")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    if not batched:
        out = out[0]

    def fn(g):
        gb = (g if batched else g[None]).reshape(n, cout, ho * wo)
        gw = gbias = gx = None
        if weight.requires_grad:
            gw = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            gbias = gb.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gb)
            if k == 1 and stride == 1:
                gxp = gcols.reshape(xp.shape)
            else:
                gcols = gcols.reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros(xp.shape, dtype=xp.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx if batched else gx[0])
        return gx, gw, gbias

    return _result(out, "conv2d", (x, weight, bias), fn)


def similarity_matrix(features: Tensor, norm_exponent: int = 1) -> Tensor:
    """Pairwise similarity of spatial feature vectors.

    For features ``(C, H, W)`` (or batched ``(N, C, H, W)``) returns the
    ``(HW, HW)`` matrix ``g_ij = f_i . f_j / (|f_i|^e |f_j|^e)``. Rows and
    columns of zero feature vectors are set to 0 with a warning.
    """
    if norm_exponent not in (1, 2):
        raise ValueError("norm_exponent must be 1 or 2")
    e = norm_exponent
    batched = features.data.ndim == 4
    if features.data.ndim not in (3, 4):
        raise DimensionError("similarity_matrix: expected (N,)C,H,W features")
    fd = features.data if batched else features.data[None]
    n, c, h, w = fd.shape
    f = fd.reshape(n, c, h * w)
    sq = np.einsum("ncp,ncp->np", f, f)
    norm = np.sqrt(sq)
    zero = norm == 0
    if zero.any():
        warnings.warn(f"similarity_matrix: {int(zero.sum())} zero feature vector(s); "
                      "their rows/columns are set to 0", RuntimeWarning, stacklevel=2)
    inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, norm ** e)).astype(fd.dtype)
    fh = f * inv[:, None, :]  # normalised columns; g = fh^T fh
    g_mat = np.matmul(fh.transpose(0, 2, 1), fh)  # N,P,P
    out = g_mat if batched else g_mat[0]

    def fn(grad):
        u = grad if batched else grad[None]
        gfh = np.matmul(fh, u + u.transpose(0, 2, 1))  # N,C,P
        # through fh = f |f|^-e: gf = |f|^-e (gfh - e f (f . gfh) / |f|^2)
        proj = np.einsum("ncp,ncp->np", f, gfh) / np.where(zero, 1.0, sq)
        gf = inv[:, None, :] * (gfh - e * f * proj[:, None, :])
        gf = gf.astype(fd.dtype, copy=False).reshape(n, c, h, w)
        return (gf if batched else gf[0],)

    return _result(np.ascontiguousarray(out), "similarity", (features,), fn)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
