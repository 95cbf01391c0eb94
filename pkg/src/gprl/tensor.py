"""Dense n-d arrays with a reverse-mode differentiation tape.

Fixed conventions (tests depend on them):

* storage dtype is float32 unless a tensor is created with another dtype;
  reductions (sum, mean, l2_norm) accumulate in float64 before casting back,
* abs uses subgradient 0 at exactly 0; leaky_relu uses the negative-side
  slope at exactly 0,
* there is no implicit broadcasting -- operand shapes must match exactly
  (use reshape/gather to expand explicitly),
* the graph is rebuilt on every forward pass (define-by-run); backward
  visits nodes in strictly decreasing creation order, which is a valid
  topological order by construction.

Ops never mix dtypes: all inputs of an op must share one dtype, and the
result keeps it. Gradient checking is meaningful at h=1e-3 only in float64,
so validation code builds its models with dtype=np.float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class Node:
    """One tape entry: the op that produced a tensor."""

    __slots__ = ("nid", "op", "parents", "backward")

    def __init__(self, op: str, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.nid = next(_ids)
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Value copy that never receives gradient."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False).reshape(self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- ops ------------------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        _check_same("add", self, other)
        return _unary_result("add", self.data + other.data, (self, other),
                             lambda g: (g, g))

    def __sub__(self, other: "Tensor") -> "Tensor":
        _check_same("sub", self, other)
        return _unary_result("sub", self.data - other.data, (self, other),
                             lambda g: (g, -g))

    def __mul__(self, other: "Tensor") -> "Tensor":
        _check_same("mul", self, other)
        a, b = self.data, other.data
        return _unary_result("mul", a * b, (self, other),
                             lambda g: (g * b, g * a))

    def __neg__(self) -> "Tensor":
        return self.scale(-1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def scale(self, c: float) -> "Tensor":
        """Multiply by a Python constant (not differentiated w.r.t. c)."""
        c = float(c)
        out = (self.data * np.asarray(c, dtype=self.data.dtype))
        return _unary_result("scale", out, (self,), lambda g: (g * c,))

    def sum(self) -> "Tensor":
        val = np.asarray(np.sum(self.data, dtype=np.float64), dtype=self.data.dtype)
        shape, dt = self.data.shape, self.data.dtype
        return _unary_result("sum", val, (self,),
                             lambda g: (np.full(shape, g.reshape(()), dtype=dt),))

    def mean(self) -> "Tensor":
        n = self.data.size
        val = np.asarray(np.sum(self.data, dtype=np.float64) / n, dtype=self.data.dtype)
        shape, dt = self.data.shape, self.data.dtype
        return _unary_result("mean", val, (self,),
                             lambda g: (np.full(shape, g.reshape(()) / n, dtype=dt),))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)  # sign(0) == 0: subgradient 0 at the kink
        return _unary_result("abs", np.abs(self.data), (self,),
                             lambda g: (g * sign,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _unary_result("exp", out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            idx = int(np.argmax(self.data.ravel() <= 0))
            raise ValueError(f"log of non-positive value at flat index {idx}")
        x = self.data
        return _unary_result("log", np.log(x), (self,), lambda g: (g / x,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _unary_result("tanh", out, (self,), lambda g: (g * (1.0 - out * out),))

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        # at exactly 0 the negative-side slope applies
        factor = np.where(self.data > 0, 1.0, slope).astype(self.data.dtype)
        return _unary_result("leaky_relu", self.data * factor, (self,),
                             lambda g: (g * factor,))

    def square(self) -> "Tensor":
        x = self.data
        return _unary_result("square", x * x, (self,), lambda g: (g * (2.0 * x),))

    def l2_norm(self) -> "Tensor":
        sq = np.sum(np.square(self.data, dtype=np.float64))
        norm = float(np.sqrt(sq))
        val = np.asarray(norm, dtype=self.data.dtype)
        x = self.data

        def bwd(g):
            if norm == 0.0:  # kink at the origin: subgradient 0
                return (np.zeros_like(x),)
            return (g.reshape(()) * (x / np.asarray(norm, dtype=x.dtype)),)

        return _unary_result("l2_norm", val, (self,), bwd)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        old = self.data.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ValueError(f"cannot reshape {old} into {shape}") from None
        return _unary_result("reshape", out.copy(), (self,),
                             lambda g: (g.reshape(old),))


# -- helpers -------------------------------------------------------------------


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch for {op}: {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch for {op}: {a.data.dtype} vs {b.data.dtype}")


def _unary_result(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
                  backward: Callable[[np.ndarray], tuple]) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(np.asarray(data), requires_grad=req)
    if req:
        out.node = Node(op, parents, backward)
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- n-ary ops -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (2d,2d), (2d,1d) and (1d,2d) operands."""
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch for matmul: {a.data.dtype} vs {b.data.dtype}")
    an, bn = a.data.ndim, b.data.ndim
    ad, bd = a.data, b.data
    if an == 2 and bn == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"shape mismatch for matmul: {ad.shape} vs {bd.shape}")
        out = ad @ bd
        bwd = lambda g: (g @ bd.T, ad.T @ g)
    elif an == 2 and bn == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"shape mismatch for matmul: {ad.shape} vs {bd.shape}")
        out = ad @ bd
        bwd = lambda g: (np.outer(g, bd), ad.T @ g)
    elif an == 1 and bn == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"shape mismatch for matmul: {ad.shape} vs {bd.shape}")
        out = ad @ bd
        bwd = lambda g: (bd @ g, np.outer(ad, g))
    else:
        raise ValueError(f"matmul supports 2d/1d operands, got ndim {an} and {bn}")
    return _unary_result("matmul", out, (a, b), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    dt = tensors[0].data.dtype
    for t in tensors:
        if t.data.dtype != dt:
            raise ValueError("dtype mismatch for concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _unary_result("concat", out, tuple(tensors), bwd)


def gather(x: Tensor, indices) -> Tensor:
    """Flat-index gather: out[pos] = x.flat[indices[pos]], out.shape == indices.shape.

    Covers slicing, permutation and explicit broadcast-expansion. Backward
    scatter-adds into the source positions.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.size):
        raise ValueError(f"gather index out of range for tensor of size {x.data.size}")
    out = x.data.ravel()[idx.ravel()].reshape(idx.shape)
    size, shape, dt = x.data.size, x.data.shape, x.data.dtype

    def bwd(g):
        acc = np.zeros(size, dtype=dt)
        np.add.at(acc, idx.ravel(), g.ravel())
        return (acc.reshape(shape),)

    return _unary_result("gather", out, (x,), bwd)


def linear2d(x: Tensor, row_map: np.ndarray, col_map: np.ndarray) -> Tensor:
    """Apply fixed linear maps to the rows and columns of a 2-d tensor.

    out = row_map @ x @ col_map.T; gradient is the adjoint sandwich.
    bicubic downsampling and separable convolutions are built on this.
    """
    if x.data.ndim != 2:
        raise ValueError(f"linear2d expects a 2-d tensor, got shape {x.data.shape}")
    r = np.asarray(row_map, dtype=x.data.dtype)
    c = np.asarray(col_map, dtype=x.data.dtype)
    if r.shape[1] != x.data.shape[0] or c.shape[1] != x.data.shape[1]:
        raise ValueError(
            f"linear2d maps {r.shape}/{c.shape} do not fit tensor {x.data.shape}")
    out = r @ x.data @ c.T

    def bwd(g):
        return (r.T @ g @ c,)

    return _unary_result("linear2d", out, (x,), bwd)


def _reflect_conv_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Dense matrix of 1-d correlation with mirror (no edge repeat) padding."""
    k = np.asarray(kernel, dtype=np.float64)
    radius = (len(k) - 1) // 2
    if len(k) % 2 != 1:
        raise ValueError("separable kernels must have odd length")
    m = np.zeros((n, n))
    for i in range(n):
        for t in range(len(k)):
            j = i + t - radius
            # mirror indices: -1 -> 1, n -> n-2
            while j < 0 or j >= n:
                if j < 0:
                    j = -j
                else:
                    j = 2 * (n - 1) - j
            m[i, j] += k[t]
    return m


def conv2d_separable(x: Tensor, kernel) -> Tensor:
    """Separable 2-d convolution with reflect padding.

    kernel: a 1-d kernel applied along both axes, or a (rows, cols) pair of
    1-d kernels. Kernels are fixed constants; gradients flow to x only.
    """
    if isinstance(kernel, tuple):
        kr, kc = kernel
    else:
        kr = kc = kernel
    h, w = x.data.shape
    if len(np.atleast_1d(kr)) > 2 * h - 1 or len(np.atleast_1d(kc)) > 2 * w - 1:
        raise ValueError(f"kernel too large for image of shape {x.data.shape}")
    mr = _reflect_conv_matrix(h, np.atleast_1d(kr))
    mc = _reflect_conv_matrix(w, np.atleast_1d(kc))
    return linear2d(x, mr, mc)


# -- backward pass -------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate .grad on every requires-grad leaf reachable from root.

    Repeated calls accumulate. The traversal visits nodes in strictly
    decreasing creation order; a node's gradient is summed over all of its
    consumers before its own backward function runs.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar-shaped, got shape {root.shape}")
    seed = np.ones_like(root.data)
    if root.node is None:
        if root.requires_grad:
            root._accum_grad(seed)
        return

    # collect the reachable subgraph
    nodes: dict[int, Node] = {}
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node.nid in nodes:
            continue
        nodes[node.nid] = node
        for p in node.parents:
            if p.node is not None:
                stack.append(p.node)

    pending: dict[int, np.ndarray] = {root.node.nid: seed}
    for nid in sorted(nodes, reverse=True):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        grads = node.backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None:
                continue
            pg = np.asarray(pg)
            if parent.node is not None:
                prev = pending.get(parent.node.nid)
                pending[parent.node.nid] = pg if prev is None else prev + pg
            elif parent.requires_grad:
                parent._accum_grad(pg)


# -- finite-difference validation ------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    excluded: tuple[int, ...]  # flat coordinates skipped as kink crossings
    analytic: np.ndarray
    numeric: np.ndarray

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               kink_tol: float = 1e-2) -> GradCheckResult:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences.

    Reported error is max over coordinates of |analytic - central| /
    max(1, |central|). Coordinates where the left and right one-sided slopes
    disagree by more than kink_tol (relative) are excluded as kink crossings
    of abs/leaky_relu and reported instead of scored. Run with float64
    tensors; float32 forward noise at h=1e-3 swamps a 1e-4 threshold.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = Tensor(x.data.copy(), requires_grad=True)
    out = f(base)
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    backward(out)
    analytic = (np.zeros_like(base.data) if base.grad is None else base.grad).ravel()
    f0 = out.item()

    flat = x.data.ravel()
    numeric = np.zeros(flat.size, dtype=np.float64)
    excluded: list[int] = []
    max_err = 0.0
    for i in range(flat.size):
        for sign, name in ((1.0, "plus"), (-1.0, "minus")):
            pert = flat.copy()
            pert[i] += sign * h
            val = f(Tensor(pert.reshape(x.data.shape))).item()
            if not np.isfinite(val):
                raise ValueError(f"non-finite value at coordinate {i} ({name} side)")
            if sign > 0:
                fp = val
            else:
                fm = val
        central = (fp - fm) / (2.0 * h)
        numeric[i] = central
        left = (f0 - fm) / h
        right = (fp - f0) / h
        if abs(left - right) > kink_tol * max(1.0, abs(left), abs(right)):
            excluded.append(i)
            continue
        err = abs(float(analytic[i]) - central) / max(1.0, abs(central))
        if not np.isfinite(err):
            raise ValueError(f"non-finite gradient comparison at coordinate {i}")
        max_err = max(max_err, err)
    return GradCheckResult(max_err, tuple(excluded), analytic.copy(), numeric)
