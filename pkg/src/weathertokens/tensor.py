"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it holds only the primitives the
forecasting model needs (convolution, batch/layer normalisation, attention
building blocks, MSE). Every primitive records a backward rule when any input
requires a gradient; :func:`backward` walks the recorded graph in reverse
topological order and accumulates gradients additively across fan-out.

Broadcasting is not supported beyond bias addition and scalar scaling; any
other shape mismatch raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 5
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5

_PRECISIONS = {"32": np.float32, "64": np.float64}
_dtype: type = np.float32
_grad_enabled = True
_relu_trace: list | None = None


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values."""


def get_dtype() -> type:
    return _dtype


def set_precision(mode: str) -> None:
    """Select the floating type for newly created tensors ("32" or "64")."""
    global _dtype
    try:
        _dtype = _PRECISIONS[str(mode)]
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}; expected '32' or '64'") from None


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    global _dtype
    prev = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def trace_relu() -> Iterator[list]:
    """Collect the sign mask of every relu evaluated inside the block."""
    global _relu_trace
    prev = _relu_trace
    _relu_trace = []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


class Tensor:
    """An n-dimensional array (rank <= 5) that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class ComputeGraph:
    """Operation records reachable from an output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def build_graph(output: Tensor) -> ComputeGraph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return ComputeGraph(order)


def backward(loss: Tensor) -> ComputeGraph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {loss.shape}")
    graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return Tensor._result(a.data * s, (a,), lambda g: (g * s,), "scale")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return Tensor._result(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),), "sum",
    )


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over equal leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        return (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None)

    return Tensor._result(ad @ bd, (a, b), _back, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def _back(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, d_in) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), _back, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of a B x C x H x W batch."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weights, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, weights expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {c_out} filters")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col: rows are output pixels (n, ho, wo), columns are (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def _back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[..., i, j]
            gx = np.ascontiguousarray(gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), _back, "conv2d")


class RunningStats:
    """Per-channel running mean/variance for batch normalisation."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, dtype=None):
        self.momentum = momentum
        self.mean = np.zeros(channels, dtype=dtype or _dtype)
        self.var = np.ones(channels, dtype=dtype or _dtype)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var).astype(self.var.dtype)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation of a B x C x H x W batch.

    In training mode the batch moments are used and ``running`` is updated
    (unbiased variance, exponential moving average); in eval mode the running
    moments are used unchanged.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d: gamma/beta must have shape ({c},)")
    xd = x.data
    axes = (0, 2, 3)
    count = n * h * w
    if training:
        if count < 2:
            raise DegenerateBatchError(f"batch_norm2d: {count} value(s) per channel in training mode")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running.update(mu, var * (count / (count - 1)))
    else:
        mu, var = running.mean.astype(xd.dtype), running.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + xd.dtype.type(eps))).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def _back(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                s1 = gxhat.sum(axis=axes)[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (inv[None, :, None, None] / count) * (count * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), _back, "batch_norm2d")


def adaptive_avg_pool2d(x: Tensor) -> Tensor:
    """Global average over the spatial plane: B x C x H x W -> B x C x 1 x 1."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("adaptive_avg_pool2d: empty spatial plane")
    area = h * w
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _back(g):
        return (np.broadcast_to(g / g.dtype.type(area), x.shape).copy(),)

    return Tensor._result(out, (x,), _back, "adaptive_avg_pool2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least two features")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def _back(g):
        lead = g.reshape(-1, d)
        ggamma = (lead * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gbeta = lead.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            s1 = gxhat.sum(axis=-1, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=-1, keepdims=True)
            gx = (inv / d) * (d * gxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), _back, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (x,), _back, "softmax")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    target = as_tensor(target)
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def _back(g):
        gp = (2.0 / n) * diff * g
        return gp.astype(pred.dtype, copy=False), (-gp).astype(target.dtype, copy=False)

    return Tensor._result(out, (pred, target), _back, "mse_loss")


# ---------------------------------------------------------------------------
# finite-difference verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> float:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``tensors`` are perturbed in place. When ``max_entries`` is given, at most
    that many randomly chosen entries per tensor are probed. With
    ``skip_kinks`` an entry whose stencil flips the sign of any relu input is
    replaced by another entry, since the difference quotient is meaningless
    across a kink. Returns the max relative error over all probed entries.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with trace_relu() as base_masks:
        loss = loss_fn()
    backward(loss)

    def evaluate() -> tuple[float, bool]:
        with trace_relu() as masks:
            value = float(loss_fn().data)
        same = len(masks) == len(base_masks) and all(np.array_equal(a, b) for a, b in zip(masks, base_masks))
        return value, same

    worst = 0.0
    for t in tensors:
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        flat = t.data.reshape(-1)
        limit = flat.size if max_entries is None else min(max_entries, flat.size)
        order = rng.permutation(flat.size) if limit < flat.size else np.arange(flat.size)
        probed = 0
        for i in order:
            if probed == limit:
                break
            orig = flat[i]
            flat[i] = orig + eps
            up, up_ok = evaluate()
            flat[i] = orig - eps
            down, down_ok = evaluate()
            flat[i] = orig
            if skip_kinks and not (up_ok and down_ok):
                continue
            probed += 1
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(np.asarray(analytic[i]), np.asarray(numeric))))
    return worst


def gradient_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[Sequence[int]],
    eps: float = 1e-3,
    seed: int = 0,
    kink_margin: float = 1e-2,
) -> float:
    """Max relative gradient error of ``op`` at a random 64-bit point.

    Inputs are standard normal with entries closer than ``kink_margin`` to
    zero redrawn, keeping ReLU-style kinks out of the difference stencil. A
    non-scalar output is reduced with a fixed random projection.
    """
    rng = np.random.default_rng(seed)
    with precision("64"):
        arrays = []
        for shape in input_shapes:
            a = rng.standard_normal(shape)
            near = np.abs(a) < kink_margin
            while near.any():
                a[near] = rng.standard_normal(int(near.sum()))
                near = np.abs(a) < kink_margin
            arrays.append(a)
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        probe = op(*tensors)
        proj = Tensor(rng.standard_normal(probe.shape))

        def loss_fn() -> Tensor:
            out = op(*tensors)
            return out if out.data.size == 1 else sum(mul(out, proj))

        return check_gradients(loss_fn, tensors, eps=eps)
