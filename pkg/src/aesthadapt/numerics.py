"""Tensors with reverse-mode differentiation over a small, fixed layer vocabulary.

Only what the aesthetics network needs is supported: 1x1/3x3 convolution,
batch normalization, (P)ReLU, dropout, fully-connected layers, adaptive
average pooling and the MSE loss. There is no broadcasting; binary ops
require identical shapes.

Gradients are computed by :func:`backward`, which walks the graph once and
returns a fresh map from every ``requires_grad`` leaf to its gradient.
"""

from __future__ import annotations

import zlib
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """Row-major array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else getattr(data, "dtype", DEFAULT_DTYPE))
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class RandomSource:
    """Seeded stream built on numpy's PCG64 generator.

    Child streams are derived from ``(seed, *key)`` through ``SeedSequence``
    spawn keys, so ``RandomSource(7).child("u3", 2)`` is the same stream no
    matter what else has been drawn from the parent.
    """

    ALGORITHM = "numpy.random.PCG64"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key) -> "RandomSource":
        ints = tuple(k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in key)
        return RandomSource(self.seed, self.key + ints)

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: RandomSource, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ----------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``weight[O,C,kh,kw]``.

    Output extent is ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"unsupported kernel size {kh}x{kw}")
    span_h, span_w = H + 2 * padding - kh, W + 2 * padding - kw
    if span_h < 0 or span_w < 0:
        raise ShapeError(f"conv input {H}x{W} too small for a {kh}x{kw} kernel with padding {padding}")
    # trailing rows/cols that do not fill a whole stride are dropped
    oh, ow = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, oh, ow)
    wm = weight.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(B, oh, ow, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _kernels.col2im(gm @ wm, xp.shape, kh, kw, stride, oh, ow)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return _result(out, (x, weight), backward, "conv2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalization over ``[B,C]`` or ``[B,C,H,W]`` input.

    Returns the output and the (possibly updated) running statistics; the
    arrays passed in are never modified. Training mode normalizes with the
    biased batch variance and folds the unbiased one into the running
    estimate, as torch does.
    """
    if x.ndim not in (2, 4):
        raise ShapeError("batch_norm2d expects [B,C] or [B,C,H,W]")
    C = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise ShapeError(f"batch_norm2d {name} has shape {arr.shape}, expected ({C},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    n = x.data.size // C

    if training:
        if n == 1:
            raise ShapeError("batch_norm2d in training mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * var * n / (n - 1)).astype(running_var.dtype)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        new_mean, new_var = running_mean, running_var

    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (invstd.reshape(bshape) / n) * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "batch_norm2d"), new_mean, new_var


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def prelu(x: Tensor, alpha: Tensor | float) -> Tensor:
    """``x`` where non-negative, ``alpha * x`` elsewhere; ``alpha`` is a scalar or per-channel."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=x.dtype))
    if not np.isfinite(alpha.data).all():
        raise NumericalError("prelu alpha must be finite")
    if alpha.data.size == 1:
        a = alpha.data.reshape(())
        red = None
    else:
        if x.ndim < 2 or alpha.data.shape != (x.shape[1],):
            raise ShapeError("per-channel prelu alpha must match the channel axis")
        a = alpha.data.reshape((1, -1) + (1,) * (x.ndim - 2))
        red = (0,) + tuple(range(2, x.ndim))
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data).astype(x.dtype)

    def backward(g):
        gx = np.where(pos, g, a * g) if x.requires_grad else None
        ga = None
        if alpha.requires_grad:
            neg = np.where(pos, 0, g * x.data)
            ga = neg.sum().reshape(alpha.shape) if red is None else neg.sum(axis=red)
        return gx, ga

    return _result(out, (x, alpha), backward, "prelu")


def dropout(x: Tensor, p: float, training: bool, rng: RandomSource | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval mode is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a RandomSource")
    keep = rng.random(x.shape) >= p
    scale = (keep * (1.0 / (1.0 - p))).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError("linear expects x[B,F], weight[G,F], bias[G]")
    if x.shape[1] != weight.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: x{x.shape}, weight{weight.shape}, bias{bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return (
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _result(out, (x, weight, bias), backward, "linear")


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over windows ``[floor(i*H/out), ceil((i+1)*H/out))`` on each axis."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("adaptive pooling targets must be positive")
    if x.ndim != 4:
        raise ShapeError("adaptive_avg_pool2d expects [B,C,H,W]")
    H, W = x.shape[2:]
    if (H, W) == (out_h, out_w):
        return x
    out = _kernels.adaptive_pool(x.data, out_h, out_w)
    return _result(out, (x,), lambda g: (_kernels.adaptive_pool_grad(g, H, W),), "adaptive_avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B,C,H,W] -> [B,C]`` spatial mean."""
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(x.dtype),), "global_avg_pool")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """``x * scale[c] + shift[c]`` with constant per-channel coefficients."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    s = np.asarray(scale, dtype=x.dtype).reshape(shape)
    t = np.asarray(shift, dtype=x.dtype).reshape(shape)
    return _result(x.data * s + t, (x,), lambda g: (g * s,), "channel_affine")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse length mismatch: {pred.shape} vs {target.shape}")
    if pred.data.size == 0:
        raise ShapeError("mse of an empty batch")
    diff = pred.data - target
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    return _result(out, (pred,), lambda g: ((2.0 / n) * g * diff,), "mse")


# ----------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar and return ``{leaf: gradient}``.

    Every leaf reached with ``requires_grad`` set gets an entry (an input
    image included, if it was created with ``requires_grad=True``), and its
    ``.grad`` is overwritten rather than accumulated. The graph is released
    afterwards; calling this again on the same loss raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward call")
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                g = np.zeros_like(node.data) if g is None else g.astype(node.dtype, copy=False)
                if not np.isfinite(g).all():
                    raise NumericalError(f"non-finite gradient for {node!r}")
                node.grad = g
                result[node] = g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        node._consumed = True
        node._backward = None
        node._parents = ()
    return result


class GradCheckResult(NamedTuple):
    max_error: float
    checked: int
    excluded: int


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: RandomSource | None = None,
) -> GradCheckResult:
    """Compare the analytic gradient of scalar ``f`` at ``point`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates where ``f`` has a kink within ``2*eps`` (one-sided slopes fail
    to scale linearly with the step) are excluded and counted separately.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    analytic = backward(f(x)).get(x, np.zeros_like(base)).reshape(-1)

    def value(arr):
        v = float(f(Tensor(arr.reshape(base.shape), dtype=np.float64)).data)
        if not np.isfinite(v):
            raise NumericalError("f is non-finite at a perturbed point")
        return v

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = (rng or RandomSource(0)).choice(flat.size, size=max_coords, replace=False)

    f0 = value(flat)
    worst, checked, excluded = 0.0, 0, 0
    for i in coords:
        at = {}
        for k in (-2, -1, -0.5, 0.5, 1, 2):
            p = flat.copy()
            p[i] += k * eps
            at[k] = value(p)
        numeric = (at[1] - at[-1]) / (2 * eps)
        # one-sided slope gap, D(h) = h * f'' for smooth f
        gap = {k: (at[k] - 2 * f0 + at[-k]) / (k * eps) for k in (0.5, 1, 2)}
        tol = 1e-6 * max(1.0, abs(analytic[i]))
        if abs(gap[2] - 2 * gap[1]) > tol or abs(gap[1] - 2 * gap[0.5]) > tol:
            excluded += 1
            continue
        checked += 1
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return GradCheckResult(worst, checked, excluded)
