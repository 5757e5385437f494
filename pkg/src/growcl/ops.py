"""Dense-tensor numerics: forward passes and hand-derived backward passes.

Everything is float64 and pure: identical inputs give bitwise-identical
outputs, so layer outputs can be fingerprinted byte-for-byte.  Each forward
returns ``(output, cache)`` and has a matching ``*_backward(dout, cache)``
returning gradients for every differentiable input.

Documented tie-breaks (oracles in the tests rely on these):
  * relu subgradient at exactly 0 is 0;
  * maxpool routes the gradient to the first maximal element in row-major
    window order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Inputs whose shapes cannot be combined by the requested operation."""


@dataclass
class Tensor:
    """A dense float64 array with an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                raise ShapeError(
                    f"grad shape {self.grad.shape} != data shape {self.data.shape}"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} contains non-finite values")


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def _conv_out_size(extent: int, k: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} with pad {pad} exceeds input extent {extent}")
    if span % stride != 0:
        raise ShapeError(
            f"(extent {extent} + 2*pad {pad} - kernel {k}) not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, tuple]:
    """[N,C,H,W] -> [N, C*k*k, Ho*Wo] patch matrix (copy, C-contiguous)."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, pad)
    wo = _conv_out_size(w, k, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    cols = np.ascontiguousarray(patches).reshape(n, c * k * k, ho * wo)
    return cols, (x.shape, ho, wo)


def _col2im(cols: np.ndarray, x_padded_shape: tuple, k: int, stride: int, pad: int,
            out_hw: tuple[int, int]) -> np.ndarray:
    """Scatter-add [N, C*k*k, Ho*Wo] columns back to the unpadded image."""
    n, c, hp, wp = x_padded_shape
    ho, wo = out_hw
    grid = cols.reshape(n, c, k, k, ho, wo)
    x = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        h_end = ki + stride * ho
        for kj in range(k):
            w_end = kj + stride * wo
            x[:, :, ki:h_end:stride, kj:w_end:stride] += grid[:, :, ki, kj]
    if pad > 0:
        x = x[:, :, pad:hp - pad, pad:wp - pad]
    return x


def conv2d(x, filters, bias, stride: int = 1, pad: int = 0):
    """Cross-correlate [N,Cin,H,W] with [Cout,Cin,k,k] filters plus bias.

    Returns ``(out [N,Cout,Ho,Wo], cache)``.
    """
    x, w, b = _as_array(x), _as_array(filters), _as_array(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/filters, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, cin, h, wd = x.shape
    cout, cin_f, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")
    if cin != cin_f:
        raise ShapeError(f"input channels {cin} != filter channels {cin_f}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    cols, (xp_shape, ho, wo) = _im2col(x, kh, stride, pad)
    wm = w.reshape(cout, -1)
    out = np.matmul(wm, cols)            # [N, Cout, Ho*Wo] via broadcasting
    out += b[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    cache = (cols, w.shape, wm, xp_shape, kh, stride, pad, (ho, wo))
    return out, cache


def conv2d_backward(dout: np.ndarray, cache):
    """Gradients (dx, dfilters, dbias) for conv2d."""
    cols, w_shape, wm, xp_shape, k, stride, pad, out_hw = cache
    n, cout, ho, wo = dout.shape
    go = dout.reshape(n, cout, ho * wo)
    db = go.sum(axis=(0, 2))
    dwm = np.einsum("nop,ncp->oc", go, cols)
    dw = dwm.reshape(w_shape)
    dcols = np.matmul(wm.T, go)          # [N, Cin*k*k, Ho*Wo]
    dx = _col2im(dcols, xp_shape, k, stride, pad, out_hw)
    return dx, dw, db


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def linear(x, weight, bias):
    """Affine map [N,D] @ [O,D]^T + [O] -> [N,O]."""
    x, w, b = _as_array(x), _as_array(weight), _as_array(bias)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-d input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"inner dimensions disagree: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
    out = x @ w.T + b
    return out, (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    dx = dout @ w
    dw = dout.T @ x
    db = dout.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# relu / maxpool
# ---------------------------------------------------------------------------

def relu(x):
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    x = _as_array(x)
    mask = x > 0
    out = np.where(mask, x, 0.0)
    return out, mask


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return np.where(cache, dout, 0.0)


def maxpool2d(x, k: int, stride: int | None = None):
    """Windowed max over [N,C,H,W]; ties go to the first row-major element."""
    x = _as_array(x)
    if stride is None:
        stride = k
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)           # first max in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (x.shape, k, stride, arg)
    return np.ascontiguousarray(out), cache


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, k, stride, arg = cache
    n, c, h, w = x_shape
    ho, wo = arg.shape[2], arg.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    ki, kj = np.divmod(arg, k)
    rows = (np.arange(ho)[None, None, :, None] * stride + ki)
    colz = (np.arange(wo)[None, None, None, :] * stride + kj)
    ns = np.arange(n)[:, None, None, None]
    cs = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ns, cs, rows, colz), dout)
    return dx


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label], stabilized by max subtraction.

    Returns ``(loss, dlogits)`` where dlogits is the gradient of the mean
    loss with respect to the logits.
    """
    z = _as_array(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {z.shape}")
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} != ({n},)")
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = y[(y < 0) | (y >= k)][0]
        raise ValueError(f"label {bad} outside [0, {k})")
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    logsumexp = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - logsumexp
    loss = float(-logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, dlogits


# ---------------------------------------------------------------------------
# group normalization (optional per-task layer)
# ---------------------------------------------------------------------------

def group_norm(x, scale, shift, groups: int = 1, eps: float = 1e-5):
    """Normalize [N,C,H,W] per sample over channel groups, then affine."""
    x = _as_array(x)
    g, b = _as_array(scale), _as_array(shift)
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    if g.shape != (c,) or b.shape != (c,):
        raise ShapeError(f"affine params must be shape ({c},)")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(n, c, h, w)
    out = xhat * g[None, :, None, None] + b[None, :, None, None]
    return out, (xhat, inv, g, (n, c, h, w), groups)


def group_norm_backward(dout: np.ndarray, cache):
    xhat, inv, g, shape, groups = cache
    n, c, h, w = shape
    dshift = dout.sum(axis=(0, 2, 3))
    dscale = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = (dout * g[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dxg = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                 - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dxg.reshape(n, c, h, w), dscale, dshift


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float, momentum: float,
             velocity: np.ndarray) -> None:
    """v <- momentum*v + grad; param <- param - lr*v  (both updated in place)."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} disagree"
        )
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0,1), got {momentum}")
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

class GradCheckResult(NamedTuple):
    max_rel_error: float
    worst_coord: tuple[int, ...]
    analytic: float
    numeric: float


def finite_diff_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                      point: np.ndarray, eps: float = 1e-5) -> GradCheckResult:
    """Central differences vs the analytic gradient returned by ``fn``.

    ``fn(point)`` must return ``(scalar value, gradient wrt point)``.  The
    relative error per coordinate is |analytic - numeric| / max(|numeric|,
    1e-8); a coordinate where both are below 1e-10 in absolute terms counts
    as exact.  Returns the worst coordinate.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    point = np.asarray(point, dtype=np.float64)
    _, analytic = fn(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != point shape {point.shape}")
    worst = GradCheckResult(0.0, (0,) * point.ndim if point.ndim else (), 0.0, 0.0)
    it = np.nditer(point, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = point[idx]
        point[idx] = saved + eps
        up, _ = fn(point)
        point[idx] = saved - eps
        dn, _ = fn(point)
        point[idx] = saved
        numeric = (up - dn) / (2.0 * eps)
        a = float(analytic[idx])
        diff = abs(a - numeric)
        if diff < 1e-10:
            continue
        rel = diff / max(abs(numeric), 1e-8)
        if rel > worst.max_rel_error:
            worst = GradCheckResult(rel, idx, a, numeric)
    return worst
