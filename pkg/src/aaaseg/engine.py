"""Dense 5D tensor layers with explicit forward/backward, Adam and a plateau schedule.

Tensors are plain numpy arrays shaped (N, C, D, H, W). Each layer has a
``*_forward`` returning ``(out, cache)`` and a ``*_backward`` taking the
upstream gradient and that cache. Convolution is cross-correlation (no
kernel flip). Layers keep the dtype of their inputs, so the same code runs
in float32 for training and float64 for gradient checking.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "triple",
    "conv_out_dim",
    "conv3d",
    "conv3d_forward",
    "conv3d_backward",
    "conv3d_reference",
    "conv_transpose3d",
    "conv_transpose3d_forward",
    "conv_transpose3d_backward",
    "maxpool3d",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "relu_forward",
    "relu_backward",
    "sigmoid",
    "sigmoid_forward",
    "sigmoid_backward",
    "add_forward",
    "add_backward",
    "Parameter",
    "adam_step",
    "NonFiniteError",
    "PlateauSchedule",
    "plateau_step",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where only finite values are allowed."""


def triple(v, name="value"):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"{name} needs 3 components, got {v!r}")
    return t


def conv_out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _check5(x, what):
    if x.ndim != 5:
        raise ValueError(f"{what} must be a rank-5 (N, C, D, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv3d_forward(x, weight, bias=None, stride=1, pad=0):
    _check5(x, "conv3d input")
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be (Cout, Cin, kd, kh, kw), got {weight.shape}")
    n, cin, d, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ValueError(f"input has {cin} channels but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    k = weight.shape[2:]
    s = triple(stride, "stride")
    p = triple(pad, "pad")
    out_dims = tuple(conv_out_dim(a, kk, ss, pp) for a, kk, ss, pp in zip((d, h, w), k, s, p))
    if min(out_dims) < 1:
        raise ValueError(f"conv3d output dims {out_dims} not positive for input {(d, h, w)}, kernel {k}")
    wm = weight.reshape(cout, -1)
    length = out_dims[0] * out_dims[1] * out_dims[2]
    out = np.empty((n, cout, length), dtype=np.result_type(x, weight))
    cols_all = []
    for i in range(n):
        xp = np.pad(x[i], ((0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))) if any(p) else x[i]
        cols = kernels.im2col3d(xp, k, s, out_dims)
        np.matmul(wm, cols, out=out[i])
        cols_all.append(cols)
    if bias is not None:
        out += bias[None, :, None]
    out = out.reshape((n, cout) + out_dims)
    _check_finite(out, "conv3d output")
    cache = (x.shape, cols_all, weight, bias is not None, s, p, out_dims)
    return out, cache


def conv3d_backward(gout, cache):
    """Return (grad_input, grad_weight, grad_bias or None)."""
    in_shape, cols_all, weight, has_bias, s, p, out_dims = cache
    n, cin, d, h, w = in_shape
    cout = weight.shape[0]
    k = weight.shape[2:]
    wm = weight.reshape(cout, -1)
    g = gout.reshape(n, cout, -1)
    gw = np.zeros_like(wm)
    gx = np.empty(in_shape, dtype=np.result_type(gout, weight))
    padded = (d + 2 * p[0], h + 2 * p[1], w + 2 * p[2])
    for i in range(n):
        gw += g[i] @ cols_all[i].T
        gcols = wm.T @ g[i]
        gxp = kernels.col2im3d(gcols, cin, padded, k, s, out_dims)
        gx[i] = gxp[:, p[0]:p[0] + d, p[1]:p[1] + h, p[2]:p[2] + w]
    gb = g.sum(axis=(0, 2)) if has_bias else None
    return gx, gw.reshape(weight.shape), gb


def conv3d(x, weight, bias=None, stride=1, pad=0):
    return conv3d_forward(x, weight, bias, stride, pad)[0]


def conv3d_reference(x, weight, bias=None, stride=1, pad=0):
    """Direct-loop cross-correlation; slow, used as an oracle."""
    n, cin, d, h, w = x.shape
    cout, _, kd, kh, kw = weight.shape
    sd, sh, sw = triple(stride)
    pd, ph, pw = triple(pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = conv_out_dim(d, kd, sd, pd)
    ho = conv_out_dim(h, kh, sh, ph)
    wo = conv_out_dim(w, kw, sw, pw)
    out = np.zeros((n, cout, do, ho, wo), dtype=np.float64)
    for b in range(n):
        for co in range(cout):
            for z in range(do):
                for y in range(ho):
                    for xx in range(wo):
                        acc = 0.0 if bias is None else float(bias[co])
                        for ci in range(cin):
                            for a in range(kd):
                                for bb in range(kh):
                                    for e in range(kw):
                                        acc += float(xp[b, ci, z * sd + a, y * sh + bb, xx * sw + e]) * float(
                                            weight[co, ci, a, bb, e]
                                        )
                        out[b, co, z, y, xx] = acc
    return out


def conv_transpose3d_forward(x, weight, bias=None, stride=1, pad=0, output_padding=0):
    """Transposed convolution; ``weight`` is (Cin, Cout, kd, kh, kw).

    Output size per axis is (in - 1) * stride + k - 2 * pad + output_padding,
    which makes this the exact adjoint of :func:`conv3d_forward` with the
    same weight array, stride and pad.
    """
    _check5(x, "conv_transpose3d input")
    n, cin, d, h, w = x.shape
    if weight.ndim != 5 or weight.shape[0] != cin:
        raise ValueError(f"conv_transpose3d weight {weight.shape} does not match {cin} input channels")
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    k = weight.shape[2:]
    s = triple(stride, "stride")
    p = triple(pad, "pad")
    op = triple(output_padding, "output_padding")
    in_dims = (d, h, w)
    full = tuple((a - 1) * ss + kk + oo for a, ss, kk, oo in zip(in_dims, s, k, op))
    out_dims = tuple(f - 2 * pp for f, pp in zip(full, p))
    if min(out_dims) < 1:
        raise ValueError(f"conv_transpose3d output dims {out_dims} not positive")
    wm = weight.reshape(cin, -1)
    out = np.empty((n, cout) + out_dims, dtype=np.result_type(x, weight))
    for i in range(n):
        cols = wm.T @ x[i].reshape(cin, -1)
        grid = kernels.col2im3d(cols, cout, full, k, s, in_dims)
        out[i] = grid[:, p[0]:p[0] + out_dims[0], p[1]:p[1] + out_dims[1], p[2]:p[2] + out_dims[2]]
    if bias is not None:
        out += bias[None, :, None, None, None]
    _check_finite(out, "conv_transpose3d output")
    cache = (x, weight, bias is not None, s, p, k, in_dims)
    return out, cache


def conv_transpose3d_backward(gout, cache):
    x, weight, has_bias, s, p, k, in_dims = cache
    n, cin = x.shape[:2]
    wm = weight.reshape(cin, -1)
    gx = np.empty(x.shape, dtype=np.result_type(gout, weight))
    gw = np.zeros_like(wm)
    for i in range(n):
        gp = np.pad(gout[i], ((0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))) if any(p) else gout[i]
        gcols = kernels.im2col3d(gp, k, s, in_dims)
        xi = x[i].reshape(cin, -1)
        gx[i] = (wm @ gcols).reshape(x.shape[1:])
        gw += xi @ gcols.T
    gb = gout.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return gx, gw.reshape(weight.shape), gb


def conv_transpose3d(x, weight, bias=None, stride=1, pad=0, output_padding=0):
    return conv_transpose3d_forward(x, weight, bias, stride, pad, output_padding)[0]


# ---------------------------------------------------------------------------
# pooling, activations, fusion
# ---------------------------------------------------------------------------

def maxpool3d_forward(x, window=2, stride=2):
    """Max pooling; trailing voxels that do not fill a window are dropped.

    Ties go to the lowest flat index inside the window.
    """
    _check5(x, "maxpool3d input")
    if window > min(x.shape[2:]):
        raise ValueError(f"pool window {window} larger than input {x.shape[2:]}")
    out, idx = kernels.maxpool3d_forward(x, window, stride)
    return out, (x.shape, idx)


def maxpool3d_backward(gout, cache):
    in_shape, idx = cache
    return kernels.maxpool3d_backward(gout, idx, in_shape)


def maxpool3d(x, window=2, stride=2):
    return maxpool3d_forward(x, window, stride)[0]


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(gout, mask):
    # subgradient 0 at x == 0
    return np.where(mask, gout, gout.dtype.type(0))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_forward(x):
    y = sigmoid(x)
    # 1 - y computed as sigmoid(-x) keeps the derivative accurate in float32 when y -> 1
    return y, (y, sigmoid(-x))


def sigmoid_backward(gout, cache):
    y, one_minus_y = cache
    return gout * y * one_minus_y


def add_forward(a, b):
    if a.shape != b.shape:
        raise ValueError(f"elementwise_add shape mismatch {a.shape} vs {b.shape}")
    return a + b, None


def add_backward(gout, cache=None):
    return gout, gout


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Parameter:
    """A trainable array with its gradient and Adam moments."""

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, t={self.t})"


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place. Gradients are left for the caller to zero."""
    params = list(params)
    for prm in params:
        if not np.isfinite(prm.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {prm.name!r}")
    for prm in params:
        prm.t += 1
        g = prm.grad
        dt = prm.value.dtype.type
        prm.m *= dt(beta1)
        prm.m += dt(1 - beta1) * g
        prm.v *= dt(beta2)
        prm.v += dt(1 - beta2) * g * g
        mhat = prm.m / dt(1 - beta1 ** prm.t)
        vhat = prm.v / dt(1 - beta2 ** prm.t)
        prm.value -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau learning rate state.

    The rate is multiplied by ``factor`` once more than ``patience``
    consecutive epochs fail to beat the best loss by ``threshold``.
    """

    lr: float = 1e-4
    factor: float = 0.2
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")


def plateau_step(s, validation_loss):
    if not math.isfinite(validation_loss):
        raise NonFiniteError(f"validation loss is {validation_loss}")
    if validation_loss < s.best - s.threshold:
        s.best = validation_loss
        s.bad_epochs = 0
    else:
        s.bad_epochs += 1
        if s.bad_epochs > s.patience:
            s.lr = max(s.lr * s.factor, s.min_lr)
            s.bad_epochs = 0
    return s.lr
