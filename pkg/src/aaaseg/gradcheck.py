"""Central-difference gradient checking for the engine layers and the loss.

An op is a pair ``(forward, backward)``: ``forward(*inputs) -> (out, cache)``
and ``backward(gout, cache) -> tuple of input grads`` (``None`` for inputs
that are not differentiated, e.g. a target mask). The scalar probed is
``sum(out * r)`` for a fixed random cotangent ``r``.

In ``"float64"`` mode both the analytic and numeric sides run in float64.
In ``"float32"`` mode the analytic gradient is computed in float32 and
compared against float64 central differences.
"""
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine
from .losses import weighted_dice_loss_backward, weighted_dice_loss_forward

__all__ = ["GradOp", "grad_check", "relative_error", "standard_cases", "run_suite"]


@dataclass(frozen=True)
class GradOp:
    name: str
    forward: Callable
    backward: Callable
    # indices of inputs to probe; None probes every input the backward returns a grad for
    wrt: Sequence[int] = None


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(op, inputs, mode="float64", seed=0, h=1e-4):
    """Return the max element-wise relative error between analytic and numeric grads."""
    if mode not in ("float64", "float32"):
        raise ValueError(f"mode must be 'float64' or 'float32', got {mode!r}")
    rng = np.random.default_rng(seed)
    ref = [np.array(a, dtype=np.float64) for a in inputs]
    adt = np.float64 if mode == "float64" else np.float32
    out, cache = op.forward(*[a.astype(adt) for a in ref])
    out = np.asarray(out)
    r = rng.standard_normal(out.shape)
    grads = op.backward(r.astype(adt) if out.ndim else adt(r), cache)
    if not isinstance(grads, tuple):
        grads = (grads,)

    def probe(args):
        return np.asarray(op.forward(*args)[0], dtype=np.float64)

    worst = 0.0
    which = op.wrt if op.wrt is not None else [i for i, g in enumerate(grads) if g is not None]
    for i in which:
        analytic = np.asarray(grads[i], dtype=np.float64)
        if analytic.shape != ref[i].shape:
            raise ValueError(f"{op.name}: grad {i} shape {analytic.shape} != input shape {ref[i].shape}")
        numeric = np.zeros_like(ref[i])
        x = ref[i]
        for j in range(x.size):
            orig = x.flat[j]
            step = h * max(1.0, abs(orig))
            x.flat[j] = orig + step
            fp = probe(ref)
            x.flat[j] = orig - step
            fm = probe(ref)
            x.flat[j] = orig
            # difference before reducing so untouched outputs cancel exactly
            numeric.flat[j] = np.sum((fp - fm) * r) / (2 * step)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


# ---------------------------------------------------------------------------
# the standard suite
# ---------------------------------------------------------------------------

def _conv_op(stride, pad):
    def fwd(x, w, b):
        return engine.conv3d_forward(x, w, b, stride, pad)

    return GradOp(f"conv3d(stride={stride}, pad={pad})", fwd, engine.conv3d_backward)


def _convt_op(stride, pad):
    def fwd(x, w, b):
        return engine.conv_transpose3d_forward(x, w, b, stride, pad)

    return GradOp(f"conv_transpose3d(stride={stride}, pad={pad})", fwd, engine.conv_transpose3d_backward)


def _separated(rng, shape, gap=1e-2):
    """Random values whose pairwise gaps are at least ``gap`` (no near-ties for max)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0, gap / 4, n)
    return vals.reshape(shape)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) < margin
    return x


def _loss_op():
    return GradOp("weighted_dice_loss", weighted_dice_loss_forward, weighted_dice_loss_backward, wrt=(0,))


OPS = {
    "conv3d": lambda rng: (
        _conv_op(int(rng.integers(1, 3)), int(rng.integers(0, 2))),
        [rng.standard_normal((2, 2, 4, 4, 3)), rng.standard_normal((3, 2, 3, 2, 3)), rng.standard_normal(3)],
    ),
    "conv_transpose3d": lambda rng: (
        _convt_op(2, int(rng.integers(0, 2))),
        [rng.standard_normal((2, 2, 2, 3, 2)), rng.standard_normal((2, 3, 4, 4, 4)), rng.standard_normal(3)],
    ),
    "maxpool3d": lambda rng: (
        GradOp("maxpool3d", engine.maxpool3d_forward, lambda g, c: engine.maxpool3d_backward(g, c)),
        [_separated(rng, (2, 2, 4, 4, 4))],
    ),
    "relu": lambda rng: (
        GradOp("relu", engine.relu_forward, engine.relu_backward),
        [_away_from_zero(rng, (1, 2, 3, 3, 3))],
    ),
    "sigmoid": lambda rng: (
        GradOp("sigmoid", engine.sigmoid_forward, engine.sigmoid_backward),
        [rng.standard_normal((1, 2, 3, 3, 3)) * 3],
    ),
    "elementwise_add": lambda rng: (
        GradOp("elementwise_add", engine.add_forward, engine.add_backward),
        [rng.standard_normal((1, 2, 3, 3, 3)), rng.standard_normal((1, 2, 3, 3, 3))],
    ),
    "weighted_dice_loss": lambda rng: (
        _loss_op(),
        [rng.uniform(0.05, 0.95, (2, 1, 2, 2, 2)), (rng.random((2, 1, 2, 2, 2)) < 0.4).astype(np.float64)],
    ),
}


def standard_cases(name, seed):
    rng = np.random.default_rng(seed)
    return OPS[name](rng)


def run_suite(seeds=20, base_seed=0, modes=("float64", "float32")):
    """Check every op over ``seeds`` random instances; returns {(op, mode): max error}."""
    results = {}
    for name in OPS:
        for mode in modes:
            worst = 0.0
            for k in range(seeds):
                op, inputs = standard_cases(name, base_seed + k)
                worst = max(worst, grad_check(op, inputs, mode=mode, seed=base_seed + k))
            results[(name, mode)] = worst
    return results
