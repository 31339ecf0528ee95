"""Gradient-masking constructions: staircase quantizer, ramp approximation,
saturating sigmoid.

All evaluators are element-wise and accept scalars or numpy arrays.

The ramp approximation ``hhat`` replaces each jump of the staircase
``h(x) = ceil(c x) / c`` with a linear ramp occupying the first ``delta``
fraction of the step::

    x in [k/c, (k + delta)/c]       ->  k/c + (x - k/c) / delta
    x in ((k + delta)/c, (k + 1)/c] ->  (k + 1)/c

so ``hhat(k/c) = k/c``, the slope on ramps is ``1/delta`` and a uniformly
drawn ``x`` lands on a ramp with probability ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaskConfig",
    "staircase_eval",
    "staircase_grad",
    "ramp_staircase_eval",
    "ramp_staircase_grad",
    "sigmoid_eval",
    "sigmoid_grad",
    "analytic_lipschitz",
    "ramp_curve",
    "NOT_LIPSCHITZ",
]

# Sentinel Lipschitz constant for layers with jump discontinuities.
NOT_LIPSCHITZ = math.inf


@dataclass(frozen=True)
class MaskConfig:
    """Staircase/ramp/sigmoid parameters.

    Parameters
    ----------
    c : int
        Quantization levels per unit interval.
    delta : float
        Ramp width as a fraction of the step width ``1/c``, in (0, 1).
    gain : float
        Sigmoid pre-activation scale.
    """

    c: int = 255
    delta: float = 0.2
    gain: float = 1.0

    def __post_init__(self):
        _check_c(self.c)
        _check_delta(self.delta)
        _check_gain(self.gain)


def _check_c(c):
    if isinstance(c, bool) or int(c) != c or c < 1:
        raise ValueError(f"c must be a positive integer, got {c!r}")


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")


def _check_gain(gain):
    if not gain > 0.0 or not math.isfinite(gain):
        raise ValueError(f"gain must be a positive finite number, got {gain!r}")


def _ret(x, out):
    return float(out) if np.ndim(x) == 0 else out


def staircase_eval(x, c):
    """Quantize to the grid ``{k/c}`` by rounding up: ``ceil(c x) / c``."""
    _check_c(c)
    x = np.asarray(x)
    return _ret(x, np.ceil(c * x) / c)


def staircase_grad(x, c):
    """Derivative of the staircase, taken as zero everywhere (jumps included)."""
    _check_c(c)
    x = np.asarray(x)
    return _ret(x, np.zeros_like(x, dtype=np.result_type(x, np.float32)))


def _step_position(x, c):
    cx = c * x
    k = np.floor(cx)
    return k, cx - k


def ramp_staircase_eval(x, c, delta):
    """Lipschitz staircase with ramps of relative width ``delta``.

    >>> ramp_staircase_eval(0.26, 4, 0.2)  # doctest: +ELLIPSIS
    0.3...
    """
    _check_c(c)
    _check_delta(delta)
    x = np.asarray(x)
    k, t = _step_position(x, c)
    rise = np.minimum(t / delta, 1.0)
    return _ret(x, ((k + rise) / c).astype(np.result_type(x, np.float32), copy=False))


def ramp_staircase_grad(x, c, delta):
    """Derivative of :func:`ramp_staircase_eval`.

    ``1/delta`` on the closed ramp ``[k/c, (k + delta)/c]`` (both breakpoints
    go to the ramp side), zero on the open constant segment.
    """
    _check_c(c)
    _check_delta(delta)
    x = np.asarray(x)
    _, t = _step_position(x, c)
    dtype = np.result_type(x, np.float32)
    out = np.where(t <= delta, 1.0 / delta, 0.0).astype(dtype, copy=False)
    return _ret(x, out)


def _sigmoid(z):
    # Single-formula logistic: exp(-z) overflows to inf for very negative z,
    # giving exactly 0 rather than a denormal, as float32 frameworks do.
    one = z.dtype.type(1.0)
    with np.errstate(over="ignore"):
        return one / (one + np.exp(-z))


def _as_precision(x, precision):
    if precision not in ("f32", "f64"):
        raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}")
    dtype = np.float32 if precision == "f32" else np.float64
    return np.atleast_1d(np.asarray(x, dtype=dtype)), dtype


def sigmoid_eval(x, gain=1.0, precision="f64"):
    """``sigmoid(gain * x)`` computed entirely in the requested precision."""
    _check_gain(gain)
    xa, dtype = _as_precision(x, precision)
    out = _sigmoid(dtype(gain) * xa)
    return float(out[0]) if np.ndim(x) == 0 else out


def sigmoid_grad(x, gain=1.0, precision="f64"):
    """``gain * s * (1 - s)`` with ``s = sigmoid(gain * x)``.

    In f32 with a large gain, ``s`` rounds to exactly 0 or 1 away from the
    origin and the product is exactly zero.
    """
    _check_gain(gain)
    xa, dtype = _as_precision(x, precision)
    s = _sigmoid(dtype(gain) * xa)
    out = dtype(gain) * s * (dtype(1.0) - s)
    return float(out[0]) if np.ndim(x) == 0 else out


def analytic_lipschitz(layer, p=2):
    """Exact Lipschitz constant of a single layer w.r.t. the ``p -> p`` norm.

    ``Dense`` uses the induced operator norm (spectral norm for ``p=2``,
    max absolute row sum for ``p=inf``). ``Staircase`` is not Lipschitz and
    returns :data:`NOT_LIPSCHITZ`.
    """
    # Local import: network depends on this module.
    from . import network as nw

    if isinstance(layer, nw.RampStaircase):
        return 1.0 / layer.delta
    if isinstance(layer, nw.Staircase):
        return NOT_LIPSCHITZ
    if isinstance(layer, nw.Sigmoid):
        return layer.gain / 4.0
    if isinstance(layer, (nw.Relu, nw.Identity)):
        return 1.0
    if isinstance(layer, nw.Dense):
        if p == 2:
            return float(np.linalg.norm(layer.W, 2))
        if p in (np.inf, "inf"):
            return float(np.abs(layer.W).sum(axis=1).max())
        if p == 1:
            return float(np.abs(layer.W).sum(axis=0).max())
        raise ValueError(f"unsupported norm p={p!r}")
    raise ValueError(f"unsupported layer {layer!r}")


def ramp_curve(c=255, delta=0.2, resolution=1001, lo=0.0, hi=1.0):
    """Sample ``(x, h(x), hhat(x))`` on an even grid over ``[lo, hi]``."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid window [{lo}, {hi}]")
    x = np.linspace(lo, hi, int(resolution))
    return x, staircase_eval(x, c), ramp_staircase_eval(x, c, delta)
