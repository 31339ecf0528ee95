"""CLEVER-style robustness score.

Points are drawn uniformly from a p-norm ball around ``x0``. For each target
class ``j`` the dual norm of ``grad(f_true - f_j)`` is recorded per sample,
reduced to one maximum per batch, and a reverse Weibull distribution is fitted
to the batch maxima by maximum likelihood. The fitted location (the finite
right end-point of the distribution) is the local Lipschitz estimate
``L_hat_j``, and the score is ``min(margin_j / L_hat_j, R)``.

Nothing here is a bound: a model whose gradient is zero almost everywhere
yields ``L_hat = 0`` and a score of ``R`` whatever its real robustness.
:func:`masking_diagnostic` flags that situation from the fraction of exactly
zero gradient samples.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import network

__all__ = [
    "FitError",
    "CleverParams",
    "GradSampleStats",
    "WeibullFit",
    "TargetScore",
    "CleverScore",
    "Diagnostic",
    "normalize_p",
    "dual_norm",
    "sample_ball",
    "batch_max_grad_norms",
    "fit_reverse_weibull",
    "reverse_weibull_loglik",
    "clever_score",
    "masking_diagnostic",
]


class FitError(RuntimeError):
    """Reverse-Weibull fit failed to converge."""

    def __init__(self, message, diagnostics=None, target=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.target = target


def normalize_p(p):
    """Map the accepted spellings of the perturbation norm to ``2`` or ``inf``."""
    if p in (2, 2.0, "2", "l2"):
        return 2
    if p in ("inf", "linf", "Linf") or (isinstance(p, float) and math.isinf(p) and p > 0):
        return math.inf
    raise ValueError(f"unsupported norm p={p!r}; use 2 or 'inf'")


def dual_norm(G, p):
    """Row-wise norm dual to ``p``: l2 for ``p=2``, l1 for ``p=inf``."""
    G = np.asarray(G, dtype=np.float64)
    if normalize_p(p) == 2:
        return np.linalg.norm(G, axis=-1)
    return np.abs(G).sum(axis=-1)


def p_norm(V, p):
    V = np.asarray(V, dtype=np.float64)
    if normalize_p(p) == 2:
        return np.linalg.norm(V, axis=-1)
    return np.abs(V).max(axis=-1)


@dataclass(frozen=True)
class CleverParams:
    """Sampling configuration; ``n_batches * batch_size`` samples in total."""

    p: object = 2
    R: float = 1.0
    n_batches: int = 50
    batch_size: int = 100
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "p", normalize_p(self.p))
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.n_batches < 1 or self.batch_size < 1:
            raise ValueError("n_batches and batch_size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def n_samples(self):
        return self.n_batches * self.batch_size


@dataclass(frozen=True)
class GradSampleStats:
    maxima: np.ndarray
    zero_fraction: float
    n_samples: int


@dataclass(frozen=True)
class WeibullFit:
    location: float
    scale: float
    shape: float
    loglik: float
    degenerate: bool


@dataclass(frozen=True)
class TargetScore:
    j: int
    margin: float
    L_hat: float
    score: float
    capped: bool
    degenerate: bool
    zero_fraction: float


@dataclass(frozen=True)
class CleverScore:
    params: CleverParams
    true_class: int
    targets: tuple
    untargeted_score: float
    zero_fraction: float
    misclassified: bool = False

    def to_dict(self):
        return {
            "p": "inf" if math.isinf(self.params.p) else 2,
            "R": self.params.R,
            "N_b": self.params.n_batches,
            "batch_size": self.params.batch_size,
            "seed": self.params.seed,
            "true_class": self.true_class,
            "misclassified": self.misclassified,
            "zero_fraction": self.zero_fraction,
            "targets": [
                {
                    "j": t.j,
                    "margin": t.margin,
                    "L_hat": t.L_hat,
                    "score": t.score,
                    "capped": t.capped,
                    "degenerate": t.degenerate,
                }
                for t in self.targets
            ],
            "untargeted_score": self.untargeted_score,
        }


class Diagnostic(NamedTuple):
    flagged: bool
    zero_fraction: float


# --------------------------------------------------------------------------
# sampling


def sample_ball(x0, R, p, n, seed):
    """``n`` points uniform in the closed p-ball of radius ``R`` around ``x0``.

    ``seed`` may be an int or a sequence of ints (used for substreams).
    """
    p = normalize_p(p)
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[0]
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.empty((0, d))
    if math.isinf(p):
        return x0 + R * rng.uniform(-1.0, 1.0, size=(n, d))
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = R * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    return x0 + radius * direction


def _batch_norms(model, x0, i, j, params, b):
    X = sample_ball(x0, params.R, params.p, params.batch_size, (params.seed, b))
    return dual_norm(network.head_gradients(model, X, i, j), params.p)


def batch_max_grad_norms(model, x0, i, j, params):
    """Per-batch maxima of the dual-norm gradient of ``f_i - f_j``.

    Batch ``b`` draws from its own RNG stream ``(seed, b)``, so the result does
    not depend on ``params.workers``.
    """
    job = lambda b: _batch_norms(model, x0, i, j, params, b)  # noqa: E731
    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as pool:
            norms = list(pool.map(job, range(params.n_batches)))
    else:
        norms = [job(b) for b in range(params.n_batches)]
    norms = np.stack(norms)
    return GradSampleStats(
        maxima=norms.max(axis=1),
        zero_fraction=float(np.count_nonzero(norms == 0.0) / norms.size),
        n_samples=norms.size,
    )


# --------------------------------------------------------------------------
# reverse Weibull maximum likelihood


def reverse_weibull_loglik(x, location, scale, shape):
    """Log-likelihood of ``x`` under ``F(x) = exp(-((location - x)/scale)**shape)``."""
    y = location - np.asarray(x, dtype=np.float64)
    if np.any(y <= 0) or scale <= 0 or shape <= 0:
        return -math.inf
    z = y / scale
    return float(
        y.size * (math.log(shape) - math.log(scale))
        + (shape - 1.0) * np.log(z).sum()
        - (z ** shape).sum()
    )


def _weibull_shape_mle(y, tol=1e-10, max_iter=200):
    """Solve the 2-parameter Weibull shape equation by safeguarded Newton.

    ``sum(y^k log y) / sum(y^k) - 1/k - mean(log y) = 0`` is increasing in k.
    """
    logy = np.log(y)
    u = logy - logy.max()
    mean_u = u.mean()

    def score(k):
        w = np.exp(k * u)
        sw = w.sum()
        m1 = (w * u).sum() / sw
        m2 = (w * u * u).sum() / sw
        return m1 - 1.0 / k - mean_u, (m2 - m1 * m1) + 1.0 / (k * k)

    lo, hi = 1e-3, 1e4
    if score(hi)[0] < 0:
        return hi, 0
    k = 1.0
    for it in range(max_iter):
        f, df = score(k)
        if abs(f) < tol:
            return k, it
        if f > 0:
            hi = k
        else:
            lo = k
        step = k - f / df
        k = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo < tol * k:
            return k, it
    raise FitError(
        "Weibull shape iteration did not converge",
        {"k": k, "bracket": (lo, hi), "residual": f},
    )


def _profile(x, location):
    y = location - x
    k, _ = _weibull_shape_mle(y)
    ymax = y.max()
    scale = float(ymax * np.mean((y / ymax) ** k) ** (1.0 / k))
    return reverse_weibull_loglik(x, location, scale, k), scale, k


def fit_reverse_weibull(maxima, grid_points=121, golden_iters=60):
    """Maximum-likelihood reverse Weibull fit.

    The location is profiled: for each candidate ``a > max(x)`` the shape and
    scale of ``a - x`` come from the 2-parameter Weibull MLE, and the profile
    log-likelihood is maximized over ``log(a - max(x))`` with a coarse grid
    followed by golden-section refinement. The offset is searched within
    ``[1e-8, 1e4]`` times the sample spread.

    Samples whose range is below ``1e-12 * max(1, |max|)`` are degenerate; the
    location is then the common value and no likelihood is fitted.
    """
    x = np.asarray(maxima, dtype=np.float64).ravel()
    if x.size < 5:
        raise ValueError(f"need at least 5 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("maxima must be finite")
    top = float(x.max())
    spread = top - float(x.min())
    if spread < 1e-12 * max(1.0, abs(top)):
        return WeibullFit(top, 1.0, 1.0, math.nan, True)

    log_lo = math.log(spread * 1e-8)
    log_hi = math.log(spread * 1e4)
    grid = np.linspace(log_lo, log_hi, grid_points)
    prof = np.array([_profile(x, top + math.exp(t))[0] for t in grid])
    best = int(np.argmax(prof))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, grid_points - 1)]

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _profile(x, top + math.exp(c))[0]
    fd = _profile(x, top + math.exp(d))[0]
    for _ in range(golden_iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _profile(x, top + math.exp(c))[0]
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _profile(x, top + math.exp(d))[0]
    t = 0.5 * (a + b)
    candidates = [(prof[best], grid[best]), (_profile(x, top + math.exp(t))[0], t)]
    loglik, t = max(candidates)
    location = top + math.exp(t)
    loglik, scale, shape = _profile(x, location)
    if not math.isfinite(loglik):
        raise FitError("non-finite profile likelihood", {"location": location})
    return WeibullFit(location, scale, shape, loglik, False)


# --------------------------------------------------------------------------
# score


def clever_score(model, x0, true_class, params):
    """Estimate the untargeted CLEVER score of ``model`` at ``x0``.

    If ``model`` does not classify ``x0`` as ``true_class`` the score is 0 and
    ``misclassified`` is set.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    logits = network.forward(model, x0).astype(np.float64)
    if int(np.argmax(logits)) != true_class:
        return CleverScore(params, true_class, (), 0.0, math.nan, misclassified=True)

    targets = []
    zero_counts = 0
    total = 0
    for j in range(model.num_classes):
        if j == true_class:
            continue
        stats = batch_max_grad_norms(model, x0, true_class, j, params)
        try:
            fit = fit_reverse_weibull(stats.maxima)
        except FitError as exc:
            exc.target = j
            raise
        margin = float(logits[true_class] - logits[j])
        L_hat = max(fit.location, 0.0)
        ratio = margin / L_hat if L_hat > 0 else math.inf
        score = min(ratio, params.R)
        targets.append(
            TargetScore(j, margin, L_hat, score, ratio >= params.R, fit.degenerate, stats.zero_fraction)
        )
        zero_counts += stats.zero_fraction * stats.n_samples
        total += stats.n_samples
    untargeted = min(t.score for t in targets)
    return CleverScore(params, true_class, tuple(targets), untargeted, zero_counts / total)


def masking_diagnostic(stats, threshold=0.5):
    """Flag estimates built mostly from exactly-zero gradients.

    ``stats`` is anything with a ``zero_fraction`` attribute
    (:class:`GradSampleStats` or :class:`CleverScore`).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    zf = float(stats.zero_fraction)
    return Diagnostic(zf > threshold, zf)
