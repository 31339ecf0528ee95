"""Ground-truth side of the audit: things that exhibit real perturbations.

* :func:`analytic_linear_distance` - closed form for affine binary classifiers.
* :func:`pgd_attack` / :func:`min_perturbation_bisect` - projected gradient
  attack and a bisection on its radius. ``mode='bpda'`` differentiates
  through masking layers as if they were the identity, while success is
  always checked on the exact forward pass.
* :func:`brute_force_min_perturbation` - gradient-free exhaustive grid search
  for ``input_dim <= 3``.

Every successful result is re-verified by an exact forward pass, so the
returned radius is a genuine upper bound on the minimal adversarial
perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import network
from .clever import dual_norm, normalize_p, p_norm, sample_ball

__all__ = [
    "AttackParams",
    "AttackResult",
    "analytic_linear_distance",
    "linear_head",
    "pgd_attack",
    "min_perturbation_bisect",
    "brute_force_min_perturbation",
]


@dataclass(frozen=True)
class AttackParams:
    """PGD configuration.

    ``step_size`` is relative to the radius being attacked (each step moves
    ``step_size * eps`` in the chosen norm). Restart 0 starts from ``x0``;
    later restarts start from a uniform point of the eps-ball.
    """

    p: object = 2
    pgd_steps: int = 100
    step_size: float = 0.05
    restarts: int = 1
    bisect_iters: int = 20
    eps_hi: float = 1.0
    mode: str = "vanilla"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", normalize_p(self.p))
        if self.mode not in ("vanilla", "bpda"):
            raise ValueError(f"mode must be 'vanilla' or 'bpda', got {self.mode!r}")
        if min(self.pgd_steps, self.restarts, self.bisect_iters) < 1:
            raise ValueError("pgd_steps, restarts and bisect_iters must be >= 1")
        if not (self.step_size > 0 and self.eps_hi > 0):
            raise ValueError("step_size and eps_hi must be positive")


@dataclass(frozen=True, eq=False)
class AttackResult:
    success: bool
    epsilon: float
    x_adv: np.ndarray | None
    queries: int
    mode: str = "vanilla"
    p: object = 2

    def to_dict(self):
        return {
            "mode": self.mode,
            "p": "inf" if math.isinf(self.p) else 2,
            "success": self.success,
            "epsilon": self.epsilon if math.isfinite(self.epsilon) else "inf",
            "queries": self.queries,
            "x_adv": None if self.x_adv is None else [float(v) for v in self.x_adv],
        }


def analytic_linear_distance(w, b, x0, p):
    """Exact minimal p-norm distance from ``x0`` to ``{x : w.x + b = 0}``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        raise ValueError("w must be nonzero")
    return float(abs(w @ np.asarray(x0, dtype=np.float64) + b) / dual_norm(w, p))


def linear_head(model, i, j):
    """``(w, b)`` with ``f_i(x) - f_j(x) = w.x + b`` for Dense-only models, else None."""
    affine = network.affine_map(model)
    if affine is None:
        return None
    A, c = affine
    return A[i] - A[j], float(c[i] - c[j])


def _misclassified(model, X, true_class):
    return network.predict(model, X) != true_class


def _project(x, x0, eps, p):
    delta = x - x0
    if math.isinf(p):
        return x0 + np.clip(delta, -eps, eps)
    norm = np.linalg.norm(delta)
    if norm > eps:
        delta *= eps / norm
    return x0 + delta


def pgd_attack(model, x0, true_class, eps, params):
    """Projected gradient ascent on ``max_{j != true} f_j - f_true`` within the eps-ball.

    Returns the first verified adversarial point found over the restarts, or
    a failed result.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    p = params.p
    grad_model = model.with_mode("bpda" if params.mode == "bpda" else "exact")
    step = params.step_size * eps
    queries = 0
    for r in range(params.restarts):
        if r == 0:
            x = x0.copy()
        else:
            x = sample_ball(x0, eps, p, 1, (params.seed, r))[0]
        for _ in range(params.pgd_steps + 1):
            logits = network.forward(model, x)
            queries += 1
            if int(np.argmax(logits)) != true_class:
                return AttackResult(True, float(eps), x, queries, params.mode, p)
            rivals = logits.astype(np.float64).copy()
            rivals[true_class] = -np.inf
            j = int(np.argmax(rivals))
            g = -network.scalar_head_gradient(grad_model, x, true_class, j).astype(np.float64)
            queries += 1
            if math.isinf(p):
                move = np.sign(g)
            else:
                gn = np.linalg.norm(g)
                move = g / gn if gn > 0 else np.zeros_like(g)
            x = _project(x + step * move, x0, eps, p)
    return AttackResult(False, float(eps), None, queries, params.mode, p)


def min_perturbation_bisect(model, x0, true_class, params):
    """Smallest radius in ``(0, eps_hi]`` at which :func:`pgd_attack` succeeds.

    PGD failure at a radius is taken to mean no adversarial point there; the
    returned ``epsilon`` is always a radius with a verified success. If the
    attack fails at ``eps_hi`` the result is a failure with ``epsilon=inf``.
    """
    best = pgd_attack(model, x0, true_class, params.eps_hi, params)
    queries = best.queries
    if not best.success:
        return replace(best, epsilon=math.inf, queries=queries)
    lo, hi = 0.0, params.eps_hi
    for _ in range(params.bisect_iters):
        mid = 0.5 * (lo + hi)
        res = pgd_attack(model, x0, true_class, mid, params)
        queries += res.queries
        if res.success:
            hi, best = mid, res
        else:
            lo = mid
    return replace(best, epsilon=hi, queries=queries)


# --------------------------------------------------------------------------
# exhaustive search


def _ring(m, d):
    """Integer points with ``max |z_k| == m`` in ``d`` dimensions (``m >= 1``)."""
    faces = []
    for k in range(d):
        axes = []
        for l in range(d):
            if l == k:
                axes.append(np.array([0]))
            else:
                lim = m - 1 if l < k else m
                axes.append(np.arange(-lim, lim + 1))
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        for sign in (-m, m):
            face = grid.copy()
            face[:, k] = sign
            faces.append(face)
    return np.concatenate(faces)


def brute_force_min_perturbation(
    model, x0, true_class, p, grid_step, max_radius, chunk_points=200_000
):
    """Smallest p-norm of a grid offset ``grid_step * z`` that flips the class.

    Offsets are visited in square shells of growing ``max |z|``; the scan stops
    once no later shell can contain a shorter offset than the best hit. Returns
    ``inf`` if nothing within ``max_radius`` misclassifies. The result exceeds
    the true minimal perturbation by at most ``grid_step * sqrt(d)``.
    """
    p = normalize_p(p)
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[0]
    if d > 3:
        raise ValueError(f"exhaustive search supports input_dim <= 3, got {d}")
    if not grid_step > 0 or not max_radius > 0:
        raise ValueError("grid_step and max_radius must be positive")
    if _misclassified(model, x0[None, :], true_class)[0]:
        return 0.0

    best = math.inf
    m = 1
    m_max = int(math.floor(max_radius / grid_step))
    while m <= m_max and m * grid_step < best:
        block = []
        size = 0
        while m <= m_max and size < chunk_points:
            ring = _ring(m, d)
            block.append(ring)
            size += len(ring)
            m += 1
        offsets = np.concatenate(block) * grid_step
        norms = p_norm(offsets, p)
        keep = norms <= max_radius
        offsets, norms = offsets[keep], norms[keep]
        if norms.size:
            hit = _misclassified(model, x0 + offsets, true_class)
            if hit.any():
                best = min(best, float(norms[hit].min()))
    return best
