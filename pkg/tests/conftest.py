import numpy as np
import pytest

from maskaudit import network as nw


def linear_model(W, b, precision="f64"):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    return nw.Model((nw.Dense(W, b),), W.shape[1], W.shape[0], precision)


def binary_linear(w, b):
    """Two-logit model whose class-1 margin is ``w.x + b``."""
    w = np.asarray(w, dtype=float)
    W = np.vstack([np.zeros_like(w), w])
    return linear_model(W, [0.0, b])


def random_binary_linear(seed, d=2, dist_range=(0.1, 0.5)):
    """Random (w, b, x0) with x0 in [0.2, 0.8]^d at a chosen boundary distance."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    x0 = rng.uniform(0.2, 0.8, d)
    dist = rng.uniform(*dist_range)
    sign = rng.choice([-1.0, 1.0])
    b = sign * dist * np.linalg.norm(w) - w @ x0
    return w, float(b), x0


def ramp_wrapped(model, c=255, delta=1e-3):
    return nw.Model((nw.RampStaircase(c, delta),) + model.layers,
                    model.input_dim, model.num_classes, model.precision)


def random_smooth_model(rng, d=None, k=None, depth=None):
    d = d or int(rng.integers(1, 11))
    k = k or int(rng.integers(2, 5))
    depth = depth if depth is not None else int(rng.integers(0, 3))
    widths = [d] + [int(rng.integers(2, 8)) for _ in range(depth)] + [k]
    layers = []
    for n, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nw.Dense(rng.standard_normal((b, a)), rng.standard_normal(b)))
        if n < len(widths) - 2:
            layers.append(nw.Sigmoid(float(rng.uniform(0.5, 2.0))))
        if rng.uniform() < 0.2:
            layers.append(nw.Identity())
    return nw.Model(tuple(layers), d, k)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append((number, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
