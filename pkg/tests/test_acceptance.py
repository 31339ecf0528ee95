"""Exit criteria, one test each.

Every test prints a ``[PASS]`` or ``[FAIL]`` line (also collected into the
terminal summary) and then asserts the criterion at its stated tolerance.
Run just this module with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from maskaudit import clever, harness, masking, oracles
from maskaudit import network as nw

from conftest import binary_linear, random_binary_linear, random_smooth_model, record_criterion

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def ramp_config():
    return harness.reference_config("ramp")


@pytest.fixture(scope="module")
def ramp_report(ramp_config):
    return harness.cmd_demo_masking(ramp_config)


@pytest.fixture(scope="module")
def sigmoid_report():
    return harness.cmd_demo_masking(harness.reference_config("sigmoid"))


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_criterion_1_gradient_exactness():
    rng = np.random.default_rng(2024)
    worst, pairs = 0.0, 0
    for _ in range(100):
        model = random_smooth_model(rng)
        assert model.input_dim <= 10
        x = rng.standard_normal(model.input_dim)
        for i, j in itertools.permutations(range(model.num_classes), 2):
            g = nw.scalar_head_gradient(model, x, i, j)
            fd = nw.finite_diff_gradient(model, x, i, j, 1e-5)
            worst = max(worst, rel_err(g, fd))
            pairs += 1
    ok = worst < 1e-4
    record_criterion(1, ok, f"100 models, {pairs} head pairs, worst relative L2 error {worst:.2e} (< 1e-4)")
    assert ok


def test_criterion_2_ramp_geometry():
    c, delta = 255, 0.2
    x = np.arange(0, 1_000_001) * 1e-6
    hh = masking.ramp_staircase_eval(x, c, delta)
    slopes = np.diff(hh) / np.diff(x)
    # re-evaluate the steepest grid segments in exact rationals
    fd = Fraction(delta)

    def exact(v):
        v = Fraction(v)
        k = math.floor(v * c)
        start = Fraction(k, c)
        return start + (v - start) / fd if v <= start + fd / c else Fraction(k + 1, c)

    top = np.flatnonzero(slopes >= slopes.max() * (1 - 1e-6))[:2000]
    slope = max((exact(x[i + 1]) - exact(x[i])) / (Fraction(x[i + 1]) - Fraction(x[i])) for i in top)
    slope_ok = Fraction(99, 100) * 5 <= slope <= 5
    sup = float(np.max(np.abs(hh - masking.staircase_eval(x, c))))
    sup_ok = sup <= 1 / c
    u = np.random.default_rng(0).uniform(0, 1, 100_000)
    freq = float(np.mean(masking.ramp_staircase_grad(u, c, delta) == 0))
    freq_ok = abs(freq - 0.8) <= 0.012
    ok = slope_ok and sup_ok and freq_ok
    record_criterion(2, ok, f"max grid slope {float(slope):.6f} in [4.95, 5]; sup|hhat-h| {sup:.3e} <= 1/255; "
                            f"zero-derivative frequency {freq:.4f} (0.8 +- 0.012)")
    assert ok


def test_criterion_3_weibull_location_recovery():
    a, b, shape = 2.0, 1.0, 5.0
    locs = []
    for seed in range(20):
        u = np.random.default_rng(seed).uniform(size=500)
        sample = a - b * (-np.log(u)) ** (1 / shape)
        locs.append(clever.fit_reverse_weibull(sample).location)
    hits = sum(1.9 <= v <= 2.1 for v in locs)
    ok = hits >= 18
    record_criterion(3, ok, f"location in [1.9, 2.1] for {hits}/20 trials (need >= 18); "
                            f"median {np.median(locs):.4f}, range [{min(locs):.3f}, {max(locs):.3f}]")
    assert ok


def test_criterion_4_linear_sanity():
    worst_clever = worst_pgd = 0.0
    for seed in range(20):
        w, b, x0 = random_binary_linear(seed)
        model = binary_linear(w, b)
        y = int(nw.predict(model, x0)[0])
        dist = oracles.analytic_linear_distance(w, b, x0, 2)
        score = clever.clever_score(model, x0, y, clever.CleverParams(R=10 * dist, seed=seed))
        att = oracles.min_perturbation_bisect(model, x0, y, oracles.AttackParams(eps_hi=10 * dist, seed=seed))
        worst_clever = max(worst_clever, abs(score.untargeted_score - dist) / dist)
        worst_pgd = max(worst_pgd, abs(att.epsilon - dist) / dist)
    ok = worst_clever <= 0.05 and worst_pgd <= 0.02
    record_criterion(4, ok, f"20 classifiers: worst CLEVER error {worst_clever:.2e} (<= 5%), "
                            f"worst PGD error {worst_pgd:.2e} (<= 2%)")
    assert ok


def test_criterion_5_masking_inflation(ramp_report):
    masked = ramp_report["masked"].aggregate
    base = ramp_report["base"].aggregate
    ratio = masked["inflation_ratio"]
    ok = (ratio is not None and ratio >= 5
          and masked["contradiction_count_brute_force"] >= 9
          and base["contradiction_count_brute_force"] == 0)
    record_criterion(5, ok, f"masked inflation ratio {ratio:.3g} (>= 5), contradictions "
                            f"{masked['contradiction_count_brute_force']}/{masked['n_points']} (>= 9), "
                            f"unmasked contradictions {base['contradiction_count_brute_force']} (== 0)")
    assert ok


def test_criterion_6_saturation(sigmoid_report):
    rows = sigmoid_report["masked"].rows
    step = sigmoid_report.config.brute_force.grid_step
    zf = min(r.zero_fraction for r in rows)
    capped = sum(bool(r.capped) and r.clever_score == r.R for r in rows)
    bf_err = max(abs(r.brute_force - r.analytic) - (2 * step + 0.05 * r.analytic) for r in rows)
    ok = zf == 1.0 and capped == len(rows) and bf_err <= 0
    record_criterion(6, ok, f"min zero_fraction {zf} (== 1.0), capped at R on {capped}/{len(rows)} points, "
                            f"brute force within tolerance: {bf_err <= 0}")
    assert ok


def test_criterion_7_attack_asymmetry(ramp_report):
    masked = ramp_report["masked"]
    test = harness.train_base(ramp_report.config)[2]
    vanilla_fail = bpda_ok = 0
    for seed, row in enumerate(masked.rows):
        x0, y = test.inputs[row.point], row.true_class
        eps = 2 * row.analytic
        van = oracles.pgd_attack(masked.model, x0, y, eps, oracles.AttackParams(mode="vanilla", seed=seed))
        bp = oracles.pgd_attack(masked.model, x0, y, eps, oracles.AttackParams(mode="bpda", seed=seed))
        vanilla_fail += not van.success
        bpda_ok += bp.success
    n = len(masked.rows)
    ok = n == 10 and vanilla_fail >= 9 and bpda_ok == 10
    record_criterion(7, ok, f"vanilla PGD failed {vanilla_fail}/{n} (>= 9), BPDA succeeded {bpda_ok}/{n} (== 10)")
    assert ok


def test_criterion_8_diagnostic(ramp_report, sigmoid_report):
    ramp_rows = ramp_report["masked"].rows
    sig_rows = sigmoid_report["masked"].rows
    control = ramp_report["base"].rows
    ramp_flagged = sum(bool(r.flagged) for r in ramp_rows)
    sig_flagged = sum(bool(r.flagged) for r in sig_rows)
    control_flagged = sum(bool(r.flagged) for r in control)
    control_zf = max(r.zero_fraction for r in control)
    ok = (ramp_flagged == len(ramp_rows) and sig_flagged == len(sig_rows)
          and control_flagged == 0 and control_zf == 0.0)
    record_criterion(8, ok, f"flagged ramp {ramp_flagged}/{len(ramp_rows)}, sigmoid {sig_flagged}/{len(sig_rows)}, "
                            f"linear control {control_flagged}/{len(control)} with zero_fraction {control_zf}")
    assert ok


def test_criterion_9_determinism(ramp_config, ramp_report, tmp_path):
    again = harness.cmd_demo_masking(ramp_config)
    files = []
    for k, report in enumerate((ramp_report, again)):
        c, j = tmp_path / f"{k}.csv", tmp_path / f"{k}.json"
        harness.write_report(report, c, j)
        files.append((c.read_bytes(), j.read_bytes()))
    ok = files[0] == files[1]
    record_criterion(9, ok, f"rerun CSV and JSON reports byte-identical: {ok}")
    assert ok
