"""Experiment runner: train a base model, mask it, and audit both.

For every test point the report pairs the CLEVER score with exhibited
perturbations (vanilla PGD, BPDA PGD, exhaustive grid search) and the exact
linear distance when the base is affine. A *contradiction* is a point where
the CLEVER score exceeds a perturbation that was actually found.

Reports are written as a CSV of rows plus a JSON document with the
aggregates; both are byte-reproducible from the config.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import clever, masking, network, oracles

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "Row",
    "ModelReport",
    "ExperimentReport",
    "reference_config",
    "build_masked_model",
    "analytic_distance",
    "cmd_demo_masking",
    "write_report",
    "format_tsv_rows",
    "atomic_write",
]


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    d: int = 2
    num_classes: int = 2
    n_per_class: int = 100
    n_test_per_class: int = 20
    separation: float = 0.5
    scale: float = 0.08
    center: float = 0.5


@dataclass(frozen=True)
class TrainSpec:
    hidden: tuple = ()
    activation: str = "relu"
    lr: float = 0.5
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class MaskSpec:
    type: str = "none"
    c: int = 255
    delta: float = 1e-3
    gain: float = 1e4
    precision: str = "f32"

    def __post_init__(self):
        if self.type not in ("none", "staircase", "ramp", "sigmoid"):
            raise ConfigError(f"unknown mask type {self.type!r}")
        if self.type == "ramp":
            masking.MaskConfig(self.c, self.delta, 1.0)
        elif self.type == "staircase":
            masking.MaskConfig(self.c, 0.5, 1.0)
        elif self.type == "sigmoid":
            masking.MaskConfig(1, 0.5, self.gain)
            if self.precision not in ("f32", "f64"):
                raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass(frozen=True)
class CleverSpec:
    p: object = 2
    R: float | None = None
    R_factor: float | None = 10.0
    n_batches: int = 50
    batch_size: int = 100
    seed: int = 0
    threshold: float = 0.5


@dataclass(frozen=True)
class AttackSpec:
    p: object = 2
    pgd_steps: int = 100
    step_size: float = 0.05
    restarts: int = 1
    bisect_iters: int = 20
    eps_hi: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class BruteForceSpec:
    enabled: bool = True
    grid_step: float = 1e-3


@dataclass(frozen=True)
class OutputSpec:
    csv: str = "report.csv"
    json: str = "report.json"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun an experiment bit-for-bit.

    ``clever.R`` fixes an absolute radius; otherwise the radius is
    ``clever.R_factor`` times the base model's exact distance at each point,
    which requires a Dense-only base. ``attack.eps_hi`` defaults to the same
    radius, so attacks search the ball CLEVER is scored on.
    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    mask: MaskSpec = field(default_factory=MaskSpec)
    clever: CleverSpec = field(default_factory=CleverSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    brute_force: BruteForceSpec = field(default_factory=BruteForceSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    n_points: int = 10
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}")
        sections = {
            "dataset": DatasetSpec,
            "train": TrainSpec,
            "mask": MaskSpec,
            "clever": CleverSpec,
            "attack": AttackSpec,
            "brute_force": BruteForceSpec,
            "output": OutputSpec,
        }
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                try:
                    spec = sections[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"bad {key!r} section: {exc}") from None
                if key == "train":
                    spec = TrainSpec(**{**value, "hidden": tuple(value.get("hidden", ()))})
                kwargs[key] = spec
            elif key in ("n_points", "workers", "schema_version"):
                kwargs[key] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        c = self.clever
        if c.R is None and c.R_factor is None:
            raise ConfigError("clever needs R or R_factor")
        clever.CleverParams(c.p, c.R or 1.0, c.n_batches, c.batch_size, c.seed)
        a = self.attack
        oracles.AttackParams(a.p, a.pgd_steps, a.step_size, a.restarts, a.bisect_iters,
                             a.eps_hi or 1.0, "vanilla", a.seed)
        if self.n_points < 1:
            raise ConfigError("n_points must be >= 1")
        if not 0 < c.threshold < 1:
            raise ConfigError("clever.threshold must lie in (0, 1)")

    def to_dict(self):
        doc = asdict(self)
        doc["train"]["hidden"] = list(self.train.hidden)
        for key in ("clever", "attack"):
            p = doc[key]["p"]
            doc[key]["p"] = "inf" if p in ("inf", math.inf) else p
        return doc

    def clever_params(self, R):
        c = self.clever
        return clever.CleverParams(c.p, R, c.n_batches, c.batch_size, c.seed, self.workers)

    def attack_params(self, eps_hi, mode):
        a = self.attack
        return oracles.AttackParams(a.p, a.pgd_steps, a.step_size, a.restarts,
                                    a.bisect_iters, eps_hi, mode, a.seed)


def reference_config(mask="ramp", **mask_kwargs):
    """The reference experiment: 2-D logistic regression, 10 test points,
    5000 CLEVER samples, radius 10x the exact distance."""
    defaults = {
        "none": {},
        "ramp": {"c": 255, "delta": 1e-3},
        "staircase": {"c": 255},
        "sigmoid": {"gain": 1e4, "precision": "f32"},
    }[mask]
    return ExperimentConfig(mask=MaskSpec(type=mask, **{**defaults, **mask_kwargs}))


# --------------------------------------------------------------------------
# models


def build_masked_model(base, mask):
    """Insert the mask described by ``mask`` into ``base``.

    Staircase/ramp masks quantize the input (``f = g(h(x))``). The sigmoid
    mask centers the logits and squashes them with a high-gain sigmoid, which
    keeps the arg-max of a binary model intact while saturating the output.
    """
    if mask.type == "none":
        return base
    if mask.type == "ramp":
        return network.Model((network.RampStaircase(mask.c, mask.delta),) + base.layers,
                             base.input_dim, base.num_classes, base.precision)
    if mask.type == "staircase":
        return network.Model((network.Staircase(mask.c),) + base.layers,
                             base.input_dim, base.num_classes, base.precision)
    k = base.num_classes
    center = network.Dense(np.eye(k) - np.full((k, k), 1.0 / k), np.zeros(k))
    return network.Model(base.layers + (center, network.Sigmoid(mask.gain)),
                         base.input_dim, k, mask.precision)


def analytic_distance(model, x0, true_class, p):
    """Exact distance to misclassification for Dense-only models, else None.

    The adversarial region is a union of half-spaces ``f_j >= f_true``, so the
    distance is the smallest of the per-class hyperplane distances.
    """
    best = math.inf
    for j in range(model.num_classes):
        if j == true_class:
            continue
        head = oracles.linear_head(model, true_class, j)
        if head is None:
            return None
        w, b = head
        if np.any(w):
            best = min(best, oracles.analytic_linear_distance(w, b, x0, p))
    return best


# --------------------------------------------------------------------------
# report


@dataclass
class Row:
    model: str
    point: int
    true_class: int
    x0: list
    dataset_seed: int
    clever_seed: int
    attack_seed: int
    R: float
    analytic: float | None = None
    clever_score: float | None = None
    zero_fraction: float | None = None
    capped: bool | None = None
    degenerate: bool | None = None
    flagged: bool | None = None
    vanilla_success: bool | None = None
    vanilla_eps: float | None = None
    bpda_success: bool | None = None
    bpda_eps: float | None = None
    brute_force: float | None = None
    error: str = ""

    @property
    def exhibited(self):
        """Smallest perturbation actually found for this point."""
        found = [v for v in (self.vanilla_eps, self.bpda_eps, self.brute_force)
                 if v is not None and math.isfinite(v)]
        return min(found) if found else math.inf

    @property
    def contradiction(self):
        return self.clever_score is not None and self.clever_score > self.exhibited

    @property
    def contradiction_brute_force(self):
        return (self.clever_score is not None and self.brute_force is not None
                and self.clever_score > self.brute_force)

    @property
    def inflation(self):
        if self.clever_score is None or not self.bpda_success or self.bpda_eps <= 0:
            return None
        return self.clever_score / self.bpda_eps


def aggregate(rows):
    ratios = [r.inflation for r in rows if r.inflation is not None]
    return {
        "n_points": len(rows),
        "inflation_ratio": statistics.median(ratios) if ratios else None,
        "contradiction_count": sum(r.contradiction for r in rows),
        "contradiction_count_brute_force": sum(r.contradiction_brute_force for r in rows),
        "flagged_count": sum(bool(r.flagged) for r in rows),
        "min_zero_fraction": min((r.zero_fraction for r in rows if r.zero_fraction is not None),
                                 default=None),
        "error_count": sum(bool(r.error) for r in rows),
    }


@dataclass
class ModelReport:
    name: str
    model: network.Model
    rows: list

    @property
    def aggregate(self):
        return aggregate(self.rows)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    reports: list

    def __getitem__(self, name):
        for rep in self.reports:
            if rep.name == name:
                return rep
        raise KeyError(name)

    @property
    def rows(self):
        return [row for rep in self.reports for row in rep.rows]

    def to_dict(self):
        return _jsonable({
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "models": {
                rep.name: {
                    "model": network.model_to_dict(rep.model),
                    "aggregate": rep.aggregate,
                }
                for rep in self.reports
            },
        })


CSV_FIELDS = [
    "model", "point", "true_class", "x0", "dataset_seed", "clever_seed", "attack_seed",
    "R", "analytic", "clever_score", "zero_fraction", "capped", "degenerate", "flagged",
    "vanilla_success", "vanilla_eps", "bpda_success", "bpda_eps", "brute_force",
    "contradiction", "contradiction_brute_force", "error",
]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ";".join(repr(float(v)) for v in value)
    return str(value)


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, name)) for name in CSV_FIELDS])
    return buf.getvalue()


def rows_from_csv(text):
    """Parse a report CSV back into :class:`Row` objects."""

    def parse(name, raw):
        if raw == "":
            return "" if name == "error" else None
        if raw in ("true", "false"):
            return raw == "true"
        if name in ("model", "error"):
            return raw
        if name == "x0":
            return [float(v) for v in raw.split(";")]
        if name in ("point", "true_class", "dataset_seed", "clever_seed", "attack_seed"):
            return int(raw)
        return float(raw)

    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rec.pop("contradiction")
        rec.pop("contradiction_brute_force")
        rows.append(Row(**{k: parse(k, v) for k, v in rec.items()}))
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file so no partial file is left."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc):
    return json.dumps(_jsonable(doc), indent=2) + "\n"


def write_report(report, csv_path, json_path):
    atomic_write(csv_path, rows_to_csv(report.rows))
    atomic_write(json_path, dump_json(report.to_dict()))


# --------------------------------------------------------------------------
# experiment


def _audit_point(cfg, name, model, base, x0, y, index):
    c, a = cfg.clever, cfg.attack
    analytic = analytic_distance(base, x0, y, c.p)
    if c.R is not None:
        R = float(c.R)
    elif analytic is not None and math.isfinite(analytic):
        R = float(c.R_factor * analytic)
    else:
        raise ConfigError("clever.R_factor needs a Dense-only base model; set clever.R")
    row = Row(name, index, int(y), [float(v) for v in x0], cfg.dataset.seed, c.seed, a.seed, R,
              analytic=analytic)
    try:
        score = clever.clever_score(model, x0, int(y), cfg.clever_params(R))
        row.clever_score = score.untargeted_score
        row.zero_fraction = score.zero_fraction
        row.capped = all(t.capped for t in score.targets)
        row.degenerate = any(t.degenerate for t in score.targets)
        row.flagged = clever.masking_diagnostic(score, c.threshold).flagged
    except Exception as exc:  # per-row capture; the run goes on
        row.error = f"clever: {type(exc).__name__}: {exc}"
    eps_hi = float(a.eps_hi) if a.eps_hi is not None else R
    try:
        van = oracles.min_perturbation_bisect(model, x0, int(y), cfg.attack_params(eps_hi, "vanilla"))
        bp = oracles.min_perturbation_bisect(model, x0, int(y), cfg.attack_params(eps_hi, "bpda"))
        row.vanilla_success, row.vanilla_eps = van.success, van.epsilon
        row.bpda_success, row.bpda_eps = bp.success, bp.epsilon
        if cfg.brute_force.enabled and model.input_dim <= 3:
            row.brute_force = oracles.brute_force_min_perturbation(
                model, x0, int(y), a.p, cfg.brute_force.grid_step, eps_hi)
    except Exception as exc:
        row.error = (row.error + " | " if row.error else "") + f"attack: {type(exc).__name__}: {exc}"
    return row


def train_base(cfg):
    ds = cfg.dataset
    train = network.make_blobs(ds.seed, ds.n_per_class, ds.d, ds.num_classes, ds.separation,
                               ds.scale, ds.center)
    test = network.make_blobs(ds.seed + 1, ds.n_test_per_class, ds.d, ds.num_classes,
                              ds.separation, ds.scale, ds.center)
    t = cfg.train
    arch = network.ArchSpec(tuple(t.hidden), t.activation)
    base = network.train_toy(arch, train, t.lr, t.epochs, t.seed, t.batch_size)
    return base, train, test


def select_points(model, dataset, n):
    """The first ``n`` held-out points the model classifies correctly."""
    pred = network.predict(model, dataset.inputs) if len(dataset) else np.array([])
    idx = [k for k in range(len(dataset)) if pred[k] == dataset.labels[k]]
    return idx[:n]


def run_rows(cfg, name, model, base, points, dataset):
    job = lambda k: _audit_point(cfg, name, model, base, dataset.inputs[k],  # noqa: E731
                                 dataset.labels[k], k)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(job, points))
    return [job(k) for k in points]


def cmd_demo_masking(cfg):
    """Train the base model, mask it, and audit both at the same test points."""
    base, _, test = train_base(cfg)
    points = select_points(base, test, cfg.n_points)
    reports = [ModelReport("base", base, run_rows(cfg, "base", base, base, points, test))]
    if cfg.mask.type != "none":
        masked = build_masked_model(base, cfg.mask)
        reports.append(ModelReport("masked", masked,
                                   run_rows(cfg, "masked", masked, base, points, test)))
    return ExperimentReport(cfg, reports)


def format_tsv_rows(x, h, hhat):
    lines = ["x\th\thhat"]
    lines += [f"{a:.17g}\t{b:.17g}\t{c:.17g}" for a, b, c in zip(x, h, hhat)]
    return "\n".join(lines) + "\n"
