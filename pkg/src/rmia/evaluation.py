"""Ablation runner, slice reports and baseline runners."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import LogisticConfig, LogisticModel, MlpConfig, PlainMlpModel
from .data import ApprovalInstance, Dataset
from .metrics import MetricsReport, classification_metrics
from .model import ABLATIONS, Model, RmiaConfig, RmiaModel
from .synth import APPROVER_ROLES, EMPLOYEE_CATEGORIES, PERMISSION_TYPES, text_tier
from .train import GridResult, TrainConfig, TrainReport, grid_search, train

# A linear model from zero init on sparse one-hots converges far more slowly
# per step than the embedding model, so it gets its own learning-rate grid.
LR_BASELINE_LR_GRID = (5e-2, 1e-2, 5e-3, 1e-3)

METRIC_FIELDS = ("auc", "precision", "recall", "f1", "threshold", "n", "positives")


class EmptyAnchor(ValueError):
    pass


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def metrics_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    w.writerow([repr(getattr(report, f)) if isinstance(getattr(report, f), float) else getattr(report, f)
                for f in METRIC_FIELDS])
    return buf.getvalue()


def write_metrics(report: MetricsReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(report))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class FitResult:
    model: Model
    store: object
    report: TrainReport
    test: MetricsReport
    test_scores: np.ndarray
    grid: GridResult | None = None


def fit_and_evaluate(model: Model, splits: Splits, cfg: TrainConfig, *, use_grid: bool = False,
                     checkpoint_path=None, threshold: float = 0.5, log=None) -> FitResult:
    """Train (optionally after grid search), then score the test split."""
    btr, bva, bte = (model.encode(s.instances) for s in (splits.train, splits.val, splits.test))
    grid = None
    lr, wd = cfg.lr, cfg.weight_decay
    if use_grid:
        grid = grid_search(model, btr, bva, cfg, log=log)
        lr, wd = grid.best_lr, grid.best_l2
    store, rep = train(model, btr, bva, cfg, lr=lr, weight_decay=wd, checkpoint_path=checkpoint_path, log=log)
    scores = model.predict_proba(store, bte)
    return FitResult(model, store, rep, classification_metrics(scores, bte.labels, threshold), scores, grid)


# -- ablation -------------------------------------------------------------------

def variant_slug(variant: str) -> str:
    return "full" if variant == "full" else "wo_" + ABLATIONS[variant].upper()


@dataclass
class AblationTable:
    experiment: str
    rows: list[dict] = field(default_factory=list)  # variant, seed, metrics, h_dim

    def mean_auc(self, variant: str) -> float:
        vals = [r["metrics"].auc for r in self.rows if r["variant"] == variant]
        return float(np.mean(vals))

    @property
    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "h_dim", *METRIC_FIELDS])
        for r in self.rows:
            m = r["metrics"]
            w.writerow([r["variant"], r["seed"], r["h_dim"], *(repr(getattr(m, f)) if isinstance(getattr(m, f), float)
                                                               else getattr(m, f) for f in METRIC_FIELDS)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"experiment": self.experiment,
                "mean_auc": {v: self.mean_auc(v) for v in self.variants},
                "seeds": sorted({r["seed"] for r in self.rows})}


def run_ablation(splits_by_seed: dict[int, Splits], schema, model_cfg: RmiaConfig = RmiaConfig(),
                 train_cfg: TrainConfig = TrainConfig(), variants=("w/o BI", "w/o TE"), *,
                 experiment: str = "ablation", out_dir=None, log=None) -> AblationTable:
    """Train the full model and each single-component ablation on every seed.

    Every cell of one seed shares the data split and the training seed.
    """
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variants: {unknown}")
    table = AblationTable(experiment)
    for seed, splits in splits_by_seed.items():
        cfg = replace(train_cfg, seed=seed)
        for variant in ("full", *variants):
            mcfg = model_cfg if variant == "full" else model_cfg.without(ABLATIONS[variant])
            model = RmiaModel(mcfg, schema)
            res = fit_and_evaluate(model, splits, cfg)
            table.rows.append({"variant": variant, "seed": seed, "metrics": res.test, "h_dim": mcfg.h_dim})
            if log:
                log(f"{variant} seed={seed}: auc={res.test.auc:.4f}")
            if out_dir is not None:
                cell = Path(out_dir) / experiment / variant_slug(variant) / str(seed)
                write_metrics(res.test, cell)
                res.report.write(cell)
    if out_dir is not None:
        root = Path(out_dir) / experiment
        root.mkdir(parents=True, exist_ok=True)
        (root / "ablation.csv").write_text(table.to_csv())
        (root / "summary.json").write_text(json.dumps(table.summary(), indent=2, sort_keys=True) + "\n")
    return table


# -- baselines ------------------------------------------------------------------

def baseline_lr(splits: Splits, schema, train_cfg: TrainConfig = TrainConfig(), config: LogisticConfig = LogisticConfig(),
                log=None) -> FitResult:
    """Logistic regression, grid-searched over the shared l2 grid."""
    cfg = replace(train_cfg, lr_grid=LR_BASELINE_LR_GRID)
    return fit_and_evaluate(LogisticModel(config, schema), splits, cfg, use_grid=True, log=log)


def baseline_mlp(splits: Splits, schema, train_cfg: TrainConfig = TrainConfig(), config: MlpConfig = MlpConfig(),
                 use_grid: bool = False, log=None) -> FitResult:
    return fit_and_evaluate(PlainMlpModel(config, schema), splits, train_cfg, use_grid=use_grid, log=log)


# -- slices ---------------------------------------------------------------------

def _applicant_category(inst: ApprovalInstance) -> str:
    return EMPLOYEE_CATEGORIES[inst.applicant.identity[3] - 1]


def _approver_role(inst: ApprovalInstance) -> str:
    return APPROVER_ROLES[inst.approver.identity[1] - 1]


def _affinity_level(inst: ApprovalInstance) -> str:
    return f"C{inst.affinity.affinity_level}"


def _text_tier(inst: ApprovalInstance) -> str:
    return text_tier(inst.texts.reason)


def _permission_type(inst: ApprovalInstance) -> str:
    return PERMISSION_TYPES[inst.resource.permission_type - 1]


SLICE_DIMENSIONS = {
    "applicant_category": (_applicant_category, EMPLOYEE_CATEGORIES),
    "approver_role": (_approver_role, APPROVER_ROLES),
    "affinity_level": (_affinity_level, tuple(f"C{i}" for i in range(6))),
    "text_tier": (_text_tier, ("fuzzy", "general", "business")),
    "permission_type": (_permission_type, PERMISSION_TYPES),
}


@dataclass(frozen=True)
class SliceRow:
    category: str
    n: int
    rate: float
    delta_pp: float


@dataclass(frozen=True)
class SliceReport:
    dimension: str
    anchor: str
    rows: tuple[SliceRow, ...]

    def delta(self, category: str) -> float:
        for r in self.rows:
            if r.category == category:
                return r.delta_pp
        raise KeyError(category)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dimension", "anchor", "category", "n", "rate", "delta_pp"])
        for r in self.rows:
            w.writerow([self.dimension, self.anchor, r.category, r.n, repr(r.rate), repr(r.delta_pp)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "anchor": self.anchor, "rows": [asdict(r) for r in self.rows]}


def slice_categories(instances, dimension: str) -> list[str]:
    try:
        fn, _ = SLICE_DIMENSIONS[dimension]
    except KeyError:
        raise ValueError(f"unknown slice dimension {dimension!r}; choose from {sorted(SLICE_DIMENSIONS)}") from None
    return [fn(inst) for inst in instances]


def slice_analysis(values, instances, dimension: str, anchor: str) -> SliceReport:
    """Mean of ``values`` (labels or predicted pass probabilities) per category,
    reported as percentage-point differences from the anchor category."""
    values = np.asarray(values, dtype=np.float64)
    cats = slice_categories(instances, dimension)
    if len(cats) != values.size:
        raise ValueError(f"{values.size} values for {len(cats)} instances")
    cats_arr = np.array(cats, dtype=object)
    if not (cats_arr == anchor).any():
        raise EmptyAnchor(f"anchor {anchor!r} has no instances in dimension {dimension!r}")
    anchor_rate = float(values[cats_arr == anchor].mean())
    rows = []
    for cat in SLICE_DIMENSIONS[dimension][1]:
        sel = cats_arr == cat
        if not sel.any():
            continue
        rate = float(values[sel].mean())
        rows.append(SliceRow(cat, int(sel.sum()), rate, 100.0 * (rate - anchor_rate)))
    return SliceReport(dimension, anchor, tuple(rows))
