"""Segmentation metrics, fold aggregation, diversity diagnostics and ratio sweeps.

Counting metrics binarize probabilities at 0.5. Average precision is voxel
level, pooled per patient. Fold aggregates use the sample (n-1) standard
deviation. Metric tables report percentages.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import BaselineMode, TrainConfig
from .domains import Domain
from .errors import InvalidConfigError
from .phantom import DatasetManifest, PhantomSlice, load_slices
from .segmentation import REAL_DOMAIN, SYNTH_DOMAIN

log = logging.getLogger(__name__)

THRESHOLD = 0.5
TABLE_HEADER = (
    "# metrics in percent; mean (± sample std) over folds; threshold 0.5; "
    "AP is voxel-level pooled per patient, patients without lesions excluded from AP"
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred_prob, mask, threshold: float = THRESHOLD) -> ConfusionCounts:
    pred_prob = np.asarray(pred_prob)
    mask = np.asarray(mask)
    if pred_prob.shape != mask.shape:
        raise ValueError(f"shape mismatch: {pred_prob.shape} vs {mask.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    p = pred_prob >= threshold
    m = mask.astype(bool)
    tp = int(np.count_nonzero(p & m))
    fp = int(np.count_nonzero(p & ~m))
    fn = int(np.count_nonzero(~p & m))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num, den, empty_ok):
    # Zero denominator: 1 when both sides are empty, else 0.
    if den == 0:
        return 1.0 if empty_ok else 0.0
    return num / den


def recall(cc: ConfusionCounts) -> float:
    return _ratio(cc.tp, cc.tp + cc.fn, empty_ok=(cc.fp == 0))


def precision(cc: ConfusionCounts) -> float:
    return _ratio(cc.tp, cc.tp + cc.fp, empty_ok=(cc.fn == 0))


def dsc_metric(cc: ConfusionCounts) -> float:
    return _ratio(2 * cc.tp, 2 * cc.tp + cc.fp + cc.fn, empty_ok=True)


def average_precision(pred_prob, mask) -> float:
    """Step-wise area under the precision-recall curve over all score thresholds.

    Tied scores form one threshold. Returns NaN when the mask has no positives.
    """
    scores = np.asarray(pred_prob, dtype=np.float64).ravel()
    labels = np.asarray(mask).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {np.shape(pred_prob)} vs {np.shape(mask)}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        log.warning("average precision undefined for an empty mask")
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    # last index of each run of tied scores
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = tp[last]
    precision_at = tp / (last + 1)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision_at))


# ---------------------------------------------------------------------------
# Evaluating a trained segmenter


@torch.no_grad()
def predict(segmenter, slices: Sequence[PhantomSlice], domain: int = REAL_DOMAIN, batch: int = 64) -> list[np.ndarray]:
    out = []
    for i in range(0, len(slices), batch):
        x = torch.from_numpy(np.stack([s.image for s in slices[i : i + batch]]))
        out.extend(segmenter.segment(x.to(next(segmenter.parameters()).dtype), domain).numpy())
    return out


def patient_metrics(probs: Sequence[np.ndarray], slices: Sequence[PhantomSlice]) -> dict:
    """Per-patient recall / precision / DSC / AP (percent), voxels pooled over each patient's slices."""
    by_patient: dict[str, list[int]] = {}
    for i, s in enumerate(slices):
        by_patient.setdefault(s.patient_id, []).append(i)
    rows = {}
    for pid, idx in by_patient.items():
        p = np.concatenate([probs[i].ravel() for i in idx])
        m = np.concatenate([slices[i].mask.ravel() for i in idx])
        cc = confusion(p, m)
        ap = average_precision(p, m) if m.any() else float("nan")
        rows[pid] = {"recall": 100 * recall(cc), "precision": 100 * precision(cc), "dsc": 100 * dsc_metric(cc),
                     "ap": 100 * ap}
    return rows


def fold_metrics(patient_rows: dict) -> dict:
    """Average per-patient metrics; AP ignores patients without lesions."""
    out = {}
    for key in ("recall", "precision", "dsc", "ap"):
        vals = [r[key] for r in patient_rows.values() if not math.isnan(r[key])]
        excluded = len(patient_rows) - len(vals)
        if key == "ap" and excluded:
            log.info("AP: excluded %d lesion-free patient(s)", excluded)
        out[key] = float(np.mean(vals)) if vals else float("nan")
    return out


# ---------------------------------------------------------------------------
# Tables


METRIC_KEYS = ("recall", "precision", "dsc", "ap")
METRIC_LABELS = {"recall": "Recall", "precision": "Precision", "dsc": "DSC", "ap": "AP"}


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.1f} (± {std:.1f})"


def mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class MetricTable:
    """Per-method, per-fold metric values with mean (± std) summaries."""

    per_fold: dict = field(default_factory=dict)  # method -> list of {metric: value}
    n_folds: int = 5

    def summary(self, method) -> dict:
        rows = self.per_fold[method]
        return {k: mean_std([r[k] for r in rows]) for k in METRIC_KEYS}

    def format_row(self, method) -> list[str]:
        s = self.summary(method)
        return [method] + [format_mean_std(*s[k]) for k in METRIC_KEYS]

    def to_text(self) -> str:
        header = ["Model"] + [METRIC_LABELS[k] for k in METRIC_KEYS]
        rows = [header] + [self.format_row(m) for m in self.per_fold]
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = [TABLE_HEADER]
        for r in rows:
            lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "fold"] + list(METRIC_KEYS))
            for method, rows in self.per_fold.items():
                for f, r in enumerate(rows):
                    w.writerow([method, f] + [repr(r[k]) for k in METRIC_KEYS])
                for label, idx in (("mean", 0), ("std", 1)):
                    s = self.summary(method)
                    w.writerow([method, label] + [repr(s[k][idx]) for k in METRIC_KEYS])


def _nanmean(values) -> float:
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else float("nan")


def cross_validate(
    manifest: DatasetManifest,
    configs: dict[str, TrainConfig],
    folds: Optional[Sequence[int]] = None,
    seeds: Sequence[int] = (None,),
    train_fn: Optional[Callable] = None,
    out_dir=None,
) -> MetricTable:
    """Train one model per (method, fold, seed) on the other folds and evaluate on the held-out fold.

    Each fold value is the mean over that fold's labeled patients, averaged
    over seeds; the table reports mean and sample std over folds.
    """
    from .trainer import train

    train_fn = train_fn or train
    folds = list(manifest.folds) if folds is None else list(folds)
    table = MetricTable(n_folds=len(folds))
    for f in folds:
        eval_slices = load_slices(manifest, Domain.TARGET, fold=f, labeled=True)
        if not eval_slices:
            raise InvalidConfigError(f"fold {f} has no labeled evaluation slices")
    for method, config in configs.items():
        rows = []
        for f in folds:
            eval_slices = load_slices(manifest, Domain.TARGET, fold=f, labeled=True)
            per_seed = []
            for seed in seeds:
                cfg = config if seed is None else replace(config, seed=seed)
                run_dir = None if out_dir is None else Path(out_dir) / method / f"fold{f}_seed{cfg.seed}"
                model, _ = train_fn(cfg, manifest, out_dir=run_dir, holdout_fold=f)
                model.eval()
                per_seed.append(fold_metrics(patient_metrics(predict(model.segmenter, eval_slices), eval_slices)))
            rows.append({k: _nanmean([r[k] for r in per_seed]) for k in METRIC_KEYS})
            log.info("%s fold %d: %s", method, f, rows[-1])
        table.per_fold[method] = rows
    return table


# ---------------------------------------------------------------------------
# Diversity (one-to-many translation diagnostics)


@dataclass
class DiversityReport:
    per_slice_std: list  # mean per-pixel std across style samples, per source slice
    per_slice_dice: list  # mean DSC (percent) of segmentations of translations vs the source mask
    n_styles: int

    @property
    def diversity(self) -> float:
        return float(np.mean(self.per_slice_std))

    @property
    def structure_dice(self) -> float:
        return float(np.nanmean(self.per_slice_dice))


@torch.no_grad()
def diversity_report(model, source_slices: Sequence[PhantomSlice], n_styles: int = 10, seed: int = 0,
                     stochastic: Optional[bool] = None) -> DiversityReport:
    """Translate every source slice with ``n_styles`` sampled styles.

    ``stochastic=False`` forces the zero style (one-to-one translation); by
    default it follows the checkpoint's training mode when known.
    """
    if n_styles < 2:
        raise ValueError(f"n_styles must be >= 2, got {n_styles}")
    tr, seg = model.translator, model.segmenter
    if stochastic is None:
        mode = getattr(model, "mode", None)
        stochastic = True if mode is None else BaselineMode(mode).stochastic
    gen = torch.Generator().manual_seed(seed)
    stds, dices = [], []
    for s in source_slices:
        x = torch.from_numpy(s.image).unsqueeze(0).expand(n_styles, -1, -1, -1)
        styles = tr.sample_style(n_styles, gen)
        if not stochastic:
            styles = torch.zeros_like(styles)
        fakes = tr.translate(x, Domain.SOURCE, Domain.TARGET, styles)
        stds.append(float(fakes.std(dim=0, unbiased=False).mean()))
        probs = seg.segment(fakes, SYNTH_DOMAIN).numpy()
        dices.append(float(np.mean([100 * dsc_metric(confusion(p, s.mask)) for p in probs])))
    return DiversityReport(per_slice_std=stds, per_slice_dice=dices, n_styles=n_styles)


# ---------------------------------------------------------------------------
# Ratio sweeps


class SweepAxis(str, enum.Enum):
    REAL_GIVEN_SYNTH = "REAL_GIVEN_SYNTH"  # vary labeled real share, synthesized budget fixed
    SYNTH_GIVEN_REAL = "SYNTH_GIVEN_REAL"  # vary synthesized budget, real share fixed
    REAL_WITH_BATCH_RATIO = "REAL_WITH_BATCH_RATIO"  # vary real share and the mini-batch mix with it


DEFAULT_GRID = (10, 25, 50, 75, 100)


def sweep_config(base: TrainConfig, axis: SweepAxis, percent: float) -> TrainConfig:
    frac = percent / 100.0
    axis = SweepAxis(axis)
    if axis is SweepAxis.SYNTH_GIVEN_REAL:
        return replace(base, synth_fraction=frac)
    if axis is SweepAxis.REAL_GIVEN_SYNTH:
        return replace(base, real_fraction=frac)
    # Mini-batch mix follows the data mix: less real data, more synthesized per batch.
    ratio = base.synth_fraction / (base.synth_fraction + frac)
    return replace(base, real_fraction=frac, synth_ratio=ratio)


@dataclass
class SweepResult:
    axis: SweepAxis
    rows: list  # dicts: percent, seed, ap (plus the other metrics)

    def summary(self) -> list[dict]:
        out = []
        for pct in sorted({r["percent"] for r in self.rows}):
            vals = [r["ap"] for r in self.rows if r["percent"] == pct]
            m, s = mean_std(vals)
            out.append({"percent": pct, "ap_mean": m, "ap_std": s, "n": len(vals)})
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "percent", "seed"] + list(METRIC_KEYS))
            for r in self.rows:
                w.writerow(["run", r["percent"], r["seed"]] + [repr(r[k]) for k in METRIC_KEYS])
            for s in self.summary():
                w.writerow(["mean", s["percent"], ""] + ["", "", "", repr(s["ap_mean"])])
                w.writerow(["std", s["percent"], ""] + ["", "", "", repr(s["ap_std"])])

    def plot(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        s = self.summary()
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar([r["percent"] for r in s], [r["ap_mean"] for r in s], yerr=[r["ap_std"] for r in s],
                    marker="o", capsize=3)
        xlabel = "synthesized data (%)" if self.axis is SweepAxis.SYNTH_GIVEN_REAL else "real data (%)"
        ax.set(xlabel=xlabel, ylabel="AP (%)", title=self.axis.value)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def _sweep_point(task):
    manifest, cfg, pct, folds, train_fn = task
    name = f"{pct:g}% seed {cfg.seed}"
    table = cross_validate(manifest, {name: cfg}, folds=folds, train_fn=train_fn)
    return {"percent": pct, "seed": cfg.seed, **{k: table.summary(name)[k][0] for k in METRIC_KEYS}}


def ratio_sweep(
    manifest: DatasetManifest,
    base: TrainConfig,
    axis: SweepAxis,
    grid: Sequence[float] = DEFAULT_GRID,
    seeds: Sequence[int] = (0, 1, 2),
    folds: Optional[Sequence[int]] = None,
    train_fn: Optional[Callable] = None,
    out_dir=None,
    jobs: int = 1,
) -> SweepResult:
    """One cross-validated model per (grid point, seed); AP vs percentage."""
    if not grid:
        raise ValueError("ratio sweep needs a non-empty grid")
    axis = SweepAxis(axis)
    tasks = [(manifest, replace(sweep_config(base, axis, pct), seed=seed), pct, folds, train_fn)
             for pct in grid for seed in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    result = SweepResult(axis=axis, rows=rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.write_csv(out_dir / f"sweep_{axis.value.lower()}.csv")
        result.plot(out_dir / f"sweep_{axis.value.lower()}.png")
    return result
