import csv
import math
from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from uada.config import BaselineMode
from uada.domains import Domain
from uada.losses import dice_loss
from uada.metrics import (
    ConfusionCounts,
    MetricTable,
    SweepAxis,
    TABLE_HEADER,
    average_precision,
    confusion,
    cross_validate,
    diversity_report,
    dsc_metric,
    fold_metrics,
    format_mean_std,
    mean_std,
    patient_metrics,
    precision,
    ratio_sweep,
    recall,
    sweep_config,
)
from uada.errors import InvalidConfigError
from uada.phantom import DatasetConfig, build_dataset, load_slices
from uada.trainer import UADAModel

from .conftest import small_train_config

shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))


def brute_counts(pred, mask, thr=0.5):
    tp = fp = fn = tn = 0
    for p, m in zip(np.ravel(pred), np.ravel(mask)):
        hit = p >= thr
        if hit and m:
            tp += 1
        elif hit:
            fp += 1
        elif m:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def fraction_ap(scores, labels):
    """Exact step-wise AP: one threshold per distinct score."""
    scores = [Fraction(s) for s in scores]
    n_pos = sum(labels)
    ap, prev_tp = Fraction(0), 0
    for t in sorted(set(scores), reverse=True):
        chosen = [l for s, l in zip(scores, labels) if s >= t]
        tp = sum(chosen)
        ap += Fraction(tp - prev_tp, n_pos) * Fraction(tp, len(chosen))
        prev_tp = tp
    return ap


def test_confusion_trivial():
    mask = np.array([[1, 0], [0, 1]])
    assert confusion(mask.astype(float), mask) == ConfusionCounts(2, 0, 0, 2)
    cc = confusion(1.0 - mask, mask)
    assert cc.tp == 0 and cc.tn == 0


@given(shapes.flatmap(lambda s: st.tuples(
    arrays(np.float64, s, elements=st.floats(0, 1)), arrays(np.uint8, s, elements=st.integers(0, 1)))))
@settings(max_examples=200, deadline=None)
def test_confusion_brute_force(case):
    pred, mask = case
    cc = confusion(pred, mask)
    assert cc == brute_counts(pred, mask)
    assert cc.tp + cc.fp + cc.fn + cc.tn == pred.size


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion(np.zeros(2), np.zeros(2), threshold=1.0)


def test_ratio_metrics_examples():
    cc = ConfusionCounts(2, 0, 0, 5)
    assert recall(cc) == precision(cc) == dsc_metric(cc) == 1.0
    cc = ConfusionCounts(0, 3, 2, 5)
    assert recall(cc) == precision(cc) == dsc_metric(cc) == 0.0
    cc = ConfusionCounts(3, 1, 2, 5)
    assert recall(cc) == pytest.approx(0.6)
    assert precision(cc) == pytest.approx(0.75)
    assert dsc_metric(cc) == pytest.approx(2 * 3 / (6 + 1 + 2))
    assert dsc_metric(cc) == pytest.approx(0.6667, abs=1e-4)


def test_zero_denominator_convention():
    empty = ConfusionCounts(0, 0, 0, 9)
    assert recall(empty) == precision(empty) == dsc_metric(empty) == 1.0
    # empty mask, non-empty prediction
    assert recall(ConfusionCounts(0, 2, 0, 7)) == 0.0
    # empty prediction, non-empty mask
    assert precision(ConfusionCounts(0, 0, 2, 7)) == 0.0


@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
def test_ratio_metrics_in_unit_interval(tp, fp, fn, tn):
    cc = ConfusionCounts(tp, fp, fn, tn)
    for f in (recall, precision, dsc_metric):
        assert 0.0 <= f(cc) <= 1.0


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision([0.9, 0.8, 0.7], [0, 0, 1]) == pytest.approx(1 / 3)
    assert average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0


def test_ap_empty_mask_is_nan(caplog):
    assert math.isnan(average_precision([0.2, 0.3], [0, 0]))
    assert "empty mask" in caplog.text


def test_ap_ties_form_one_threshold():
    # all tied: precision equals prevalence
    assert average_precision([0.5] * 4, [1, 0, 0, 0]) == pytest.approx(0.25)
    assert float(fraction_ap([0.5] * 4, [1, 0, 0, 0])) == pytest.approx(0.25)


@given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 1)), min_size=1, max_size=40))
@settings(max_examples=300, deadline=None)
def test_ap_matches_exact_oracle(pairs):
    scores = [s / 10 for s, _ in pairs]
    labels = [l for _, l in pairs]
    if not any(labels):
        return
    exact = fraction_ap([Fraction(s, 10) for s, _ in pairs], labels)
    assert average_precision(scores, labels) == pytest.approx(float(exact), rel=1e-12)


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 1)), min_size=1, max_size=40))
@settings(max_examples=200, deadline=None)
def test_ap_monotone_invariance(pairs):
    s = np.array([p[0] for p in pairs], dtype=np.float64) / 50
    y = np.array([p[1] for p in pairs])
    if not y.any():
        return
    base = average_precision(s, y)
    for f in (lambda v: v**3 + 2 * v, lambda v: np.exp(4 * v) - 7, lambda v: 1 / (1 + np.exp(-10 * (v - 0.3)))):
        assert average_precision(f(s), y) == pytest.approx(base, rel=1e-12)


@given(shapes.flatmap(lambda s: st.tuples(
    arrays(np.float64, s, elements=st.floats(0, 1)), arrays(np.uint8, s, elements=st.integers(0, 1)))))
@settings(max_examples=200, deadline=None)
def test_dsc_is_negated_dice_on_binarized_prediction(case):
    pred, mask = case
    binary = (pred >= 0.5).astype(np.float64)
    dsc = dsc_metric(confusion(pred, mask))
    loss = dice_loss(torch.from_numpy(binary), torch.from_numpy(mask.astype(np.float64))).item()
    if binary.any() or mask.any():
        # the loss is the negated Dice coefficient; eps only perturbs the denominator
        assert 1 + loss == pytest.approx(1 - dsc, abs=1e-6)
    else:
        assert dsc == 1.0 and loss == 0.0


def test_format_mean_std():
    assert format_mean_std(69.9, 9.0) == "69.9 (± 9.0)"
    assert format_mean_std(*mean_std([70.0] * 5)) == "70.0 (± 0.0)"


def test_fold_aggregation_sample_std():
    vals = [60, 62, 64, 66, 68]
    m, s = mean_std(vals)
    expected_std = math.sqrt(sum((v - 64) ** 2 for v in vals) / (len(vals) - 1))
    assert m == 64.0
    assert s == pytest.approx(expected_std, rel=1e-12)
    assert s == pytest.approx(math.sqrt(10))
    assert format_mean_std(m, s) == "64.0 (± 3.2)"


def test_metric_table_recompute(tmp_path):
    rng = np.random.default_rng(0)
    table = MetricTable(per_fold={
        name: [{k: float(v) for k, v in zip(("recall", "precision", "dsc", "ap"), rng.uniform(30, 90, 4))}
               for _ in range(5)]
        for name in ("TARGET_ONLY", "STOCH_TRANSLATION_SEG_RA")
    })
    text = table.to_text()
    assert text.startswith(TABLE_HEADER)
    assert "Model" in text and "(± " in text
    path = tmp_path / "t.csv"
    table.write_csv(path)
    rows = list(csv.DictReader(path.open()))
    for method in table.per_fold:
        folds = [r for r in rows if r["method"] == method and r["fold"].isdigit()]
        assert len(folds) == 5
        stored = {r["fold"]: r for r in rows if r["method"] == method and not r["fold"].isdigit()}
        for key in ("recall", "precision", "dsc", "ap"):
            vals = [float(r[key]) for r in folds]
            assert float(stored["mean"][key]) == pytest.approx(np.mean(vals), abs=1e-9)
            assert float(stored["std"][key]) == pytest.approx(np.std(vals, ddof=1), abs=1e-9)
            assert float(stored["std"][key]) >= 0


def test_patient_metrics_pool_slices(small_dataset):
    slices = load_slices(small_dataset, Domain.TARGET, labeled=True)
    probs = [s.mask.astype(np.float32) for s in slices]
    rows = patient_metrics(probs, slices)
    assert set(rows) == {s.patient_id for s in slices}
    for pid, r in rows.items():
        assert r["dsc"] == 100.0 and r["recall"] == 100.0 and r["precision"] == 100.0
        has_lesion = any(s.mask.any() for s in slices if s.patient_id == pid)
        assert (r["ap"] == 100.0) if has_lesion else math.isnan(r["ap"])
    agg = fold_metrics(rows)
    assert agg["ap"] == 100.0 or math.isnan(agg["ap"])


class ConstantSeg(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(()))
        self.value = value

    def segment(self, x, domain=None):
        return torch.full((x.shape[0], x.shape[2], x.shape[3]), self.value)


class StubModel(nn.Module):
    def __init__(self, value=0.2):
        super().__init__()
        self.segmenter = ConstantSeg(value)


def stub_train(calls=None):
    def fn(cfg, manifest, out_dir=None, holdout_fold=None):
        if calls is not None:
            calls.append((cfg.seed, holdout_fold, cfg.real_fraction, cfg.synth_fraction))
        return StubModel(), None
    return fn


def _constant_predictor_oracle(manifest, fold):
    """Per-fold recall and AP of an all-negative constant-score predictor."""
    slices = load_slices(manifest, Domain.TARGET, fold=fold, labeled=True)
    per = {}
    for s in slices:
        per.setdefault(s.patient_id, []).append(s.mask)
    prevalence = [np.mean(np.concatenate([m.ravel() for m in ms])) for ms in per.values()]
    # lesion-free patients score recall 1 by the empty-mask convention
    rec = 100 * np.mean([p == 0 for p in prevalence])
    aps = [100 * a for a in prevalence if a > 0]
    return rec, (np.mean(aps) if aps else float("nan"))


def test_cross_validate_with_constant_predictor(small_dataset):
    calls = []
    folds = [f for f in small_dataset.folds if load_slices(small_dataset, Domain.TARGET, fold=f, labeled=True)]
    table = cross_validate(small_dataset, {"const": small_train_config()}, folds=folds, seeds=(0, 1),
                           train_fn=stub_train(calls))
    assert len(calls) == 2 * len(folds)
    assert {c[1] for c in calls} == set(folds)
    rows = table.per_fold["const"]
    for f, row in zip(folds, rows):
        rec, ap = _constant_predictor_oracle(small_dataset, f)
        assert row["recall"] == pytest.approx(rec, rel=1e-12)
        # constant scores: one threshold, AP is the lesion prevalence
        assert row["ap"] == pytest.approx(ap, rel=1e-9, nan_ok=True)


def test_cross_validate_rejects_unlabeled_fold(tmp_path):
    manifest = build_dataset(
        DatasetConfig(n_source=2, n_target=5, labeled_fraction=0.2, slices_per_patient=1, grid_size=32, seed=1),
        tmp_path,
    )
    with pytest.raises(InvalidConfigError, match="fold 1"):
        cross_validate(manifest, {"m": small_train_config()}, folds=[0, 1], train_fn=stub_train())


def test_diversity_report(small_dataset):
    src = load_slices(small_dataset, Domain.SOURCE)[:3]
    stoch = UADAModel(small_train_config(mode=BaselineMode.STOCH_TRANSLATION_SEG_RA))
    det = UADAModel(small_train_config(mode=BaselineMode.DET_TRANSLATION_SEG))
    a = diversity_report(stoch, src, n_styles=4, seed=3)
    b = diversity_report(stoch, src, n_styles=4, seed=3)
    assert a.per_slice_std == b.per_slice_std and a.per_slice_dice == b.per_slice_dice
    d = diversity_report(det, src, n_styles=4)
    assert d.diversity < 1e-6
    assert a.diversity > d.diversity
    assert len(a.per_slice_std) == 3 and all(0 <= v <= 100 for v in a.per_slice_dice)
    with pytest.raises(ValueError):
        diversity_report(stoch, src, n_styles=1)


def test_sweep_configs():
    base = small_train_config(synth_fraction=1.0)
    assert sweep_config(base, SweepAxis.SYNTH_GIVEN_REAL, 25).synth_fraction == 0.25
    assert sweep_config(base, SweepAxis.REAL_GIVEN_SYNTH, 50).real_fraction == 0.5
    cfg = sweep_config(base, SweepAxis.REAL_WITH_BATCH_RATIO, 25)
    assert cfg.real_fraction == 0.25 and cfg.synth_ratio == pytest.approx(1 / 1.25)


def test_ratio_sweep_shape(small_dataset, tmp_path):
    folds = [f for f in small_dataset.folds if load_slices(small_dataset, Domain.TARGET, fold=f, labeled=True)]
    calls = []
    res = ratio_sweep(small_dataset, small_train_config(), SweepAxis.SYNTH_GIVEN_REAL, grid=(10, 100),
                      seeds=(0, 1), folds=folds, train_fn=stub_train(calls), out_dir=tmp_path)
    assert len(res.rows) == 4
    assert sorted({c[3] for c in calls}) == [0.1, 1.0]
    lines = list(csv.reader((tmp_path / "sweep_synth_given_real.csv").open()))
    kinds = [l[0] for l in lines[1:]]
    assert kinds.count("run") == 4 and kinds.count("mean") == 2 and kinds.count("std") == 2
    assert (tmp_path / "sweep_synth_given_real.png").stat().st_size > 0
    with pytest.raises(ValueError):
        ratio_sweep(small_dataset, small_train_config(), SweepAxis.SYNTH_GIVEN_REAL, grid=())


def test_single_point_sweep_is_cross_validation(small_dataset):
    folds = [f for f in small_dataset.folds if load_slices(small_dataset, Domain.TARGET, fold=f, labeled=True)]
    base = small_train_config()
    res = ratio_sweep(small_dataset, base, SweepAxis.REAL_GIVEN_SYNTH, grid=(100,), seeds=(0,), folds=folds,
                      train_fn=stub_train())
    table = cross_validate(small_dataset, {"m": base}, folds=folds, train_fn=stub_train())
    assert res.rows[0]["ap"] == pytest.approx(table.summary("m")["ap"][0], rel=1e-12, nan_ok=True)
