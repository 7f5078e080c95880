"""End-to-end experiment protocols: diversity vs determinism, baseline ordering, data-ratio sweep.

Each protocol takes an :class:`ExperimentScale`. ``FULL_SCALE`` is the desk-scale
budget (64x64 grid, about 2000 target slices, 10k iterations); ``REDUCED_SCALE``
keeps the same protocol at a size a single CPU finishes in hours.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .config import BaselineMode, TrainConfig
from .domains import Domain
from .metrics import SweepAxis, cross_validate, diversity_report, ratio_sweep
from .phantom import DatasetConfig, DatasetManifest, build_dataset, load_manifest, load_slices
from .segmentation import SegConfig
from .trainer import train
from .translation import TranslatorConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentScale:
    name: str
    data: DatasetConfig
    batch_size: int
    iterations: int
    pretrain_iterations: int
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    segmenter: SegConfig = field(default_factory=SegConfig)
    folds: tuple = (0, 1, 2, 3, 4)
    seeds: tuple = (0, 1, 2)
    sweep_grid: tuple = (10, 25, 50, 75, 100)
    n_diversity_slices: int = 50

    def train_config(self, mode: BaselineMode, **kw) -> TrainConfig:
        return TrainConfig(
            mode=mode, batch_size=self.batch_size, iterations=self.iterations,
            pretrain_iterations=self.pretrain_iterations, translator=self.translator, segmenter=self.segmenter, **kw,
        ).validate()


FULL_SCALE = ExperimentScale(
    name="full",
    data=DatasetConfig(n_source=500, n_target=500, labeled_fraction=0.5, slices_per_patient=4, grid_size=64),
    batch_size=32,
    iterations=10_000,
    pretrain_iterations=2_000,
)

REDUCED_SCALE = ExperimentScale(
    name="reduced",
    data=DatasetConfig(n_source=60, n_target=60, labeled_fraction=0.5, slices_per_patient=4, grid_size=32),
    batch_size=8,
    iterations=500,
    pretrain_iterations=200,
    translator=TranslatorConfig(base_width=4, n_res=1, mlp_dim=16, disc_width=4, style_downsample=3),
    segmenter=SegConfig(widths=(4, 8), kernel_size=3),
    sweep_grid=(10, 50, 100),
    n_diversity_slices=40,
)


def ensure_dataset(scale: ExperimentScale, root) -> DatasetManifest:
    root = Path(root)
    if (root / "manifest.json").exists():
        manifest = load_manifest(root)
        if manifest.config == asdict(scale.data):
            return manifest
        raise ValueError(f"{root} holds a dataset with a different configuration")
    return build_dataset(scale.data, root)


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def diversity_experiment(scale: ExperimentScale, work_dir, seed: int = 0, n_styles: int = 10) -> dict:
    """Train stochastic and deterministic translation and compare translation spread and structure."""
    work_dir = Path(work_dir)
    manifest = ensure_dataset(scale, work_dir / "data")
    src = load_slices(manifest, Domain.SOURCE)[: scale.n_diversity_slices]
    out = {"scale": scale.name, "n_styles": n_styles, "n_slices": len(src)}
    for mode in (BaselineMode.STOCH_TRANSLATION_SEG, BaselineMode.DET_TRANSLATION_SEG):
        t0 = time.time()
        model, _ = train(scale.train_config(mode, seed=seed), manifest, work_dir / mode.value)
        model.eval()
        rep = diversity_report(model, src, n_styles=n_styles, seed=seed)
        out[mode.value] = {"diversity": rep.diversity, "structure_dice": rep.structure_dice,
                           "train_seconds": time.time() - t0}
    stoch, det = out["STOCH_TRANSLATION_SEG"], out["DET_TRANSLATION_SEG"]
    out["diversity_ratio"] = stoch["diversity"] / det["diversity"] if det["diversity"] > 0 else float("inf")
    out["dice_gap"] = abs(stoch["structure_dice"] - det["structure_dice"])
    _dump(work_dir / "diversity.json", out)
    return out


ORDERING_MODES = (
    BaselineMode.TARGET_ONLY,
    BaselineMode.DET_TRANSLATION_SEG,
    BaselineMode.STOCH_TRANSLATION_SEG,
    BaselineMode.STOCH_TRANSLATION_SEG_RA,
)


def ordering_experiment(scale: ExperimentScale, work_dir, modes: Sequence[BaselineMode] = ORDERING_MODES) -> dict:
    """Cross-validated metrics of each regime, averaged over seeds per fold."""
    work_dir = Path(work_dir)
    manifest = ensure_dataset(scale, work_dir / "data")
    configs = {m.value: scale.train_config(m) for m in modes}
    table = cross_validate(manifest, configs, folds=scale.folds, seeds=scale.seeds)
    (work_dir / "table.txt").write_text(table.to_text(), encoding="utf-8")
    table.write_csv(work_dir / "table.csv")
    out = {"scale": scale.name, "folds": list(scale.folds), "seeds": list(scale.seeds),
           "ap": {m: table.summary(m)["ap"][0] for m in configs},
           "summary": {m: table.summary(m) for m in configs}}
    _dump(work_dir / "ordering.json", out)
    return out


def sweep_experiment(scale: ExperimentScale, work_dir, axis: SweepAxis = SweepAxis.SYNTH_GIVEN_REAL) -> dict:
    work_dir = Path(work_dir)
    manifest = ensure_dataset(scale, work_dir / "data")
    base = scale.train_config(BaselineMode.STOCH_TRANSLATION_SEG_RA)
    result = ratio_sweep(manifest, base, axis, grid=scale.sweep_grid, seeds=scale.seeds, folds=scale.folds,
                         out_dir=work_dir)
    summary = result.summary()
    out = {"scale": scale.name, "axis": SweepAxis(axis).value, "summary": summary,
           "ap_gain": summary[-1]["ap_mean"] - summary[0]["ap_mean"]}
    _dump(work_dir / "sweep.json", out)
    return out
