"""Alternating adversarial training and the baseline regimes.

One iteration of a translation mode is a discriminator update (ascending the
adversarial terms) followed by a single joint update of encoders, generators
and segmenter on the weighted objective plus the real-image dice term. The
segmentation-only baselines (target only, fine-tuning, adapters only) reuse the
same segmenter and data pipeline.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .config import BaselineMode, TrainConfig
from .domains import Domain
from .errors import InvalidConfigError, PoisonedLossError
from .losses import LossReport, direction_terms, dice_loss, gan_loss_discriminator, total_objective
from .phantom import DatasetManifest, load_slices
from .segmentation import REAL_DOMAIN, SYNTH_DOMAIN, Segmenter
from .translation import Translator

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "phase", "gan_s", "gan_t", "recon_s", "recon_t", "content_s", "content_t",
               "style_s", "style_t", "cyc_s", "cyc_t", "seg_synth", "seg_real", "disc", "total", "wall_clock")


class UADAModel(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.translator = Translator(config.translator)
        self.segmenter = Segmenter(config.segmenter)
        self.mode = config.mode.value


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Single-threaded, deterministic kernels for bitwise-reproducible runs."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    prev = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(prev)


# ---------------------------------------------------------------------------
# Data


@dataclass
class TrainingData:
    source_x: torch.Tensor  # [N_s, C_s, H, W]
    source_y: torch.Tensor  # [N_s, H, W]
    target_x: torch.Tensor  # every training target image (labeled or not)
    labeled_x: torch.Tensor  # labeled training target images
    labeled_y: torch.Tensor

    @staticmethod
    def _stack(slices, channels):
        if not slices:
            return torch.zeros(0, channels, 1, 1), torch.zeros(0, 1, 1)
        x = torch.from_numpy(np.stack([s.image for s in slices]))
        y = torch.from_numpy(np.stack([s.mask for s in slices]).astype(np.float32))
        return x, y


def _subset_patients(patients, fraction, rng):
    if fraction >= 1.0 or not patients:
        return list(patients)
    k = max(1, int(round(fraction * len(patients))))
    idx = np.sort(rng.choice(len(patients), size=k, replace=False))
    return [patients[i] for i in idx]


def prepare_data(manifest: DatasetManifest, config: TrainConfig, holdout_fold: Optional[int] = None) -> TrainingData:
    """Collect the tensors a run may see.

    Target patients in ``holdout_fold`` are excluded entirely. Masks of
    unlabeled target slices are never loaded into the labeled pool. Source
    data is read only by modes that use it.
    """
    rng = np.random.default_rng([config.seed, 0xDA7A])
    train_folds = [k for k in manifest.folds if k != holdout_fold]
    tgt = load_slices(manifest, Domain.TARGET, fold=train_folds)
    labeled_ids = _subset_patients(
        list(dict.fromkeys(s.patient_id for s in tgt if s.labeled)), config.real_fraction, rng
    )
    labeled = [s for s in tgt if s.labeled and s.patient_id in set(labeled_ids)]
    if not labeled:
        raise InvalidConfigError("no labeled target training data available")

    needs_source = config.mode.uses_translation or config.mode.pretrains
    src = []
    if needs_source:
        src_ids = _subset_patients(manifest.patients(Domain.SOURCE), config.synth_fraction, rng)
        src = load_slices(manifest, Domain.SOURCE, patients=src_ids)

    sx, sy = TrainingData._stack(src, config.translator.source_channels)
    tx, _ = TrainingData._stack(tgt, config.translator.target_channels)
    lx, ly = TrainingData._stack(labeled, config.translator.target_channels)
    return TrainingData(source_x=sx, source_y=sy, target_x=tx, labeled_x=lx, labeled_y=ly)


def split_batch(batch_size: int, synth_ratio: float, rng) -> int:
    """Number of synthesized items in a segmentation batch: stochastic rounding of
    ``synth_ratio * batch_size``, exact in expectation and within one sample."""
    want = synth_ratio * batch_size
    n = int(math.floor(want))
    if rng.random() < want - n:
        n += 1
    return min(n, batch_size)


@dataclass
class Batch:
    source_x: torch.Tensor | None = None
    source_y: torch.Tensor | None = None
    target_x: torch.Tensor | None = None
    real_x: torch.Tensor | None = None
    real_y: torch.Tensor | None = None
    n_synth: int = 0


# ---------------------------------------------------------------------------
# Optimization


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def losses(self, key):
        return [r[key] for r in self.rows if key in r]


class Trainer:
    """Holds the model, optimizers and RNG streams of one run."""

    def __init__(self, config: TrainConfig, model: UADAModel | None = None, phase: str | None = None):
        self.config = config.validate()
        torch.manual_seed(config.seed)
        self.model = model if model is not None else UADAModel(config)
        self.rng = np.random.default_rng([config.seed, 0xBA7C])
        self.style_gen = torch.Generator().manual_seed(config.seed + 1)
        self.step_count = 0
        self.last_checkpoint: Optional[Path] = None
        self.phase = phase or ("joint" if config.mode.uses_translation else "segment")
        self._build_optimizers()

    # -- parameter selection ----------------------------------------------------

    def seg_trainable(self):
        seg = self.model.segmenter
        mode = self.config.mode
        if self.phase == "pretrain":
            return list(seg.backbone_parameters()) + list(seg.stem_parameters(Domain.SOURCE))
        if mode is BaselineMode.RA_ONLY:
            return list(seg.adapter_parameters(REAL_DOMAIN)) + list(seg.stem_parameters(Domain.TARGET))
        params = list(seg.backbone_parameters()) + list(seg.stem_parameters(Domain.TARGET))
        if mode.trains_adapters:
            params += list(seg.adapter_parameters())
        return params

    def _adam(self, params):
        c = self.config
        return torch.optim.Adam(params, lr=c.learning_rate, betas=(c.beta1, c.beta2))

    def _build_optimizers(self):
        self._seg_params = self.seg_trainable()
        self.disc_opt = None
        if self.phase == "joint":
            tr = self.model.translator
            gen_params = list(tr.generator_parameters())
            if not self.config.mode.stochastic:
                # style encoders are unused by one-to-one translation
                skip = {id(p) for p in tr.style_enc.parameters()}
                gen_params = [p for p in gen_params if id(p) not in skip]
            self._gen_params = gen_params + self._seg_params
            self.gen_opt = self._adam(self._gen_params)
            self.disc_opt = self._adam(list(tr.discriminator_parameters()))
        else:
            self._gen_params = self._seg_params
            self.gen_opt = self._adam(self._gen_params)
        trainable = {id(p) for p in self._gen_params}
        if self.disc_opt is not None:
            trainable |= {id(p) for p in self.model.translator.discriminator_parameters()}
        for p in self.model.parameters():
            p.requires_grad_(id(p) in trainable)

    # -- batches --------------------------------------------------------------

    def sample_batch(self, data: TrainingData) -> Batch:
        b = self.config.batch_size
        rng = self.rng

        def pick(n_avail, k):
            return torch.from_numpy(rng.integers(0, n_avail, size=k))

        if self.phase == "pretrain":
            i = pick(len(data.source_x), b)
            return Batch(real_x=data.source_x[i], real_y=data.source_y[i])
        if self.phase == "segment":
            i = pick(len(data.labeled_x), b)
            return Batch(real_x=data.labeled_x[i], real_y=data.labeled_y[i])
        n_synth = split_batch(b, self.config.synth_ratio, rng)
        si = pick(len(data.source_x), b)
        ti = pick(len(data.target_x), b)
        ri = pick(len(data.labeled_x), b - n_synth)
        return Batch(
            source_x=data.source_x[si],
            source_y=data.source_y[si],
            target_x=data.target_x[ti],
            real_x=data.labeled_x[ri],
            real_y=data.labeled_y[ri],
            n_synth=n_synth,
        )

    # -- steps ----------------------------------------------------------------

    def _check_grads(self):
        named = {id(p): n for n, p in self.model.named_parameters()}
        for p in self._gen_params:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise PoisonedLossError(f"gradient of {named[id(p)]}", self.last_checkpoint)

    def train_step(self, batch: Batch) -> LossReport:
        """One update. Returns the report of the generator/segmenter objective."""
        try:
            if self.phase != "joint":
                return self._seg_step(batch)
            return self._joint_step(batch)
        except PoisonedLossError as exc:
            if exc.checkpoint is None and self.last_checkpoint is not None:
                raise PoisonedLossError(exc.term, self.last_checkpoint) from exc
            raise

    def _seg_step(self, batch: Batch) -> LossReport:
        seg = self.model.segmenter
        modality = Domain.SOURCE if self.phase == "pretrain" else Domain.TARGET
        domain = SYNTH_DOMAIN if self.phase == "pretrain" else REAL_DOMAIN
        self.gen_opt.zero_grad(set_to_none=True)
        loss = dice_loss(seg.segment(batch.real_x, domain, modality), batch.real_y, self.config.per_image_dice)
        if not bool(torch.isfinite(loss)):
            raise PoisonedLossError("seg_real", self.last_checkpoint)
        loss.backward()
        self._check_grads()
        self.gen_opt.step()
        self.step_count += 1
        return LossReport(terms={"seg_real": loss.detach()}, total=loss.detach())

    def _joint_step(self, batch: Batch) -> LossReport:
        cfg = self.config
        tr, seg = self.model.translator, self.model.segmenter
        stochastic = cfg.mode.stochastic
        xs, xt = batch.source_x, batch.target_x
        n = len(xs)
        if stochastic:
            s_t = tr.sample_style(n, self.style_gen, dtype=xs.dtype)
            s_s = tr.sample_style(len(xt), self.style_gen, dtype=xs.dtype)
        else:
            s_t = xs.new_zeros(n, tr.cfg.style_dim)
            s_s = xs.new_zeros(len(xt), tr.cfg.style_dim)

        # discriminator update
        with torch.no_grad():
            fake_t = tr.translate(xs, Domain.SOURCE, Domain.TARGET, s_t)
            fake_s = tr.translate(xt, Domain.TARGET, Domain.SOURCE, s_s)
        self.disc_opt.zero_grad(set_to_none=True)
        d_loss = gan_loss_discriminator(tr.discriminate(xt, Domain.TARGET), tr.discriminate(fake_t, Domain.TARGET))
        d_loss = d_loss + gan_loss_discriminator(tr.discriminate(xs, Domain.SOURCE), tr.discriminate(fake_s, Domain.SOURCE))
        if not bool(torch.isfinite(d_loss)):
            raise PoisonedLossError("disc", self.last_checkpoint)
        d_loss.backward()
        self.disc_opt.step()

        # joint encoder / generator / segmenter update; discriminators frozen
        for p in tr.discriminator_parameters():
            p.requires_grad_(False)
        try:
            self.gen_opt.zero_grad(set_to_none=True)
            st = direction_terms(tr, xs, s_t, Domain.SOURCE, cfg.non_saturating, use_style=stochastic)
            ts = direction_terms(tr, xt, s_s, Domain.TARGET, cfg.non_saturating, use_style=stochastic)
            terms = {}
            for key in ("gan", "recon", "content", "style", "cyc"):
                # adversarial and style terms are named after the domain translated into,
                # reconstruction, content and cycle terms after the input domain
                into = key in ("gan", "style")
                terms[f"{key}_s"] = getattr(ts if into else st, key)
                terms[f"{key}_t"] = getattr(st if into else ts, key)
            if batch.n_synth > 0:
                fake = st.fake[: batch.n_synth]
                if self.step_count < cfg.seg_warmup:
                    fake = fake.detach()
                terms["seg_synth"] = dice_loss(
                    seg.segment(fake, SYNTH_DOMAIN), batch.source_y[: batch.n_synth], cfg.per_image_dice
                )
            report = total_objective(terms, cfg.weights)
            objective = report.total
            if batch.real_x is not None and len(batch.real_x) > 0:
                seg_real = dice_loss(seg.segment(batch.real_x, REAL_DOMAIN), batch.real_y, cfg.per_image_dice)
                if not bool(torch.isfinite(seg_real)):
                    raise PoisonedLossError("seg_real", self.last_checkpoint)
                objective = objective + seg_real
                report.terms["seg_real"] = seg_real
            objective.backward()
            self._check_grads()
            self.gen_opt.step()
        finally:
            for p in tr.discriminator_parameters():
                p.requires_grad_(True)
        self.step_count += 1
        report.terms = {k: v.detach() if torch.is_tensor(v) else v for k, v in report.terms.items()}
        report.terms["disc"] = d_loss.detach()
        report.total = objective.detach()
        return report

    def checkpoint(self, path) -> Path:
        self.last_checkpoint = save_checkpoint(path, self.model.state_dict(), self.config.to_dict())
        return self.last_checkpoint


def load_model(path, config: TrainConfig | None = None) -> tuple[UADAModel, TrainConfig]:
    """Rebuild a model from a checkpoint (path to the file or to a run directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "final.ckpt"
    state, cfg_dict = load_checkpoint(path)
    config = config or TrainConfig.from_dict(cfg_dict)
    model = UADAModel(config)
    model.load_state_dict(state)
    return model, config


# ---------------------------------------------------------------------------
# Runs


def _row(step, phase, report: LossReport, t0):
    row = {"step": step, "phase": phase}
    row.update(report.values)
    row["wall_clock"] = time.time() - t0
    return row


def _run_loop(trainer: Trainer, data: TrainingData, iterations: int, history: TrainHistory, out_dir, log_writer,
              validate=None, validate_every=0):
    cfg = trainer.config
    t0 = time.time()
    for it in range(iterations):
        report = trainer.train_step(trainer.sample_batch(data))
        row = _row(trainer.step_count, trainer.phase, report, t0)
        history.rows.append(row)
        if log_writer is not None:
            log_writer.writerow(row)
        if out_dir is not None and cfg.checkpoint_every and trainer.step_count % cfg.checkpoint_every == 0:
            trainer.checkpoint(Path(out_dir) / f"{trainer.phase}_{trainer.step_count:06d}.ckpt")
        if validate is not None and validate_every and (it + 1) % validate_every == 0:
            history.validation.append({"step": trainer.step_count, **validate(trainer.model)})


@contextlib.contextmanager
def _log_file(out_dir, name="train_log.csv"):
    if out_dir is None:
        yield None
        return
    with open(Path(out_dir) / name, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", restval="")
        writer.writeheader()
        yield writer


def pretrain_source(config: TrainConfig, manifest: DatasetManifest, out_dir=None, iterations=None,
                    data: TrainingData | None = None) -> tuple[UADAModel, TrainHistory]:
    """Segmentation-only training on source slices; adapters stay at zero."""
    iterations = config.pretrain_iterations if iterations is None else iterations
    if data is None:
        pre_cfg = TrainConfig.from_dict({**config.to_dict(), "mode": BaselineMode.FINETUNE.value})
        data = prepare_data(manifest, pre_cfg)
    history = TrainHistory()
    with deterministic_mode(config.deterministic):
        trainer = Trainer(config, phase="pretrain")
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
        with _log_file(out_dir, "pretrain_log.csv") as writer:
            _run_loop(trainer, data, iterations, history, out_dir, writer)
        if out_dir is not None:
            trainer.checkpoint(Path(out_dir) / "pretrain.ckpt")
    return trainer.model, history


def train(config: TrainConfig, manifest: DatasetManifest, out_dir=None, holdout_fold: Optional[int] = None,
          data: TrainingData | None = None, validate=None, validate_every=0) -> tuple[UADAModel, TrainHistory]:
    """Run the regime named by ``config.mode``.

    With ``out_dir`` the run writes ``config.json``, ``train_log.csv`` and
    ``final.ckpt`` (plus periodic checkpoints if configured).
    """
    config.validate()
    data = data if data is not None else prepare_data(manifest, config, holdout_fold)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    history = TrainHistory()
    with deterministic_mode(config.deterministic):
        model = None
        if config.mode.pretrains:
            torch.manual_seed(config.seed)
            pre = Trainer(config, phase="pretrain")
            with _log_file(out_dir, "pretrain_log.csv") as writer:
                _run_loop(pre, data, config.pretrain_iterations, history, None, writer)
            if out_dir is not None:
                pre.checkpoint(out_dir / "pretrain.ckpt")
            model = pre.model
        trainer = Trainer(config, model=model)
        with _log_file(out_dir) as writer:
            _run_loop(trainer, data, config.iterations, history, out_dir, writer, validate, validate_every)
        if out_dir is not None:
            trainer.checkpoint(out_dir / "final.ckpt")
    return trainer.model, history
