"""``uada`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_dataset_config, load_train_config
from .phantom import DatasetConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("uada")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _data_dir(args):
    data = args.data or os.environ.get("UADA_DATA_DIR")
    if not data:
        raise UsageError("no dataset given: pass --data or set UADA_DATA_DIR")
    return Path(data)


def _config_path(args):
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return args.config


@contextmanager
def run_directory(path, force=False):
    """Create ``path`` atomically: populate a temporary sibling, then rename it into place."""
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"run directory exists: {path} (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def _train_config(args) -> TrainConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = load_train_config(_config_path(args), overrides)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _echo_config(run_dir: Path, args):
    if args.config:
        shutil.copyfile(args.config, run_dir / ("config_input" + Path(args.config).suffix))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    from .phantom import build_dataset

    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = load_dataset_config(_config_path(args), overrides)
    manifest = build_dataset(cfg, args.out, jobs=args.jobs)
    print(f"wrote {len(manifest.records)} slices to {args.out}")


def cmd_train(args):
    from .phantom import load_manifest
    from .trainer import train

    cfg = _train_config(args)
    manifest = load_manifest(_data_dir(args))
    with run_directory(args.out, args.force) as tmp:
        _echo_config(tmp, args)
        (tmp / "manifest_ref.txt").write_text(str(Path(manifest.root).resolve()) + "\n")
        train(cfg, manifest, out_dir=tmp, holdout_fold=args.holdout_fold)
    print(f"run written to {args.out}")


def cmd_translate(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch

    from .domains import Domain
    from .phantom import load_manifest, load_slices
    from .trainer import load_model

    model, cfg = load_model(args.ckpt)
    manifest = load_manifest(_data_dir(args))
    slices = load_slices(manifest, Domain.SOURCE)
    idx = [int(i) for i in args.slices.split(",")] if args.slices else [0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    stochastic = cfg.mode.stochastic
    with torch.no_grad():
        for i in idx:
            s = slices[i]
            styles = model.translator.sample_style(args.n, gen)
            if not stochastic:
                styles = torch.zeros_like(styles)
            x = torch.from_numpy(s.image).unsqueeze(0).expand(args.n, -1, -1, -1)
            fakes = model.translator.translate(x, Domain.SOURCE, Domain.TARGET, styles).numpy()
            np.save(out / f"slice{i:04d}_translations.npy", fakes)
            fig, axes = plt.subplots(1, args.n + 1, figsize=(2 * (args.n + 1), 2.2))
            axes[0].imshow(s.image[0], cmap="gray")
            axes[0].contour(s.mask, levels=[0.5], colors="r", linewidths=0.8)
            axes[0].set_title("source")
            for k in range(args.n):
                axes[k + 1].imshow(fakes[k, args.channel], cmap="gray")
                axes[k + 1].set_title(f"style {k}")
            for ax in axes:
                ax.axis("off")
            fig.tight_layout()
            fig.savefig(out / f"slice{i:04d}_translations.{args.format}")
            plt.close(fig)
    print(f"wrote translations of {len(idx)} slice(s) to {out}")


def eval_run(ckpt, data, folds=None, seeds=None, out=None):
    """Library equivalent of ``uada eval``: cross-validate the run's configuration."""
    from .metrics import cross_validate
    from .phantom import load_manifest

    ckpt = Path(ckpt)
    cfg_path = ckpt / "config.json" if ckpt.is_dir() else ckpt.parent / "config.json"
    cfg = TrainConfig.from_dict(json.loads(cfg_path.read_text()))
    manifest = load_manifest(data)
    fold_ids = sorted(manifest.folds)[:folds] if folds else None
    table = cross_validate(manifest, {cfg.mode.value: cfg}, folds=fold_ids, seeds=seeds or (None,))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "metrics.csv")
        (out / "metrics.txt").write_text(table.to_text(), encoding="utf-8")
    return table


def cmd_eval(args):
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = Path(args.out) if args.out else Path(args.ckpt) / "eval"
    table = eval_run(args.ckpt, _data_dir(args), args.folds, seeds, out)
    sys.stdout.write(table.to_text())


def cmd_sweep_ratio(args):
    from .metrics import DEFAULT_GRID, ratio_sweep
    from .phantom import load_manifest

    cfg = _train_config(args)
    manifest = load_manifest(_data_dir(args))
    grid = [float(g) for g in args.grid.split(",")] if args.grid else list(DEFAULT_GRID)
    seeds = [int(s) for s in args.seeds.split(",")]
    folds = sorted(manifest.folds)[: args.folds] if args.folds else None
    with run_directory(args.out, args.force) as tmp:
        _echo_config(tmp, args)
        result = ratio_sweep(manifest, cfg, args.axis, grid=grid, seeds=seeds, folds=folds, out_dir=tmp,
                             jobs=args.jobs)
    for row in result.summary():
        print(f"{row['percent']:6.1f}%  AP {row['ap_mean']:.1f} (± {row['ap_std']:.1f})")


def cmd_plot(args):
    import csv

    from .metrics import SweepAxis, SweepResult

    rows = []
    with open(args.input, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if r["kind"] == "run":
                rows.append({"percent": float(r["percent"]), "seed": int(r["seed"]),
                             **{k: float(r[k]) for k in ("recall", "precision", "dsc", "ap")}})
    axis = SweepAxis(args.axis) if args.axis else next(
        (a for a in SweepAxis if a.value.lower() in Path(args.input).stem), SweepAxis.SYNTH_GIVEN_REAL
    )
    SweepResult(axis=axis, rows=rows).plot(args.out)
    print(f"wrote {args.out}")


def cmd_config(args):
    if args.dump_defaults:
        print(json.dumps({"dataset": asdict(DatasetConfig()), "train": TrainConfig().to_dict()}, indent=2,
                         sort_keys=True))
    elif args.kind == "dataset":
        print(json.dumps(asdict(DatasetConfig()), indent=2, sort_keys=True))
    else:
        print(json.dumps(TrainConfig().to_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uada", description="Uncertainty-aware domain adaptation on synthetic phantoms.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render a phantom dataset and its manifest")
    g.add_argument("--config", help="dataset config (JSON or key=value); defaults from `uada config --kind dataset`")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="master seed (overrides the config)")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (output is identical for any value)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one regime and write a run directory")
    t.add_argument("--config", help="training config (JSON or key=value)")
    t.add_argument("--data", help="dataset directory (default: $UADA_DATA_DIR)")
    t.add_argument("--out", required=True, help="run directory to create")
    t.add_argument("--seed", type=int, help="seed (overrides the config)")
    t.add_argument("--holdout-fold", type=int, default=None, help="exclude this target fold from training")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="write n style-sampled translations of source slices")
    tr.add_argument("--ckpt", required=True, help="run directory or checkpoint file")
    tr.add_argument("--data", help="dataset directory (default: $UADA_DATA_DIR)")
    tr.add_argument("--out", required=True, help="output directory for images")
    tr.add_argument("--n", type=int, default=4, help="number of sampled styles per slice (default 4)")
    tr.add_argument("--slices", help="comma-separated source slice indices (default 0)")
    tr.add_argument("--channel", type=int, default=0, help="target channel to display (default 0)")
    tr.add_argument("--seed", type=int, default=0, help="style sampling seed (default 0)")
    tr.add_argument("--format", default="png", choices=["png", "pdf", "svg"], help="image format (default png)")
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("eval", help="cross-validate a run's configuration and print the metrics table")
    e.add_argument("--ckpt", required=True, help="run directory whose config.json is evaluated")
    e.add_argument("--data", help="dataset directory (default: $UADA_DATA_DIR)")
    e.add_argument("--folds", type=int, default=5, help="number of folds to use (default 5)")
    e.add_argument("--seeds", help="comma-separated seeds to average (default: the run's seed)")
    e.add_argument("--out", help="output directory (default: <ckpt>/eval)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-ratio", help="AP as a function of the real/synthesized data mix")
    s.add_argument("--config", help="base training config")
    s.add_argument("--data", help="dataset directory (default: $UADA_DATA_DIR)")
    s.add_argument("--out", required=True, help="run directory to create")
    s.add_argument("--axis", required=True, choices=["REAL_GIVEN_SYNTH", "SYNTH_GIVEN_REAL", "REAL_WITH_BATCH_RATIO"])
    s.add_argument("--grid", help="comma-separated percentages (default 10,25,50,75,100)")
    s.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    s.add_argument("--folds", type=int, default=None, help="number of folds per point (default: all)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    s.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    s.set_defaults(func=cmd_sweep_ratio)

    pl = sub.add_parser("plot", help="re-plot a sweep CSV")
    pl.add_argument("--input", required=True, help="sweep CSV written by sweep-ratio")
    pl.add_argument("--out", required=True, help="image file (.png, .pdf or .svg)")
    pl.add_argument("--axis", choices=["REAL_GIVEN_SYNTH", "SYNTH_GIVEN_REAL", "REAL_WITH_BATCH_RATIO"],
                    help="sweep axis (default: inferred from the file name)")
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("config", help="print default configurations")
    c.add_argument("--dump-defaults", action="store_true", help="print every default (train and dataset) as JSON")
    c.add_argument("--kind", choices=["train", "dataset"], default="train", help="which config (default train)")
    c.set_defaults(func=cmd_config)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"uada: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"uada: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
