"""Command-line entry point: ``mmguide {synth,train,ablate,dump-features}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from ._io import atomic_write_bytes, atomic_write_text
from .backbone import build_backbone
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .guidance import GuidanceModel, ModalityRoles, upsample_to
from .metrics import METRIC_NAMES, MetricsReport, reports_to_csv
from .training import (
    BackboneClassifier,
    FoldError,
    NumericError,
    TrainConfig,
    ablate_fold,
    cross_validate,
    derive_seed,
    eval_tensor,
    evaluate,
    parse_kind,
    secondary_subsets,
    train_stage1,
    train_stage2,
)
from .volume import VolumeFormatError, read_dataset, split_folds, synth_dataset, write_dataset

log = logging.getLogger("mmguide")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_ROLES = "0,3,1,2"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- run manifest


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: list
    config: dict
    seeds: dict
    dataset_fingerprint: str
    started: str
    outputs: list

    def write(self, path: Path, force: bool) -> None:
        if path.exists() and not force:
            raise UsageError(f"{path} already exists; pass --force to start a new run there")
        atomic_write_text(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(path.read_text()))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _stage1_manifest(out: Path):
    for name in ("manifest-train-all.json", "manifest-train-stage1.json"):
        if (out / name).exists():
            return RunManifest.read(out / name)
    return None


def _check_drift(out: Path, fingerprint: str, cfg: TrainConfig, folds: int, roles: ModalityRoles) -> None:
    """Later stages must reuse the dataset and architecture of the stage-1 run."""
    prior = _stage1_manifest(out)
    if prior is None:
        return
    if prior.dataset_fingerprint != fingerprint:
        raise DataError(f"dataset changed since stage 1 (fingerprint {fingerprint[:12]} vs {prior.dataset_fingerprint[:12]})")
    c = prior.config
    for key, now in (("seed", cfg.seed), ("base_width", cfg.base_width), ("folds", folds), ("roles", str(roles))):
        if c.get(key) != now:
            raise DataError(f"{key} differs from the stage-1 run ({now!r} vs {c.get(key)!r})")


# ---------------------------------------------------------------- config handling

def _read_config_file(path: str) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict) -> None:
    """Install file values as parser defaults so explicit flags still win."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            defaults[key] = value  # argparse converts string defaults with the option's type
    parser.set_defaults(**defaults)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        lr_stage2=args.lr_stage2,
        weight_decay=args.weight_decay,
        epochs_stage1=args.epochs1,
        epochs_stage2=args.epochs2,
        batch_size=args.batch_size,
        dropout=args.dropout,
        seed=args.seed,
        base_width=args.base_width,
        stage2_update=args.stage2_update,
        crop_depth=args.crop_depth,
        norm_recalibration=args.norm_recalibration,
    )


def _config_snapshot(cfg: TrainConfig, folds: int, roles: ModalityRoles, data: Path) -> dict:
    snap = dataclasses.asdict(cfg)
    snap.update(folds=folds, roles=str(roles), data=str(data))
    return json.loads(json.dumps(snap, default=list))


# ---------------------------------------------------------------- small writers


def loss_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss"])
    for i, v in enumerate(history):
        writer.writerow([i, repr(float(v))])
    return buf.getvalue()


def normalize_map(arr: np.ndarray) -> np.ndarray:
    """Min-max to 0..255; a constant map becomes mid-gray."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full(arr.shape, 128, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def feature_image(f: torch.Tensor) -> np.ndarray:
    """(1, C, D, H, W) feature map -> channel-mean of the middle slice, as 8-bit gray."""
    mid = f.shape[2] // 2
    return normalize_map(f[0, :, mid].mean(dim=0).detach().double().numpy())


# ---------------------------------------------------------------- commands


def _parse_shape(text: str) -> tuple:
    try:
        dims = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 32x64x64, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"shape needs three dimensions, got {text!r}")
    return dims


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> int:
    if args.cases < 2:
        raise UsageError("--cases must be at least 2")
    try:
        ds = synth_dataset(args.cases, args.shape, args.noise, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    _prepare_out(out, args.force)
    write_dataset(ds, out)
    neg, pos = ds.class_counts
    print(f"wrote {len(ds)} cases to {out}: {neg} negative, {pos} positive (positive fraction {pos / len(ds):.3f})")
    return EXIT_OK


def _load(args):
    try:
        dataset = read_dataset(args.data)
    except (FileNotFoundError, VolumeFormatError, ValueError) as exc:
        raise DataError(f"cannot load dataset: {exc}") from None
    roles = ModalityRoles.parse(args.roles)
    n_mod = len(dataset.cases[0].volumes)
    if max(roles.order) >= n_mod:
        raise UsageError(f"--roles {roles} refers to modalities the dataset ({n_mod} modalities) lacks")
    if not 2 <= args.folds <= len(dataset):
        raise UsageError(f"--folds must lie in [2, {len(dataset)}]")
    return dataset, roles


def _fold_stage1(dataset, split, fold, cfg, roles, out: Path):
    train_idx, _ = split.indices(dataset, fold)
    res = train_stage1(dataset.subset(train_idx), cfg, roles, derive_seed(cfg.seed, "fold", fold))
    fold_dir = out / f"fold{fold}"
    fold_dir.mkdir(exist_ok=True)
    save_checkpoint(res.model.backbone, fold_dir / "stage1.ckpt")
    atomic_write_text(fold_dir / "stage1_loss.csv", loss_csv(res.loss_log))
    return res.model


def load_stage1(out: Path, fold: int, cfg: TrainConfig, roles: ModalityRoles) -> BackboneClassifier:
    path = out / f"fold{fold}" / "stage1.ckpt"
    if not path.exists():
        raise DataError(f"missing stage-1 checkpoint {path}; run 'train --stage 1' first")
    backbone = build_backbone(cfg.backbone(), 0, attention=True)
    load_checkpoint(backbone, path)
    return BackboneClassifier(backbone, [roles.primary]).eval()


def _fold_job(stage, dataset, split, fold, cfg, roles, out: Path) -> dict:
    """Run the requested stage(s) for one fold; returns per-method metrics."""
    train_idx, test_idx = split.indices(dataset, fold)
    test = dataset.subset(test_idx).cases
    metrics = {}
    if stage in ("1", "all"):
        stage1 = _fold_stage1(dataset, split, fold, cfg, roles, out)
    else:
        stage1 = load_stage1(out, fold, cfg, roles)
    metrics["stage1"] = evaluate(stage1, test, cfg)
    if stage in ("2", "all"):
        res = train_stage2(dataset.subset(train_idx), cfg, roles, stage1, derive_seed(cfg.seed, "fold", fold))
        fold_dir = out / f"fold{fold}"
        save_checkpoint(res.model, fold_dir / "stage2.ckpt")
        atomic_write_text(fold_dir / "stage2_loss.csv", loss_csv(res.loss_log))
        metrics["full"] = evaluate(res.model, test, cfg)
    return metrics


def _map_folds(fn, folds, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, folds))
    return [fn(f) for f in folds]


class _FoldRunner:
    """Picklable per-fold callable for the process pool."""

    def __init__(self, *args):
        self.args = args

    def __call__(self, fold):
        stage, dataset, split, cfg, roles, out = self.args
        try:
            return _fold_job(stage, dataset, split, fold, cfg, roles, out)
        except (DataError, CheckpointError, FoldError):
            raise
        except Exception as exc:
            raise FoldError(fold, exc) from exc


def _metrics_name(kinds) -> str:
    return "metrics-" + "-".join(k.replace(":", "") for k in kinds) + ".csv"


def cmd_train(args) -> int:
    dataset, roles = _load(args)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    folds = args.folds
    fingerprint = dataset.fingerprint()
    seeds = {"base": cfg.seed, "folds": [derive_seed(cfg.seed, "fold", f) for f in range(folds)]}
    snapshot = _config_snapshot(cfg, folds, roles, Path(args.data))

    if args.baseline:
        kinds = [parse_kind(k) for k in args.baseline.split(",")]
        if any(k in ("full", "stage1") for k in kinds):
            raise UsageError("--baseline takes uni:<m>, ensemble, pixel, feature or decision")
        metrics_path = out / _metrics_name(kinds)
        tag = "-".join(k.replace(":", "") for k in kinds)
        RunManifest(sys.argv, snapshot, seeds, fingerprint, _now(), [str(metrics_path)]).write(
            out / f"manifest-baseline-{tag}.json", args.force)
        reports = cross_validate(dataset, cfg, roles, kinds, folds, args.jobs)
        atomic_write_text(metrics_path, reports_to_csv(reports.values()))
        for rep in reports.values():
            print(f"{rep.method}: {rep.format_row()}")
        return EXIT_OK

    stage = args.stage
    if stage != "1":
        _check_drift(out, fingerprint, cfg, folds, roles)
    outputs = []
    for f in range(folds):
        if stage in ("1", "all"):
            outputs += [str(out / f"fold{f}" / "stage1.ckpt"), str(out / f"fold{f}" / "stage1_loss.csv")]
        if stage in ("2", "all"):
            outputs += [str(out / f"fold{f}" / "stage2.ckpt"), str(out / f"fold{f}" / "stage2_loss.csv")]
    metrics_path = out / ("metrics-stage1.csv" if stage == "1" else "metrics.csv")
    outputs.append(str(metrics_path))
    if stage == "2":
        for f in range(folds):
            ckpt = out / f"fold{f}" / "stage1.ckpt"
            if not ckpt.exists():
                raise DataError(f"missing stage-1 checkpoint {ckpt}; run 'train --stage 1' first")
    manifest_name = {"1": "manifest-train-stage1.json", "2": "manifest-train-stage2.json", "all": "manifest-train-all.json"}
    RunManifest(sys.argv, snapshot, seeds, fingerprint, _now(), outputs).write(out / manifest_name[stage], args.force)

    split = split_folds(dataset, folds, cfg.seed)
    results = _map_folds(_FoldRunner(stage, dataset, split, cfg, roles, out), range(folds), args.jobs)
    methods = ["stage1"] if stage == "1" else ["full", "stage1"]
    reports = []
    for m in methods:
        rep = MetricsReport(m)
        for r in results:
            rep.add(r[m])
        reports.append(rep)
        print(f"{m}: {rep.format_row()}")
    atomic_write_text(metrics_path, reports_to_csv(reports))
    return EXIT_OK


def _subset_label(roles: ModalityRoles, subset) -> str:
    return "+".join(str(m) for m in (roles.primary,) + tuple(subset))


def ablation_csv(roles: ModalityRoles, n_mod: int, rows) -> str:
    """One row per modality subset: availability marks then mean±std of each metric."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"mod{m}" for m in range(n_mod)] + list(METRIC_NAMES))
    for subset, rep in rows:
        present = {roles.primary, *subset}
        marks = ["✓" if m in present else "-" for m in range(n_mod)]
        writer.writerow(marks + [f"{rep.mean(k)!r}±{rep.std(k)!r}" for k in METRIC_NAMES])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    dataset, roles = _load(args)
    cfg = _train_config(args)
    out = Path(args.out)
    if not out.is_dir():
        raise DataError(f"no training run at {out}; run 'train --stage 1' first")
    _check_drift(out, dataset.fingerprint(), cfg, args.folds, roles)
    stage1 = [load_stage1(out, f, cfg, roles) for f in range(args.folds)]
    outputs = [str(out / "ablation.csv"), str(out / "ablation-folds.csv")]
    seeds = {"base": cfg.seed, "folds": [derive_seed(cfg.seed, "fold", f) for f in range(args.folds)]}
    RunManifest(sys.argv, _config_snapshot(cfg, args.folds, roles, Path(args.data)), seeds,
                dataset.fingerprint(), _now(), outputs).write(out / "manifest-ablate.json", args.force)
    split = split_folds(dataset, args.folds, cfg.seed)
    subsets = secondary_subsets(roles)
    reports = {s: MetricsReport(_subset_label(roles, s)) for s in subsets}
    for f in range(args.folds):
        for subset, metrics in ablate_fold(dataset, split, f, cfg, roles, stage1[f]).items():
            reports[subset].add(metrics)
    rows = [(s, reports[s]) for s in subsets]
    n_mod = len(dataset.cases[0].volumes)
    atomic_write_text(out / "ablation.csv", ablation_csv(roles, n_mod, rows))
    atomic_write_text(out / "ablation-folds.csv", reports_to_csv([r for _, r in rows]))
    for s, rep in rows:
        print(f"{_subset_label(roles, s):>10}: {rep.format_row()}")
    return EXIT_OK


def load_guidance_model(out: Path, fold: int, cfg: TrainConfig, roles: ModalityRoles) -> GuidanceModel:
    path = out / f"fold{fold}" / "stage2.ckpt"
    if not path.exists():
        raise DataError(f"missing stage-2 checkpoint {path}; run 'train --stage 2' first")
    model = GuidanceModel(build_backbone(cfg.backbone(), 0, attention=True), roles)
    load_checkpoint(model, path)
    return model.eval()


def _run_settings(out: Path, args):
    """Architecture settings of the training run, unless given explicitly."""
    prior = None
    for name in ("manifest-train-all.json", "manifest-train-stage2.json", "manifest-train-stage1.json"):
        if (out / name).exists():
            prior = RunManifest.read(out / name).config
            break
    base_width = args.base_width if args.base_width is not None else (prior or {}).get("base_width", 64)
    roles = args.roles if args.roles is not None else (prior or {}).get("roles", DEFAULT_ROLES)
    return base_width, ModalityRoles.parse(roles)


@torch.no_grad()
def cmd_dump_features(args) -> int:
    out = Path(args.out)
    base_width, roles = _run_settings(out, args)
    cfg = TrainConfig(base_width=base_width, seed=args.seed)
    try:
        dataset = read_dataset(args.data)
    except (FileNotFoundError, VolumeFormatError, ValueError) as exc:
        raise DataError(f"cannot load dataset: {exc}") from None
    matches = [c for c in dataset.cases if c.case_id == args.case]
    if not matches:
        raise DataError(f"unknown case id {args.case!r}")
    model = load_guidance_model(out, args.fold, cfg, roles)
    x = eval_tensor(matches, cfg)
    dest = out / "features" / args.case
    dest.mkdir(parents=True, exist_ok=True)

    images = {}
    xp = x[:, roles.primary:roles.primary + 1]
    low_p = model.primary.lfe(xp)
    f_p = model.primary.features(xp)
    images[roles.primary] = (low_p, f_p)
    f_p_hat = None
    for path, m in zip(model.guidance.values(), roles.secondaries):
        low = path.lfe(x[:, m:m + 1])
        if f_p_hat is None:
            f_p_hat = upsample_to(f_p, low.shape[2:])
        images[m] = (low, path.guided_high(low, f_p_hat))
    written = []
    for m in roles.order:
        low, high = images[m]
        for name, img in (("input", feature_image(x[:, m:m + 1])), ("low", feature_image(low)), ("high", feature_image(high))):
            target = dest / f"mod{m}_{name}.pgm"
            atomic_write_bytes(target, encode_pgm(img))
            written.append(target)
    print(f"wrote {len(written)} images to {dest}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, defaults=True) -> None:
    p.add_argument("--config", help="file of 'key = value' lines; explicit flags take precedence")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--roles", default=DEFAULT_ROLES if defaults else None,
                   help="primary then secondaries in priority order, e.g. 0,3,1,2")
    p.add_argument("--base-width", dest="base_width", type=int, default=64 if defaults else None)


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs1", type=int, default=200)
    p.add_argument("--epochs2", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--lr2", dest="lr_stage2", type=float, default=None, help="stage-2 learning rate (default: --lr)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=1e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=1)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--stage2-update", dest="stage2_update", choices=("accumulate", "per_secondary"), default="accumulate")
    p.add_argument("--crop-depth", dest="crop_depth", type=int, default=None)
    p.add_argument("--norm-recalibration", dest="norm_recalibration", action=argparse.BooleanOptionalAction,
                   default=True, help="recompute normalisation statistics over the training set after each stage")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")
    p.add_argument("--force", action="store_true", help="overwrite an existing run manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmguide", description="Guided multi-modality volume classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic four-modality dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=120)
    p.add_argument("--shape", type=_parse_shape, default=(32, 64, 64))
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training or a baseline, with k-fold evaluation")
    _add_common(p)
    _add_training(p)
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--baseline", help="comma list of uni:<m>, ensemble, pixel, feature, decision")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="stage 2 over every subset of secondary modalities")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="write low- and high-level feature maps of one case as PGM")
    _add_common(p, defaults=False)
    p.add_argument("--case", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_dump_features)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        _apply_config(_subparser(parser, args.command), _read_config_file(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"mmguide: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"mmguide: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, VolumeFormatError, FileNotFoundError) as exc:
        print(f"mmguide: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FoldError as exc:
        code = EXIT_NUMERIC if isinstance(exc.cause, NumericError) else EXIT_DATA
        print(f"mmguide: {'numeric failure' if code == EXIT_NUMERIC else 'data error'}: {exc}", file=sys.stderr)
        return code
    except NumericError as exc:
        print(f"mmguide: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"mmguide: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
