"""Command-line entry point: ``phasefuse <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError, PhaseFuseError

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_acc", "val_auc_macro")


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in HISTORY_FIELDS})


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_enhance(args) -> int:
    from .config import load_config
    from .data import list_images, read_image, write_gray8, write_rgb8
    from .enhance import enhance

    cfg = load_config(args.config).enhancement
    images = list_images(args.inp)
    if not images:
        raise DataError(f"no PNG or PGM images in {args.inp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        mf = enhance(read_image(path), cfg)
        write_rgb8(out / f"{path.stem}.png", mf.stack())
        if args.channels:
            for name in ("lwpa", "lpe", "elea"):
                write_gray8(out / f"{path.stem}.{name}.png", getattr(mf, name))
    print(f"enhanced {len(images)} image(s) into {out}")
    return 0


def cmd_synth(args) -> int:
    from .data import synth_dataset

    path = synth_dataset(args.out, args.n, args.size, args.seed)
    print(f"wrote {3 * args.n} images and {path}")
    return 0


def _load_data(manifest_path, cfg, k=None):
    from .data import load_manifest
    from .training import prepare_dataset

    manifest = load_manifest(manifest_path, k)
    return prepare_dataset(manifest, cfg.model.image_size, cfg.enhancement)


def cmd_train(args) -> int:
    from .checkpoint import checkpoint_save
    from .config import load_config
    from .training import train

    cfg = load_config(args.config)
    data = _load_data(args.manifest, cfg, cfg.training.folds)
    fold = None if args.fold is None or args.fold < 0 else args.fold

    def report(row):
        if not args.quiet:
            print(" ".join(f"{k}={row[k]:.6g}" for k in HISTORY_FIELDS), flush=True)
    res = train(cfg.training, data, cfg.model, fold, report)
    _check_finite(res.history)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(out, res.model, dict(res.config, run=cfg.to_dict()))
    hist = Path(args.history) if args.history else out.with_suffix(".history.csv")
    _write_history(hist, res.history)
    print(f"checkpoint {out}, history {hist}")
    return 0


def _check_finite(history) -> None:
    if any(not np.isfinite(r["train_loss"]) for r in history):
        raise NumericError("training loss became non-finite")


def cmd_eval(args) -> int:
    from .metrics import evaluate, paired_t_test, write_report

    if args.ttest:
        if not args.against:
            raise ConfigError("--ttest needs --against")
        t, p = paired_t_test(_floats(args.ttest), _floats(args.against))
        print(f"t={t:.6g} p={p:.6g}")
        if not (args.ckpt or args.manifest):
            return 0
    if not (args.ckpt and args.manifest and args.out):
        raise ConfigError("eval needs --ckpt, --manifest and --out")
    from .checkpoint import checkpoint_load
    from .config import RunConfig
    from .training import predict_scores

    model, meta = checkpoint_load(args.ckpt)
    run = RunConfig.from_dict(meta["run"]) if "run" in meta else RunConfig()
    run.model = model.arch
    data = _load_data(args.manifest, run)
    idx = np.arange(len(data))
    if args.fold is not None:
        if data.folds is None:
            raise DataError("--fold needs a manifest with a fold column")
        idx = np.flatnonzero(data.folds == args.fold)
        if idx.size == 0:
            raise DataError(f"no rows in fold {args.fold}")
    scores = predict_scores(model, data, idx)
    rep = evaluate(scores, data.labels[idx], model.arch.num_classes)
    write_report(args.out, rep)
    print(f"accuracy {rep.overall_accuracy:.4f} on {idx.size} images, report {args.out}")
    return 0


def cmd_gradcam(args) -> int:
    from .checkpoint import checkpoint_load
    from .config import RunConfig
    from .data import read_image
    from .enhance import enhance
    from .gradcam import grad_cam, save_overlay
    from .training import eval_pair, resize

    model, meta = checkpoint_load(args.ckpt)
    run = RunConfig.from_dict(meta["run"]) if "run" in meta else RunConfig()
    size = model.arch.image_size
    img = resize(read_image(args.inp), size)
    cxr, mf = eval_pair(img, enhance(img, run.enhancement).stack(), size)
    heat = grad_cam(model, cxr, mf, args.target, args.layer)
    save_overlay(args.out, img, heat)
    peak = np.unravel_index(np.argmax(heat), heat.shape)
    print(f"heatmap peak at row {peak[0]}, col {peak[1]}; overlay {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, model_check, op_checks

    results = op_checks(args.seed)
    if not args.ops_only:
        channels = tuple(int(c) for c in args.channels.split(","))
        results["model"] = model_check(args.seed, args.size, channels, args.head,
                                       max_coords=None if args.max_coords <= 0 else args.max_coords)
    worst = 0.0
    for name, err in results.items():
        ok = err < TOLERANCE
        worst = max(worst, err)
        print(f"{name:24s} {err:.3e} {'ok' if ok else 'FAIL'}")
    if worst >= TOLERANCE:
        raise NumericError(f"max relative gradient error {worst:.3e} >= {TOLERANCE:g}")
    return 0


def cmd_kfold(args) -> int:
    from .checkpoint import checkpoint_save
    from .config import load_config
    from .data import load_manifest, write_manifest
    from .training import prepare_dataset, stratified_kfold, train

    cfg = load_config(args.config)
    k = args.k or cfg.training.folds
    cfg.training.folds = k
    manifest = load_manifest(args.manifest, k)
    folds = manifest.folds
    if folds is None:
        folds = stratified_kfold(manifest.labels, k, cfg.training.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "folds.csv", manifest, folds)
    if args.assign_only:
        print(f"fold sizes {np.bincount(folds, minlength=k).tolist()}, manifest {out / 'folds.csv'}")
        return 0
    data = prepare_dataset(manifest, cfg.model.image_size, cfg.enhancement)
    data.folds = folds
    rows = []
    for f in range(k):
        res = train(cfg.training, data, cfg.model, f)
        _check_finite(res.history)
        checkpoint_save(out / f"fold{f}.pfus", res.model, dict(res.config, run=cfg.to_dict()))
        _write_history(out / f"fold{f}.history.csv", res.history)
        last = res.history[-1]
        rows.append((f, last["val_acc"], last["val_auc_macro"]))
        print(f"fold {f}: val_acc={last['val_acc']:.4f} val_auc_macro={last['val_auc_macro']:.4f}", flush=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "val_acc", "val_auc_macro"])
        w.writerows(rows)
    acc = np.array([r[1] for r in rows])
    print(f"mean val_acc {acc.mean():.4f} (+/- {acc.std(ddof=1):.4f}) over {k} folds")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phasefuse", description="Phase-enhanced dual-branch attention fusion.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="write LwPA/LPE/ELEA multi-feature images")
    p.add_argument("--in", dest="inp", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--channels", action="store_true", help="also write .lwpa/.lpe/.elea grayscale PNGs")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("synth", help="generate the synthetic three-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="images per class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model, holding out one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--fold", type=int, help="held-out fold (omit or -1 to train on everything)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a checkpoint; paired t-test utility")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--fold", type=int, help="evaluate only this fold's rows")
    p.add_argument("--ttest", help="comma-separated per-fold scores of model A")
    p.add_argument("--against", help="comma-separated per-fold scores of model B")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="Grad-CAM overlay PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--class", dest="target", type=int, required=True, choices=(0, 1, 2))
    p.add_argument("--layer", help="'branch:stage', e.g. cxr:3 (default: last CXR stage)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", default="4,8,16,32")
    p.add_argument("--head", default="cross_vit")
    p.add_argument("--max-coords", type=int, default=3, help="coordinates probed per parameter (0: all)")
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("kfold", help="stratified k-fold assignment and cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--k", type=int, help="number of folds (default: training.folds)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--assign-only", action="store_true", help="only write folds.csv")
    p.set_defaults(func=cmd_kfold)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PhaseFuseError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return e.exit_code
    except (json.JSONDecodeError, ValueError) as e:
        print(f"E_CONFIG: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"E_DATA: {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"E_NUMERIC: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
