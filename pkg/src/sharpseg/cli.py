"""Command-line surface: dataset generation, training, cross-validation,
evaluation, prediction, kernel demos, parameter counting, and Grad-CAM.

Exit codes: 0 success, 1 runtime failure, 2 usage or contract error.
Every subcommand is deterministic under fixed seeds: identical flags produce
byte-identical output files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as D
from . import metrics as MT
from . import model as M
from . import ops
from . import train as T


class UsageError(ValueError):
    """Bad flag combination or config/data contract violation."""


def _widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(tok) for tok in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad widths {text!r}: {e}") from e
    if len(widths) != 5 or any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError(
            f"widths must be 5 positive comma-separated ints, got {text!r}")
    return widths


def _head_classes(manifest: D.DatasetManifest, override) -> int:
    """Model head size for a dataset: binary datasets get a sigmoid head."""
    if override is not None:
        classes = override
    else:
        classes = 1 if manifest.num_classes == 2 else manifest.num_classes
    _check_head(classes, manifest)
    return classes


def _check_head(classes: int, manifest: D.DatasetManifest) -> None:
    if classes == 1:
        if manifest.num_classes != 2:
            raise UsageError(f"binary head needs a 2-class dataset, manifest "
                             f"has {manifest.num_classes} classes")
    elif classes != manifest.num_classes:
        raise UsageError(f"model head has {classes} classes but dataset has "
                         f"{manifest.num_classes}")


def _train_config(args) -> T.TrainConfig:
    try:
        return T.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                             max_epochs=args.epochs,
                             patience=min(args.patience, args.epochs),
                             seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e


# ------------------------------------------------------------ subcommands

def cmd_gen_data(args) -> int:
    try:
        cfg = D.SyntheticConfig(
            n_samples=args.n, h=args.size, w=args.size, num_classes=args.classes,
            in_channels=args.in_ch, boundary_blur_sigma=args.blur_sigma,
            hair=args.hair, noise_std=args.noise_std,
            roi_area_range=(args.roi_min, args.roi_max),
            contrast=args.contrast, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    samples, manifest = D.generate_synthetic(cfg)
    path = D.write_dataset(samples, manifest, args.out)
    print(f"wrote {len(samples)} samples to {path}")
    masks = np.concatenate([s.mask for s in samples])
    for c in range(cfg.num_classes):
        print(f"class {c}: {int(np.count_nonzero(masks == c))} px")
    return 0


def cmd_cv(args) -> int:
    if args.folds < 2:
        raise UsageError(f"need at least 2 folds, got {args.folds}")
    manifest = D.load_manifest(args.data)
    classes = _head_classes(manifest, args.classes)
    samples = D.load_samples(manifest)
    folds = T.kfold_split(len(samples), args.folds, args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "folds.json"), "w", encoding="utf-8") as f:
        json.dump({str(i): {"train": tr.tolist(), "val": va.tolist()}
                   for i, (tr, va) in enumerate(folds)}, f, indent=2,
                  sort_keys=True)
        f.write("\n")

    def run_fold(i):
        tr_idx, va_idx = folds[i]
        mdl = M.build_model(M.ModelConfig(
            in_channels=manifest.in_channels, num_classes=classes,
            widths=args.widths, connection=args.connection,
            seed=args.seed + i))
        cfg = _train_config(args)
        result = T.train(mdl, [samples[j] for j in tr_idx],
                         [samples[j] for j in va_idx], cfg, fold=i)
        T.write_history_csv(result.history,
                            os.path.join(args.out, f"history_fold{i}.csv"))
        return result

    results = [None] * len(folds)
    if args.parallel:
        with ThreadPoolExecutor(max_workers=len(folds)) as pool:
            futures = {pool.submit(run_fold, i): i for i in range(len(folds))}
            for fut, i in futures.items():
                try:
                    results[i] = fut.result()
                except T.TrainingError as e:
                    print(f"error: fold {i}: {e}", file=sys.stderr)
                    return 1
    else:
        for i in range(len(folds)):
            try:
                results[i] = run_fold(i)
            except T.TrainingError as e:
                print(f"error: fold {i}: {e}", file=sys.stderr)
                return 1

    jaccs = np.array([r.best_val_jaccard for r in results])
    dices = np.array([r.best_val_dice for r in results])
    with open(os.path.join(args.out, "summary.csv"), "w", newline="",
              encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "mean", "std"])
        writer.writerow(["jaccard", f"{jaccs.mean():.6g}", f"{jaccs.std():.6g}"])
        writer.writerow(["dice", f"{dices.mean():.6g}", f"{dices.std():.6g}"])
    for i, r in enumerate(results):
        print(f"fold {i}: best epoch {r.best_epoch}, "
              f"val jaccard {r.best_val_jaccard:.4f}, "
              f"val dice {r.best_val_dice:.4f}")
    print(f"jaccard {jaccs.mean():.4f} +/- {jaccs.std():.4f}, "
          f"dice {dices.mean():.4f} +/- {dices.std():.4f}")
    return 0


def cmd_train(args) -> int:
    manifest = D.load_manifest(args.data)
    classes = _head_classes(manifest, args.classes)
    samples = D.load_samples(manifest)
    if args.val_frac < 0 or args.val_frac >= 1:
        raise UsageError("--val-frac must be in [0, 1)")
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(samples))
    n_val = int(round(args.val_frac * len(samples)))
    if args.val_frac > 0 and n_val == 0:
        n_val = 1
    if n_val:
        val = [samples[i] for i in perm[:n_val]]
        tr = [samples[i] for i in perm[n_val:]]
    else:
        tr = val = [samples[i] for i in perm]  # overfit mode
    mdl = M.build_model(M.ModelConfig(
        in_channels=manifest.in_channels, num_classes=classes,
        widths=args.widths, connection=args.connection, seed=args.seed))
    result = T.train(mdl, tr, val, _train_config(args))
    os.makedirs(args.out, exist_ok=True)
    T.write_history_csv(result.history, os.path.join(args.out, "history.csv"))
    M.save_checkpoint(mdl, os.path.join(args.out, "checkpoint"),
                      epoch=result.best_epoch,
                      best_val_loss=result.best_val_loss)
    print(f"best epoch {result.best_epoch}: val loss "
          f"{result.best_val_loss:.6g}, val jaccard "
          f"{result.best_val_jaccard:.4f}, val dice {result.best_val_dice:.4f}")
    return 0


def _load_model_for_data(args, manifest: D.DatasetManifest) -> M.Model:
    if not os.path.exists(os.path.join(args.checkpoint, "model.json")):
        raise FileNotFoundError(f"missing checkpoint: {args.checkpoint}")
    mdl = M.load_checkpoint(args.checkpoint)
    if mdl.config.in_channels != manifest.in_channels:
        raise UsageError(f"checkpoint expects {mdl.config.in_channels} input "
                         f"channels, dataset has {manifest.in_channels}")
    _check_head(mdl.config.num_classes, manifest)
    return mdl


def cmd_eval(args) -> int:
    manifest = D.load_manifest(args.data)
    mdl = _load_model_for_data(args, manifest)
    samples = D.load_samples(manifest)
    loss, jacc, dice = T.evaluate_model(mdl, samples, args.batch_size)
    print(f"samples {len(samples)}  loss {loss:.6g}  jaccard {jacc:.4f}  "
          f"dice {dice:.4f}")
    classes = (2 if mdl.config.num_classes == 1 else mdl.config.num_classes)
    g = np.concatenate([s.mask for s in samples]).astype(np.int64)
    preds = []
    for s in samples:
        logits = M.forward(mdl, s.image)
        if mdl.config.num_classes == 1:
            preds.append(MT.binarize(ops.sigmoid(logits)))
        else:
            preds.append(MT.argmax_channels(ops.softmax_channels(logits)))
    rec = MT.compute_metrics(g, np.concatenate(preds).astype(np.int64), classes)
    for c in range(classes):
        print(f"class {c}: jaccard {rec.per_class_jaccard[c]:.4f}  "
              f"dice {rec.per_class_dice[c]:.4f}  counts {rec.counts[c]}")
    return 0


def cmd_predict(args) -> int:
    manifest = D.load_manifest(args.data)
    mdl = _load_model_for_data(args, manifest)
    samples = D.load_samples(manifest)
    os.makedirs(args.out, exist_ok=True)
    denom = max(manifest.num_classes - 1, 1)
    for i, s in enumerate(samples):
        logits = M.forward(mdl, s.image)
        if mdl.config.num_classes == 1:
            probs = ops.sigmoid(logits)
            mask = MT.binarize(probs, args.threshold)
            prob_map = probs
        else:
            probs = ops.softmax_channels(logits)
            mask = MT.argmax_channels(probs)
            prob_map = probs.max(axis=1, keepdims=True)
        D.write_pgm(os.path.join(args.out, f"mask_{i:04d}.pgm"), mask / denom)
        if args.probs:
            D.write_pgm(os.path.join(args.out, f"prob_{i:04d}.pgm"), prob_map)
    print(f"wrote {len(samples)} masks to {args.out}")
    return 0


def cmd_sharpen(args) -> int:
    image = D.read_pgm(args.inp)
    response = ops.depthwise_sharp(image, M.SHARP_KERNEL)
    if args.mode == "additive":
        response = image + response  # S = I + K*I
    D.write_pgm(args.out, np.clip(response, 0.0, 1.0))
    print(f"wrote {args.out}")
    return 0


def cmd_param_count(args) -> int:
    try:
        cfg = M.ModelConfig(in_channels=args.in_ch, num_classes=args.classes,
                            widths=args.widths, connection=args.connection)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(M.count_params(M.build_model(cfg)))
    return 0


def cmd_gradcam(args) -> int:
    if args.layer not in (1, 2, 3, 4):
        raise UsageError(f"--layer must be 1..4, got {args.layer}")
    if not os.path.exists(os.path.join(args.checkpoint, "model.json")):
        raise FileNotFoundError(f"missing checkpoint: {args.checkpoint}")
    mdl = M.load_checkpoint(args.checkpoint)
    image = D.load_tensor(args.image)
    if args.cls < 0 or args.cls >= mdl.config.num_classes:
        raise UsageError(f"--class must be in 0..{mdl.config.num_classes - 1}")
    cam = MT.grad_cam(mdl, image, args.layer, args.cls)
    D.write_pgm(args.out, cam)
    print(f"wrote {args.out}")
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sharpseg",
        description="Sharpening-skip-connection segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p, widths_default="32,64,128,256,512"):
        p.add_argument("--connection", choices=("plain", "sharp"),
                       default="plain")
        p.add_argument("--widths", type=_widths, default=_widths(widths_default))
        p.add_argument("--classes", type=int, default=None,
                       help="model head size (default: from dataset)")

    def add_train_flags(p):
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--lr", type=float, default=0.001)
        p.add_argument("--batch-size", type=int, default=4)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in-ch", type=int, default=1)
    p.add_argument("--blur-sigma", type=float, default=1.0)
    p.add_argument("--noise-std", type=float, default=0.02)
    p.add_argument("--hair", action="store_true")
    p.add_argument("--roi-min", type=float, default=0.05)
    p.add_argument("--roi-max", type=float, default=0.35)
    p.add_argument("--contrast", type=float, default=0.7)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--parallel", action="store_true",
                   help="train folds concurrently")
    add_model_flags(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-frac", type=float, default=0.2,
                   help="0 trains and validates on the full set")
    add_model_flags(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted masks as PGM")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--probs", action="store_true",
                   help="also write probability maps")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sharpen", help="apply the 3x3 kernel to a PGM image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("laplacian", "additive"),
                   default="laplacian")
    p.set_defaults(func=cmd_sharpen)

    p = sub.add_parser("param-count", help="print the learnable scalar count")
    p.add_argument("--in-ch", type=int, default=3)
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--widths", type=_widths, default=_widths("32,64,128,256,512"))
    p.add_argument("--connection", choices=("plain", "sharp"), default="plain")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input tensor file (1,c,h,w)")
    p.add_argument("--layer", type=int, required=True,
                   help="skip-fusion index 1 (full resolution) .. 4 (deepest)")
    p.add_argument("--class", dest="cls", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ops.ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (D.FormatError, D.GenerationError, M.CheckpointError,
            T.TrainingError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
