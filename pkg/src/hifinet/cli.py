"""Command-line entry point: ``hifinet {generate,train,eval,infer,gradcheck}``.

Every option can also be set in a flat ``key=value`` config file passed with
``--config``; keys are the long option names (dashes or underscores) and
explicit flags win over file values.  ``HIFI_SEED`` supplies the seed when
``--seed`` is absent.

Exit codes: 0 success, 2 usage, 3 data or digest mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics as M
from . import network as N
from . import synth, verify
from .taxonomy import TaxonomyError, TaxonomyTree, builtin, load_taxonomy_file
from .tensor import NumericError

log = logging.getLogger("hifinet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FINAL_CHECKPOINT = "model.hfck"
STEP_COLUMNS = ("step", "epoch") + N.COMPONENTS + ("total",)
EPOCH_COLUMNS = (("epoch", "split") + N.COMPONENTS + ("total", "lr_base", "lr_loc", "lr_reduced",
                 "det_auc", "loc_auc", "acc1", "acc2", "acc3", "acc4"))


class DataError(Exception):
    """Inputs disagree with each other (missing manifest, digest mismatch...)."""


# --------------------------------------------------------------------------
# config handling


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise ValueError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None or key in ("help", "config"):
            parser.error(f"config file: unknown key {key!r}")
        if act.const is not None and act.nargs == 0:   # store_true / store_false
            truthy = raw.lower() in ("1", "true", "yes", "on")
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                parser.error(f"config file: {key} expects a boolean, got {raw!r}")
            defaults[key] = act.const if truthy else act.default
        else:
            try:
                defaults[key] = act.type(raw) if act.type else raw
            except (TypeError, ValueError):
                parser.error(f"config file: bad value for {key}: {raw!r}")
    parser.set_defaults(**defaults)


def _resolve_seed(args, parser) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("HIFI_SEED")
    if env is None:
        parser.error("--seed is required (or set HIFI_SEED)")
    try:
        return int(env)
    except ValueError:
        parser.error(f"HIFI_SEED must be an integer, got {env!r}")


def _levels(spec: str) -> tuple[bool, bool, bool, bool]:
    try:
        on = {int(x) for x in spec.split(",") if x.strip()}
    except ValueError:
        raise argparse.ArgumentTypeError(f"--levels expects e.g. 1,2,3,4, got {spec!r}") from None
    if not on <= {1, 2, 3, 4}:
        raise argparse.ArgumentTypeError("levels must be within 1..4")
    return tuple(b in on for b in (1, 2, 3, 4))


def _split_fractions(spec: str) -> tuple[float, float, float]:
    parts = [float(x) for x in spec.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--split expects three fractions, e.g. 0.7,0.1,0.2")
    return tuple(parts)


def _taxonomy(spec: str) -> TaxonomyTree:
    return builtin(spec) if spec in ("mini", "full") else load_taxonomy_file(spec)


# --------------------------------------------------------------------------
# data access


def _load_split(data_dir: Path, tree: TaxonomyTree, split: str) -> tuple[list[synth.Record], N.SplitData]:
    manifest = data_dir / synth.MANIFEST
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    records = [r for r in synth.load_manifest(manifest, tree) if r.split == split]
    images, masks = synth.load_arrays(data_dir, records)
    leaves = np.array([tree.leaf_index(r.leaf) for r in records], dtype=np.int64)
    return records, N.SplitData(images, masks, leaves)


def _dataset_taxonomy(data_dir: Path) -> TaxonomyTree:
    path = data_dir / synth.TAXONOMY_FILE
    if not path.exists():
        raise DataError(f"no taxonomy file at {path}")
    return load_taxonomy_file(path)


def _report(model: N.ModelState, data: N.SplitData, pooling: str = "per_image") -> M.EvalReport:
    preds = N.predict_batch(model, data.images)
    return M.build_report(model.tree, data.leaves, [p.leaf for p in preds], [p.detection_score for p in preds],
                          np.stack([p.mask_scores for p in preds]) if preds else np.zeros((0, 1, 0, 0)),
                          data.masks, pooling)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    tree = _taxonomy(args.taxonomy)
    cfg = synth.DatasetConfig(args.seed, args.per_leaf, args.real_count, args.image_size, args.split)
    records = synth.build_dataset(cfg, args.out, tree)
    print(f"wrote {len(records)} records to {Path(args.out) / synth.MANIFEST}")
    return EXIT_OK


def _model_config(args) -> N.ModelConfig:
    return N.preset(
        args.preset, hierarchy_on=args.hierarchy, levels_on=args.levels, pconv_on=args.pconv,
        loc_loss_on=args.loc_loss, teacher_forcing=args.teacher_forcing, loss_preset=args.loss_preset,
        lambda_loc=args.lambda_loc, w4=args.w4, margin_factor=args.margin_factor,
        recompute_calibration=args.recompute_calibration, optimizer=args.optimizer, lr_base=args.lr_base,
        lr_loc=args.lr_loc, momentum=args.momentum, epochs=args.epochs, batch_real=args.batch_real,
        batch_forged=args.batch_forged, patience=args.patience, lr_factor=args.lr_factor)


def cmd_train(args) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    tree = _dataset_taxonomy(data_dir)
    _, train = _load_split(data_dir, tree, "train")
    _, val = _load_split(data_dir, tree, "val")
    if len(train) == 0:
        raise DataError("training split is empty")
    cfg = _model_config(args)
    out.mkdir(parents=True, exist_ok=True)
    model = N.init_model(cfg, tree, args.seed)
    real = train.images[train.leaves == tree.real_index]
    if len(real) == 0:
        raise DataError("training split holds no real images to calibrate the localization center")
    N.calibrate(model, real)

    def on_epoch(epoch, m, row):
        rep = _report(m, val)
        acc = rep.attributes["level_accuracy"]
        return {"det_auc": rep.detection["auc"], "loc_auc": rep.localization["auc"],
                **{f"acc{b + 1}": a for b, a in enumerate(acc)}}

    hist = N.train_loop(model, train, val, cfg.epochs, seed=args.seed, out_dir=out,
                        on_epoch=on_epoch if args.val_metrics else None)
    N.save_checkpoint(model, out / FINAL_CHECKPOINT)
    _write_csv(out / "history.csv", EPOCH_COLUMNS, hist.epochs)
    _write_csv(out / "loss_steps.csv", STEP_COLUMNS, hist.steps)
    print(f"trained {cfg.epochs} epochs ({len(hist.steps)} steps); checkpoint {out / FINAL_CHECKPOINT}")
    return EXIT_OK


def _postprocess(data: N.SplitData, records: list[synth.Record], spec: str) -> N.SplitData:
    name, param = synth.parse_transform(spec)
    images = np.empty_like(data.images)
    for i, rec in enumerate(records):
        s = synth.Sample(data.images[i], data.masks[i], rec.leaf, rec.seed)
        t = synth.apply_postprocess(s, name, param, seed=synth.derive_seed(rec.seed, "postprocess"))
        img = t.image
        if img.shape != data.images[i].shape:
            # back to the network input size; the ground-truth mask is kept
            h, w = data.images[i].shape[1:]
            img = np.stack([np.asarray(Image.fromarray(c.astype(np.float32), mode="F")
                                       .resize((w, h), Image.BILINEAR), dtype=np.float64) for c in img])
            img = np.clip(img, 0.0, 1.0)
        images[i] = img
    return N.SplitData(images, data.masks, data.leaves)


def cmd_eval(args) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    model = N.load_checkpoint(args.checkpoint)
    tree = _dataset_taxonomy(data_dir)
    if tree.digest() != model.tree.digest():
        raise DataError(f"taxonomy digest mismatch: checkpoint {model.tree.digest()} != dataset {tree.digest()}")
    records, data = _load_split(data_dir, tree, args.split)
    if len(data) == 0:
        raise DataError(f"split {args.split!r} is empty")
    if args.postprocess:
        data = _postprocess(data, records, args.postprocess)
    rep = _report(model, data, args.pooling)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(rep.table(), encoding="utf-8")
    (out / "confusion.csv").write_text(rep.confusion_csv(), encoding="utf-8")
    sys.stdout.write(rep.table())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = N.load_checkpoint(args.checkpoint)
    path = Path(args.image)
    try:
        image = synth.read_image(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    size = model.config.branch.image_size
    if image.shape[1:] != (size, size):
        raise DataError(f"{path}: image is {image.shape[2]}x{image.shape[1]}, model expects {size}x{size}")
    pred = N.predict(model, image)
    mask_path = Path(args.mask_out) if args.mask_out else path.with_name(path.stem + "_mask.pgm")
    synth.write_mask(mask_path, pred.binary_mask)
    tree = model.tree
    record = {
        "image": str(path),
        "is_forged": pred.is_forged,
        "detection_score": pred.detection_score,
        "leaf": tree.leaves[pred.leaf],
        "path": tree.path_names(pred.leaf),
        "level_probs": [{n: float(p) for n, p in zip(tree.levels[b], pr)} for b, pr in enumerate(pred.level_probs)],
        "mask": str(mask_path),
    }
    print(json.dumps(record, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_suite(seeds=args.seeds, tol=args.tol, model_tol=args.model_tol,
                               include_model=not args.skip_model)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("gradcheck: " + ("FAILED: " + ", ".join(failed) if failed else "all passed"))
    return EXIT_NUMERIC if failed else EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with option defaults")
    p.add_argument("--seed", type=int, default=None, help="master seed (falls back to $HIFI_SEED)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hifinet", description="Hierarchical forgery detection, "
                                     "localization and attribution on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build the synthetic dataset")
    _add_common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--taxonomy", default="mini", help="builtin name (mini, full) or JSON path")
    g.add_argument("--per-leaf", type=int, default=400)
    g.add_argument("--real-count", type=int, default=2400)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--split", type=_split_fractions, default=(0.7, 0.1, 0.2))
    g.set_defaults(func=cmd_generate, needs_seed=True)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(t)
    t.add_argument("--data", required=True, help="dataset directory holding the manifest")
    t.add_argument("--out", required=True, help="run directory for checkpoints and CSVs")
    t.add_argument("--preset", default="desk", choices=sorted(N.PRESETS))
    d = N.ModelConfig()
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default=d.optimizer)
    t.add_argument("--lr-base", type=float, default=d.lr_base)
    t.add_argument("--lr-loc", type=float, default=d.lr_loc)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--loss-preset", choices=("weighted", "shared"), default=d.loss_preset)
    t.add_argument("--lambda-loc", type=float, default=d.lambda_loc)
    t.add_argument("--w4", type=float, default=d.w4)
    t.add_argument("--margin-factor", type=float, default=d.margin_factor)
    t.add_argument("--batch-real", type=int, default=d.batch_real)
    t.add_argument("--batch-forged", type=int, default=d.batch_forged)
    t.add_argument("--patience", type=int, default=d.patience)
    t.add_argument("--lr-factor", type=float, default=d.lr_factor)
    t.add_argument("--no-hierarchy", dest="hierarchy", action="store_false", help="flat per-level softmax")
    t.add_argument("--levels", type=_levels, default=d.levels_on, help="classification levels trained, e.g. 1,4")
    t.add_argument("--no-pconv", dest="pconv", action="store_false", help="drop the partial-conv pathway")
    t.add_argument("--no-loc-loss", dest="loc_loss", action="store_false", help="drop the localization loss")
    t.add_argument("--teacher-forcing", action="store_true", help="feed ground-truth masks to partial conv")
    t.add_argument("--recompute-calibration", action="store_true", help="refresh center/margin each epoch")
    t.add_argument("--no-val-metrics", dest="val_metrics", action="store_false",
                   help="skip per-epoch validation metrics in history.csv")
    t.set_defaults(func=cmd_train, needs_seed=True)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=synth.SPLITS, default="test")
    e.add_argument("--out", required=True, help="directory for report.json, report.txt, confusion.csv")
    e.add_argument("--postprocess", default=None, help="resize:F, blur:K or noise:S applied before scoring")
    e.add_argument("--pooling", choices=("per_image", "global"), default="per_image",
                   help="pixel-AUC pooling")
    e.set_defaults(func=cmd_eval, needs_seed=False)

    i = sub.add_parser("infer", help="predict one P6 image")
    _add_common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("image")
    i.add_argument("--mask-out", default=None, help="mask path (default: <image>_mask.pgm)")
    i.set_defaults(func=cmd_infer, needs_seed=False)

    c = sub.add_parser("gradcheck", help="finite-difference check of every block")
    _add_common(c)
    c.add_argument("--tol", type=float, default=verify.BLOCK_TOL)
    c.add_argument("--model-tol", type=float, default=verify.MODEL_TOL)
    c.add_argument("--seeds", type=int, default=verify.DEFAULT_SEEDS)
    c.add_argument("--skip-model", action="store_true", help="blocks only")
    c.set_defaults(func=cmd_gradcheck, needs_seed=False)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            values = read_config_file(args.config)
        except (OSError, ValueError) as exc:
            sub.error(str(exc))
        _apply_config(sub, values)
        args = parser.parse_args(argv)
    if args.needs_seed:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args.seed = _resolve_seed(args, sub)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (DataError, TaxonomyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
