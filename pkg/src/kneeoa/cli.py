"""Command line interface.

Subcommands cover the whole pipeline: synthetic data generation,
localizer training and evaluation, crop extraction, grading network
training, evaluation, prediction, and the gradient self-check.

Options may come from a ``key=value`` config file via --config; explicit
flags always win, unknown config keys are rejected. Exit codes: 0 on
success, 1 on a runtime failure, 2 on usage errors.

This module imports numpy-backed code lazily inside the handlers, so
--deterministic can pin the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import KneeOAError, ParseError

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class Opt:
    def __init__(self, typ, default=None, required=False, help=""):
        self.typ = typ
        self.default = default
        self.required = required
        self.help = help


class _UsageError(Exception):
    pass


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


COMMANDS: dict[str, dict[str, Opt]] = {
    "synth-gen": {
        "n": Opt(int, 200, help="number of radiographs"),
        "size": Opt(int, 256, help="image size in pixels (multiple of 16)"),
        "seed": Opt(int, 0),
        "train_frac": Opt(float, 0.7, help="fraction tagged train vs test"),
        "out": Opt(str, required=True, help="output directory"),
    },
    "train-fcn": {
        "manifest": Opt(str, required=True),
        "out": Opt(str, required=True),
        "size": Opt(int, 256, help="localizer working resolution"),
        "epochs": Opt(int, 10),
        "batch_size": Opt(int, 8),
        "lr": Opt(float, 0.001),
        "val_frac": Opt(float, 0.15),
        "seed": Opt(int, 0),
    },
    "eval-fcn": {
        "manifest": Opt(str, required=True),
        "weights": Opt(str, required=True),
        "out": Opt(str, required=True),
        "size": Opt(int, 256),
        "threshold": Opt(float, 0.5),
    },
    "extract": {
        "manifest": Opt(str, required=True),
        "weights": Opt(str, required=True),
        "out": Opt(str, required=True),
        "size": Opt(int, 256),
        "threshold": Opt(float, 0.5),
        "crop_h": Opt(int, 200),
        "crop_w": Opt(int, 300),
    },
    "train-clf": {
        "manifest": Opt(str, required=True),
        "out": Opt(str, required=True),
        "epochs": Opt(int, 20),
        "batch_size": Opt(int, 32),
        "lr": Opt(float, 0.001),
        "val_frac": Opt(float, 0.15),
        "seed": Opt(int, 0),
        "stop_acc": Opt(float, None, help="stop once validation accuracy reaches this"),
    },
    "train-joint": {
        "manifest": Opt(str, required=True),
        "out": Opt(str, required=True),
        "epochs": Opt(int, 20),
        "batch_size": Opt(int, 32),
        "lr": Opt(float, 0.001),
        "loss_weight": Opt(float, 0.5, help="regression weight in the combined loss"),
        "val_frac": Opt(float, 0.15),
        "seed": Opt(int, 0),
    },
    "evaluate": {
        "manifest": Opt(str, required=True),
        "weights": Opt(str, required=True),
        "out": Opt(str, required=True),
        "batch_size": Opt(int, 32),
    },
    "predict": {
        "manifest": Opt(str, required=True),
        "weights": Opt(str, required=True),
        "out": Opt(str, required=True, help="output CSV path"),
        "batch_size": Opt(int, 32),
    },
    "gradcheck": {
        "seed": Opt(int, 0),
        "shapes": Opt(int, 20, help="random instances per operator"),
        "tol": Opt(float, 1e-4),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kneeoa",
        description="Knee joint localization and severity grading pipeline.",
    )
    parser.add_argument("--deterministic", action="store_true",
                        help="pin BLAS to one thread for reproducible numerics")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} stage")
        p.add_argument("--config", default=None, help="key=value option file")
        for key, opt in opts.items():
            flag = "--" + key.replace("_", "-")
            if opt.typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True,
                               default=None, help=opt.help)
            else:
                p.add_argument(flag, dest=key, type=opt.typ, default=None,
                               help=opt.help)
    return parser


def parse_config(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def merge_options(command: str, args: argparse.Namespace) -> dict:
    """Flags first, then config values, then hard defaults."""
    table = COMMANDS[command]
    config: dict[str, str] = {}
    if args.config is not None:
        config = parse_config(args.config)
        unknown = set(config) - set(table) - {"deterministic"}
        if unknown:
            raise ParseError(
                f"{args.config}: unknown option keys: {', '.join(sorted(unknown))}"
            )
    opts: dict = {}
    for key, opt in table.items():
        flag_value = getattr(args, key)
        if flag_value is not None:
            opts[key] = flag_value
        elif key in config:
            try:
                opts[key] = _bool(config[key]) if opt.typ is bool else opt.typ(config[key])
            except ValueError as e:
                raise ParseError(f"{args.config}: bad value for {key}: {e}") from None
        else:
            opts[key] = opt.default
    if "deterministic" in config:
        try:
            opts["deterministic"] = _bool(config["deterministic"])
        except ValueError as e:
            raise ParseError(f"{args.config}: bad value for deterministic: {e}") from None
    missing = [k for k, o in table.items() if o.required and opts[k] is None]
    if missing:
        raise _UsageError(f"{command}: missing required options: "
                          + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


def _pin_threads() -> None:
    for var in _THREAD_VARS:
        os.environ.setdefault(var, "1")


# --- shared data loading -------------------------------------------------------


def _load_radiographs(manifest_path, splits=None):
    """Radiograph records with pixel data, grades and annotations.

    Returns (records, record_splits). With ``splits`` given, untagged
    rows count as train; radiographs whose tag is not wanted are skipped.
    """
    from .datasets import AnnotatedRadiograph, load_annotation, load_manifest
    from .pgm import read_pgm

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    rows = load_manifest(manifest_path)
    by_image: dict[str, list] = {}
    for row in rows:
        by_image.setdefault(row.image_path, []).append(row)
    records = []
    record_splits = []
    for image_path, group in by_image.items():
        tag = group[0].split or "train"
        if splits is not None and tag not in splits:
            continue
        sides = {r.side: r for r in group}
        if set(sides) != {"L", "R"}:
            raise ParseError(
                f"{manifest_path}: {image_path} needs one L and one R row, "
                f"got sides {sorted(sides)}"
            )
        img = read_pgm(base / image_path)
        rects = load_annotation((base / image_path).with_suffix(".txt"))
        records.append(AnnotatedRadiograph(
            rects=rects, image=img, image_path=image_path,
            grades=[sides["L"].kl_grade, sides["R"].kl_grade], sides=["L", "R"],
        ))
        record_splits.append(tag)
    if not records:
        raise ParseError(f"{manifest_path}: no radiographs matched splits {splits}")
    return records, record_splits


def _load_crop_samples(manifest_path, splits=None):
    """Knee crops as (samples, manifest paths), filtered by split tag."""
    from .datasets import KneeSample, load_manifest
    from .pgm import read_pgm

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    paths = []
    for row in load_manifest(manifest_path):
        tag = row.split or "train"
        if splits is not None and tag not in splits:
            continue
        stem = Path(row.image_path).stem
        group = stem[:-2] if stem.endswith(("_L", "_R")) else stem
        samples.append(KneeSample(
            image=read_pgm(base / row.image_path), side=row.side,
            kl_grade=row.kl_grade, split=None, group=group,
        ))
        paths.append(row.image_path)
    if not samples:
        raise ParseError(f"{manifest_path}: no knees matched splits {splits}")
    return samples, paths


def _build_grading_model(weights_path, sample_shape):
    """Reconstruct the right grading architecture for a weight file."""
    from . import models
    from .weights_io import read_entries

    entries = read_entries(weights_path)
    h, w = sample_shape
    if "out_reg.weight" in entries:
        return models.build_joint_net(h, w)
    return models.build_classifier(h, w)


# --- handlers --------------------------------------------------------------------


def cmd_synth_gen(opts) -> int:
    from .datasets import ManifestRow, grade_histogram, save_annotation, \
        save_manifest, split_dataset
    from .pgm import write_pgm
    from .synthetic import synth_generate

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = synth_generate(opts["n"], opts["size"], opts["seed"])
    train_recs, _ = split_dataset(records, opts["train_frac"], opts["seed"], key=id)
    train_ids = {id(r) for r in train_recs}
    rows = []
    for i, rec in enumerate(records):
        name = f"img_{i:05d}.pgm"
        write_pgm(out / name, rec.image)
        save_annotation(out / f"img_{i:05d}.txt", rec.rects)
        tag = "train" if id(rec) in train_ids else "test"
        for side, grade in zip(rec.sides, rec.grades):
            rows.append(ManifestRow(name, side, grade, tag))
    save_manifest(out / "manifest.csv", rows)
    hist = grade_histogram(rows)
    print(f"wrote {len(records)} radiographs ({len(rows)} knees) to {out}")
    print("grade histogram:", " ".join(f"{g}:{c}" for g, c in enumerate(hist)))
    return 0


def cmd_train_fcn(opts) -> int:
    import numpy as np

    from . import models
    from .figures import save_fcn_curves
    from .localization import train_fcn, training_pairs
    from .weights_io import save_weights

    records, _ = _load_radiographs(opts["manifest"], splits={"train", "val"})
    pairs = training_pairs(records, opts["size"])
    model = models.build_fcn_localizer(opts["size"])
    models.init_weights(model, np.random.default_rng(opts["seed"]))
    history = train_fcn(model, pairs, epochs=opts["epochs"],
                        batch_size=opts["batch_size"], seed=opts["seed"],
                        val_frac=opts["val_frac"], lr=opts["lr"], log=print)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / "fcn.koaw")
    with open(out / "fcn_history.csv", "w") as f:
        f.write("epoch,lr,train_bce,val_bce\n")
        for r in history:
            f.write(f"{r.epoch},{r.lr:.8g},{r.train_loss:.6f},{r.val_loss:.6f}\n")
    save_fcn_curves(history, out / "fcn_curves.png")
    print(f"saved localizer to {out / 'fcn.koaw'}")
    return 0


def cmd_eval_fcn(opts) -> int:
    import numpy as np

    from . import models
    from .errors import DetectionFailureError
    from .figures import save_jaccard_histogram
    from .localization import detection_report, extract_bboxes, predict_mask, \
        rect_to_bbox
    from .weights_io import load_weights

    records, _ = _load_radiographs(opts["manifest"], splits={"test"})
    model = models.build_fcn_localizer(opts["size"])
    load_weights(opts["weights"], model)
    size = opts["size"]
    pairs = []
    per_knee = []
    failures = []
    for rec in records:
        prob = predict_mask(model, rec.image)
        try:
            boxes = extract_bboxes(prob, opts["threshold"])
        except DetectionFailureError as e:
            failures.append({"image": rec.image_path, "found": e.found})
            continue
        for box, rect, side in zip(boxes, rec.rects, rec.sides):
            truth = rect_to_bbox(rect, size)
            pairs.append((box, truth))
            per_knee.append((rec.image_path, side))
    if not pairs:
        raise DetectionFailureError(0, "no knee was detected in any test image")
    report = detection_report(pairs)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_knees": report.n,
        "n_failed_images": len(failures),
        "failures": failures,
        "mean_jaccard": report.mean_jaccard,
        "std_jaccard": report.std_jaccard,
        "rate_25": report.rate_25,
        "rate_50": report.rate_50,
        "rate_75": report.rate_75,
    }
    with open(out / "detection.json", "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    with open(out / "detection.csv", "w") as f:
        f.write("image_path,side,jaccard\n")
        for (path, side), j in zip(per_knee, report.jaccards):
            f.write(f"{path},{side},{j:.6f}\n")
    save_jaccard_histogram(report.jaccards, out / "jaccard_hist.png")
    print(f"knees: {report.n}  failed images: {len(failures)}")
    print(f"mean overlap {report.mean_jaccard:.4f} (std {report.std_jaccard:.4f})  "
          f">=0.25: {report.rate_25:.1f}%  >=0.5: {report.rate_50:.1f}%  "
          f">=0.75: {report.rate_75:.1f}%")
    return 0


def cmd_extract(opts) -> int:
    from . import models
    from .datasets import ManifestRow, save_manifest
    from .errors import DetectionFailureError
    from .localization import crop_and_resize, extract_bboxes, predict_mask, \
        upscale_bbox
    from .pgm import write_pgm
    from .weights_io import load_weights

    records, tags = _load_radiographs(opts["manifest"])
    model = models.build_fcn_localizer(opts["size"])
    load_weights(opts["weights"], model)
    out = Path(opts["out"])
    crops_dir = out / "crops"
    crops_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec, tag in zip(records, tags):
        prob = predict_mask(model, rec.image)
        try:
            boxes = extract_bboxes(prob, opts["threshold"])
        except DetectionFailureError as e:
            raise DetectionFailureError(
                e.found, f"{rec.image_path}: expected 2 joint regions, found {e.found}"
            ) from None
        ih, iw = rec.image.shape
        stem = Path(rec.image_path).stem
        for box, side, grade in zip(boxes, rec.sides, rec.grades):
            full = upscale_bbox(box, iw, ih)
            crop = crop_and_resize(rec.image, full, opts["crop_h"], opts["crop_w"])
            name = f"{stem}_{side}.pgm"
            write_pgm(crops_dir / name, crop)
            rows.append(ManifestRow(f"crops/{name}", side, grade, tag))
    save_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} crops under {out}")
    return 0


def _run_grading_training(opts, joint: bool) -> int:
    import numpy as np

    from . import models
    from .figures import save_training_curves
    from .quantification import augment_flip, history_to_csv, train_classifier, \
        train_joint, train_val_split
    from .weights_io import save_weights

    samples, _ = _load_crop_samples(opts["manifest"], splits={"train", "val"})
    train_set, val_set = train_val_split(samples, opts["val_frac"], opts["seed"])
    train_set = augment_flip(train_set)
    h, w = train_set[0].image.shape
    rng = np.random.default_rng(opts["seed"])
    if joint:
        model = models.build_joint_net(h, w)
        models.init_weights(model, rng)
        history = train_joint(model, train_set, val_set, epochs=opts["epochs"],
                              batch_size=opts["batch_size"],
                              loss_weight=opts["loss_weight"], seed=opts["seed"],
                              lr=opts["lr"], log=print)
        stem = "joint"
    else:
        model = models.build_classifier(h, w)
        models.init_weights(model, rng)
        history = train_classifier(model, train_set, val_set, epochs=opts["epochs"],
                                   batch_size=opts["batch_size"], seed=opts["seed"],
                                   lr=opts["lr"], stop_at_val_acc=opts["stop_acc"],
                                   log=print)
        stem = "classifier"
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / f"{stem}.koaw")
    history_to_csv(history, out / f"{stem}_history.csv")
    save_training_curves(history, out / f"{stem}_curves.png")
    best = max(r.val_acc for r in history)
    print(f"saved {stem} to {out / (stem + '.koaw')}  best val accuracy {best:.3f}")
    return 0


def cmd_train_clf(opts) -> int:
    return _run_grading_training(opts, joint=False)


def cmd_train_joint(opts) -> int:
    return _run_grading_training(opts, joint=True)


def cmd_evaluate(opts) -> int:
    from .figures import save_confusion_heatmap, save_roc_curves
    from .metrics import render_report, report_to_json
    from .quantification import evaluate_samples
    from .weights_io import load_weights

    import numpy as np

    samples, _ = _load_crop_samples(opts["manifest"], splits={"test"})
    model = _build_grading_model(opts["weights"], samples[0].image.shape)
    load_weights(opts["weights"], model)
    report, preds = evaluate_samples(model, samples, opts["batch_size"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as f:
        f.write(report_to_json(report))
    with open(out / "metrics.txt", "w") as f:
        f.write(render_report(report))
    save_confusion_heatmap(report.confusion, out / "confusion.png")
    y = np.array([s.kl_grade for s in samples])
    probs = np.stack([p.class_probs for p in preds])
    save_roc_curves(y, probs, out / "roc.png")
    print(render_report(report))
    return 0


def cmd_predict(opts) -> int:
    from .quantification import predict_grades
    from .weights_io import load_weights

    samples, paths = _load_crop_samples(opts["manifest"])
    model = _build_grading_model(opts["weights"], samples[0].image.shape)
    load_weights(opts["weights"], model)
    preds = predict_grades(model, [s.image for s in samples], opts["batch_size"])
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("image_path,side,p0,p1,p2,p3,p4,predicted_class,continuous_grade\n")
        for path, s, p in zip(paths, samples, preds):
            probs = ",".join(f"{v:.6f}" for v in p.class_probs)
            f.write(f"{path},{s.side},{probs},{p.predicted_class},"
                    f"{p.continuous_grade:.6f}\n")
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def cmd_gradcheck(opts) -> int:
    from .gradcheck import run_all

    results = run_all(n_shapes=opts["shapes"], seed=opts["seed"])
    worst = 0.0
    for name, (err, sec) in results.items():
        status = "ok" if err < opts["tol"] else "FAIL"
        print(f"{status:4s} {name:18s} max_rel_err {err:.3e}  ({sec:.2f}s)")
        worst = max(worst, err)
    print(f"worst {worst:.3e}  tolerance {opts['tol']:.1e}")
    return 0 if worst < opts["tol"] else 1


HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "train-fcn": cmd_train_fcn,
    "eval-fcn": cmd_eval_fcn,
    "extract": cmd_extract,
    "train-clf": cmd_train_clf,
    "train-joint": cmd_train_joint,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        opts = merge_options(args.command, args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except KneeOAError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.deterministic or opts.get("deterministic"):
        _pin_threads()
    try:
        return HANDLERS[args.command](opts)
    except KneeOAError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
