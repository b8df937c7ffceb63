"""``gliograde`` command line.

Every subcommand reads an optional flat ``key=value`` file (``--config``);
explicit flags win over the file, which wins over built-in defaults. Outputs
go under ``--out``; progress goes to stderr. Failures print one JSON line on
stderr and exit with the error's code (2 config, 3 data, 4 numeric, 5 I/O).
"""

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, FileError, GliogradeError, NoTumourError, ValidationError
from .grading import (
    AugmentConfig, NO_AUGMENT, ClassifierConfig, decide, load_classifier, predict_proba,
    roi_tensor, train_classifier,
)
from .metrics import MODALITY_MODES, CaseRow, cases_csv, dice, read_cases_csv, report_from_rows
from .nn.optim import OptimizerConfig
from .phantom import generate_cohort
from .preprocess import preprocess_case
from .unet import ModalityDropoutPolicy, UNetConfig, infer_unet_config, load_unet, segment_volume, train_segmentation
from .volumes import (
    MODALITIES, CaseDescriptor, ModelCheckpoint, _read_bytes, _write_bytes, load_manifest, read_volume,
    write_manifest, write_native,
)

log = logging.getLogger("gliograde")


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _spacing(text):
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ValueError(f"spacing needs 1 or 3 values, got {text!r}")
    return tuple(parts)


@dataclass(frozen=True)
class Option:
    type: object
    default: object
    help: str


OPTIONS = {
    "seed": Option(int, 0, "seed for every random stream"),
    "out": Option(str, None, "output directory"),
    "manifest": Option(str, None, "case manifest CSV"),
    "steps": Option(int, 100, "optimisation steps"),
    "batch": Option(int, None, "batch size"),
    "patch": Option(int, 32, "U-Net patch edge in voxels"),
    "mode": Option(str, "all", "modality mode: " + ", ".join(MODALITY_MODES)),
    "checkpoint": Option(str, None, "checkpoint path to write"),
    "seg_ckpt": Option(str, None, "segmentation checkpoint"),
    "cls_ckpt": Option(str, None, "classifier checkpoint"),
    "masks": Option(str, None, "mask table written by segment"),
    "predictions": Option(str, None, "prediction table written by grade"),
    "workers": Option(int, 1, "parallel cases during inference"),
    "count": Option(int, 20, "number of phantoms"),
    "size": Option(int, 48, "phantom edge in voxels"),
    "noise": Option(float, 0.05, "phantom noise sigma"),
    "spacing": Option(_spacing, (1.0, 1.0, 1.0), "target voxel spacing in mm (one value or three)"),
    "levels": Option(int, 4, "U-Net resolution levels"),
    "features": Option(int, 25, "U-Net base feature count"),
    "lr": Option(float, None, "learning rate"),
    "weight_decay": Option(float, 1e-5, "L2 weight decay"),
    "dropout": Option(_bool, True, "modality dropout while training the U-Net"),
    "augment": Option(_bool, True, "augmentation while training the classifier"),
    "log_every": Option(int, 10, "log the loss every N steps (0 = never)"),
    "checkpoint_every": Option(int, 0, "also save the checkpoint every N steps"),
    "dataset": Option(str, "phantom", "dataset name in the report"),
}

SEG_TRAIN = ["seed", "out", "manifest", "steps", "batch", "patch", "checkpoint", "levels", "features", "lr",
             "weight_decay", "dropout", "log_every", "checkpoint_every"]
CLS_TRAIN = ["seed", "out", "manifest", "steps", "batch", "checkpoint", "lr", "weight_decay", "augment", "log_every"]
INFER = ["out", "manifest", "patch", "batch", "mode", "workers"]

COMMANDS = {
    "phantom": (["seed", "out", "count", "size", "noise"], "generate phantom cases and a manifest"),
    "preprocess": (["out", "manifest", "spacing"], "resample and normalise every case"),
    "train-seg": (SEG_TRAIN, "train the segmentation U-Net"),
    "train-cls": (CLS_TRAIN, "train the grading classifier on ground-truth ROIs"),
    "segment": (INFER + ["seg_ckpt"], "write whole-tumour masks"),
    "grade": (INFER + ["seg_ckpt", "cls_ckpt", "masks"], "grade cases from masks or a segmentation checkpoint"),
    "eval": (["out", "predictions", "dataset"], "summarise a prediction table"),
    "pipeline": (INFER + ["seg_ckpt", "cls_ckpt", "dataset"], "segment, grade and evaluate"),
}
REQUIRED = {
    "phantom": ["out"],
    "preprocess": ["out", "manifest"],
    "train-seg": ["out", "manifest"],
    "train-cls": ["out", "manifest"],
    "segment": ["out", "manifest", "seg_ckpt"],
    "grade": ["out", "manifest", "cls_ckpt"],
    "eval": ["out", "predictions"],
    "pipeline": ["out", "manifest", "seg_ckpt", "cls_ckpt"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="gliograde", description="Two-stage glioma grading on 3D MRI.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value file; flags take precedence")
        for key in keys:
            opt = OPTIONS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=opt.help)
    return parser


def read_config(path, valid):
    """Parse ``key=value`` lines; ``#`` starts a comment and dashes in keys read as underscores."""
    text = _read_bytes(path).decode("utf-8")
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in valid:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(valid))}")
        values[key] = value
    return values


def resolve_options(command, namespace):
    keys = COMMANDS[command][0]
    raw = read_config(namespace.config, keys) if namespace.config else {}
    raw.update({k: getattr(namespace, k) for k in keys if getattr(namespace, k) is not None})
    opts = {}
    for key in keys:
        opt = OPTIONS[key]
        if key in raw:
            try:
                opts[key] = opt.type(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        else:
            opts[key] = opt.default
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if "mode" in opts and opts["mode"] not in MODALITY_MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODALITY_MODES)}, got {opts['mode']!r}")
    if "workers" in opts and opts["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    return opts


# -- helpers ------------------------------------------------------------------------


def _load_cases(manifest):
    return [d.load() for d in load_manifest(manifest)]


def _checkpoint(path, what):
    if not Path(path).is_file():
        raise FileError(f"{what} checkpoint not found: {path}")
    return ModelCheckpoint.load(path)


def _seg_config(checkpoint, opts):
    overrides = {"patch_size": opts["patch"]}
    if opts.get("batch"):
        overrides["batch_size"] = opts["batch"]
    return infer_unet_config(checkpoint, **overrides)


def _map(fn, items, workers):
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text):
    _write_bytes(path, text.encode("utf-8"))


def _write_trace(path, trace):
    _write_text(path, "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace, start=1)))


def _save_case(out_dir, case):
    folder = Path(out_dir) / case.case_id
    paths = {}
    for m in MODALITIES:
        vol = case.modalities[m]
        if vol is not None:
            paths[m] = folder / f"{m.lower()}.ggv"
            write_native(paths[m], vol)
        else:
            paths[m] = None
    seg = None
    if case.segmentation is not None:
        seg = folder / "seg.ggv"
        write_native(seg, case.segmentation)
    return CaseDescriptor(case.case_id, paths, seg, case.grade)


def _read_mask_table(path):
    path = Path(path)
    reader = csv.DictReader(io.StringIO(_read_bytes(path).decode("utf-8")))
    if reader.fieldnames != ["case_id", "mask"]:
        raise ValidationError(f"{path}: mask table header must be case_id,mask")
    return {row["case_id"]: path.parent / row["mask"] for row in reader}


# -- subcommands -----------------------------------------------------------------------


def cmd_phantom(opts):
    out = Path(opts["out"])
    n = opts["size"]
    # brain and tumour geometry scale with the edge length; 48 gives the defaults
    scale = n / 48.0
    cases = generate_cohort(
        opts["count"], opts["seed"], dims=(n, n, n), noise_sigma=opts["noise"],
        brain_half_axes=(20.0 * scale, 21.0 * scale, 19.0 * scale),
        tumour_half_axis_range=(6.0 * scale, 12.0 * scale), tumour_offset_range=8.0 * scale,
    )
    descriptors = [_save_case(out, c) for c in cases]
    write_manifest(out / "manifest.csv", descriptors)
    log.info("phantom: wrote %d cases", len(cases))
    return str(out / "manifest.csv")


def cmd_preprocess(opts):
    out = Path(opts["out"])
    descriptors = []
    for d in load_manifest(opts["manifest"]):
        descriptors.append(_save_case(out, preprocess_case(d.load(), opts["spacing"])))
    write_manifest(out / "manifest.csv", descriptors)
    log.info("preprocess: wrote %d cases", len(descriptors))
    return str(out / "manifest.csv")


def cmd_train_seg(opts):
    out = Path(opts["out"])
    config = UNetConfig(levels=opts["levels"], base_features=opts["features"], patch_size=opts["patch"],
                        batch_size=opts["batch"] or UNetConfig.batch_size)
    optimizer = OptimizerConfig.segmentation(weight_decay=opts["weight_decay"],
                                             **({"learning_rate": opts["lr"]} if opts["lr"] else {}))
    ckpt_path = Path(opts["checkpoint"] or out / "seg.ggc")
    dropout = ModalityDropoutPolicy() if opts["dropout"] else ModalityDropoutPolicy(0.0, 0.0)
    result = train_segmentation(
        _load_cases(opts["manifest"]), config, optimizer, steps=opts["steps"], seed=opts["seed"], dropout=dropout,
        checkpoint_every=opts["checkpoint_every"], checkpoint_path=ckpt_path, log_every=opts["log_every"],
    )
    _write_trace(out / "seg_trace.csv", result.trace)
    return str(ckpt_path)


def cmd_train_cls(opts):
    out = Path(opts["out"])
    config = ClassifierConfig(batch_size=opts["batch"] or ClassifierConfig.batch_size)
    optimizer = OptimizerConfig.classification(weight_decay=opts["weight_decay"],
                                               **({"learning_rate": opts["lr"]} if opts["lr"] else {}))
    cases = _load_cases(opts["manifest"])
    unusable = [c.case_id for c in cases if c.segmentation is None or c.grade is None]
    if unusable:
        raise ValidationError(f"train-cls needs a segmentation and grade for every case: {unusable[:5]}")
    rois = [roi_tensor(c, c.segmentation, config) for c in cases]
    ckpt_path = Path(opts["checkpoint"] or out / "cls.ggc")
    result = train_classifier(
        rois, [c.grade for c in cases], config, optimizer, steps=opts["steps"], seed=opts["seed"],
        augmentation=AugmentConfig() if opts["augment"] else NO_AUGMENT, checkpoint_path=ckpt_path,
        log_every=opts["log_every"],
    )
    _write_trace(out / "cls_trace.csv", result.trace)
    return str(ckpt_path)


def _segment_all(cases, opts, out):
    checkpoint = _checkpoint(opts["seg_ckpt"], "segmentation")
    config = _seg_config(checkpoint, opts)
    net = load_unet(checkpoint, config)
    exclude = MODALITY_MODES[opts["mode"]]

    def run(case):
        mask, _ = segment_volume(case, net, config, exclude=exclude)
        write_native(out / "masks" / f"{case.case_id}.ggv", mask)
        return mask

    masks = _map(run, cases, opts["workers"])
    table = "case_id,mask\n" + "".join(f"{c.case_id},masks/{c.case_id}.ggv\n" for c in cases)
    _write_text(out / "masks.csv", table)
    return masks


def _grade_all(cases, masks, opts, out):
    config = ClassifierConfig()
    net = load_classifier(_checkpoint(opts["cls_ckpt"], "classifier"), config)

    def run(item):
        case, mask = item
        seg_dice = dice(mask, case.segmentation) if case.segmentation is not None else None
        try:
            roi = roi_tensor(case, mask, config)
        except NoTumourError:
            log.warning("case %s: no tumour found", case.case_id)
            return CaseRow(case.case_id, 0.0, "LGG", case.grade or "", seg_dice, "no tumour found")
        p_gbm = float(predict_proba(net, roi.data)[0, 1])
        return CaseRow(case.case_id, p_gbm, decide(p_gbm), case.grade or "", seg_dice)

    rows = _map(run, list(zip(cases, masks)), opts["workers"])
    _write_text(out / "predictions.csv", cases_csv(rows))
    return rows


def _evaluate(rows, opts, out):
    report = report_from_rows(rows, opts["dataset"])
    summary = report.summary_csv()
    _write_text(out / "report.csv", summary)
    if report.mean_dice is not None:
        log.info("mean whole-tumour dice %.4f", report.mean_dice)
    return summary.rstrip("\n")


def cmd_segment(opts):
    out = Path(opts["out"])
    _segment_all(_load_cases(opts["manifest"]), opts, out)
    return str(out / "masks.csv")


def cmd_grade(opts):
    out = Path(opts["out"])
    cases = _load_cases(opts["manifest"])
    if opts["masks"]:
        table = _read_mask_table(opts["masks"])
        missing = [c.case_id for c in cases if c.case_id not in table]
        if missing:
            raise ValidationError(f"mask table has no entry for {missing[:5]}")
        masks = [read_volume(table[c.case_id]) for c in cases]
    elif opts["seg_ckpt"]:
        masks = _segment_all(cases, opts, out)
    else:
        raise ConfigError("grade: needs --masks or --seg-ckpt")
    _grade_all(cases, masks, opts, out)
    return str(out / "predictions.csv")


def cmd_eval(opts):
    rows = read_cases_csv(_read_bytes(opts["predictions"]).decode("utf-8"))
    return _evaluate(rows, opts, Path(opts["out"]))


def cmd_pipeline(opts):
    out = Path(opts["out"])
    cases = _load_cases(opts["manifest"])
    masks = _segment_all(cases, opts, out)
    rows = _grade_all(cases, masks, opts, out)
    return _evaluate(rows, opts, out)


HANDLERS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train-seg": cmd_train_seg,
    "train-cls": cmd_train_cls,
    "segment": cmd_segment,
    "grade": cmd_grade,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def _fail(exc, code):
    line = json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        namespace = build_parser().parse_args(argv)
        opts = resolve_options(namespace.command, namespace)
        result = HANDLERS[namespace.command](opts)
    except GliogradeError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, FileError.exit_code)
    if result:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
