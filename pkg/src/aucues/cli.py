"""Command-line pipeline: merge -> split -> train -> eval -> infer ->
phenotype -> associate, plus standalone face alignment.

Exit codes: 0 success, 1 usage/validation failure, 2 runtime/numeric
failure. Outputs are written to temp files and renamed on success, so a
failed command never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import alignment, association, data, metrics, phenotypes, swin, training
from .catalog import AU_IDS, BUILTIN_COVERAGE, LabelError, build_mask, load_coverage
from .config import ConfigError, PipelineConfig, load_config
from .losses import MaskMismatchError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (ConfigError, LabelError, MaskMismatchError, data.ManifestError,
                      data.SplitError, phenotypes.PhenotypeError, metrics.MetricsError,
                      swin.ShapeError, training.TrainingError, alignment.AlignmentError,
                      FileNotFoundError, ValueError)
_RUNTIME_ERRORS = (association.AssociationError, training.NumericError,
                   FloatingPointError, ArithmeticError)


def _atomic(path, write_fn):
    tmp = f"{path}.tmp"
    write_fn(tmp)
    os.replace(tmp, path)


def _out(cfg: PipelineConfig, name: str) -> str:
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return str(Path(cfg.out_dir) / name)


def _coverage_table(cfg: PipelineConfig):
    if cfg.paths.coverage:
        return load_coverage(cfg.paths.coverage)
    return dict(BUILTIN_COVERAGE)


def _load_records_arrays(records, channels):
    images = np.stack([data.load_image(r.image_ref) for r in records])
    if images.ndim == 3:
        images = images[..., None]
    if images.shape[-1] != channels:
        raise swin.ShapeError(
            f"images have {images.shape[-1]} channels, model expects {channels}")
    labels = np.stack([r.labels for r in records])
    return images, labels


# -- commands -----------------------------------------------------------------


def cmd_merge(cfg: PipelineConfig) -> int:
    if not cfg.paths.dataset_manifests:
        print("merge: no dataset manifests configured", file=sys.stderr)
        return EXIT_USAGE
    coverage = _coverage_table(cfg)
    datasets = []
    for manifest in cfg.paths.dataset_manifests:
        # dataset id comes from the manifest's first record via its coverage
        with open(manifest) as fh:
            header = fh.readline()
            first = fh.readline()
        if not first:
            raise data.ManifestError(f"{manifest}: empty manifest")
        dataset_id = first.split(",")[header.split(",").index("dataset_id")].strip()
        if dataset_id not in coverage:
            raise data.ManifestError(f"{manifest}: no coverage for {dataset_id!r}")
        cov = coverage[dataset_id]
        datasets.append((data.parse_dataset_manifest(manifest, cov), cov))
    merged = data.merge_datasets(datasets)
    out = _out(cfg, "merged.csv")
    _atomic(out, lambda p: data.write_merged_manifest(p, merged))
    print(f"merged {len(merged)} records from {len(datasets)} datasets -> {out}")
    for records, cov in datasets:
        n_covered = int(cov.indicator().sum())
        print(f"  {cov.dataset_id}: {len(records)} records, {n_covered} covered AUs")
    return EXIT_OK


def cmd_split(cfg: PipelineConfig) -> int:
    merged = data.parse_merged_manifest(_out(cfg, "merged.csv"))
    train, test = data.subject_split(merged, cfg.test_fraction, cfg.seed)
    _atomic(_out(cfg, "train.csv"), lambda p: data.write_merged_manifest(p, train))
    _atomic(_out(cfg, "test.csv"), lambda p: data.write_merged_manifest(p, test))
    print(f"split: {len(train)} train / {len(test)} test records "
          f"({len({r.subject_id for r in train})} / "
          f"{len({r.subject_id for r in test})} subjects)")
    return EXIT_OK


def cmd_align(cfg: PipelineConfig) -> int:
    if not (cfg.paths.landmark_manifest and cfg.paths.images_dir):
        print("align: landmark_manifest and images_dir must be configured",
              file=sys.stderr)
        return EXIT_USAGE
    landmarks = data.parse_landmark_manifest(cfg.paths.landmark_manifest)
    out_dir = Path(_out(cfg, "aligned"))
    out_dir.mkdir(exist_ok=True)
    for frame_id, pts in landmarks.items():
        image = data.load_image(str(Path(cfg.paths.images_dir) / f"{frame_id}.npy"))
        aligned = alignment.align_face(image, pts, cfg.align_out_size)
        target = out_dir / f"{frame_id}.npy"
        np.save(f"{target}.tmp.npy", aligned)
        os.replace(f"{target}.tmp.npy", target)
    print(f"aligned {len(landmarks)} frames -> {out_dir}")
    return EXIT_OK


def cmd_train(cfg: PipelineConfig) -> int:
    train_records = data.parse_merged_manifest(_out(cfg, "train.csv"))
    val_records = data.parse_merged_manifest(_out(cfg, "test.csv"))
    if not train_records:
        print("train: training manifest is empty", file=sys.stderr)
        return EXIT_USAGE
    train_set = _load_records_arrays(train_records, cfg.model.channels)
    val_set = _load_records_arrays(val_records, cfg.model.channels)
    params = swin.init_params(cfg.model, seed=cfg.seed)
    params, history = training.train(cfg.model, params, train_set, val_set,
                                     cfg.train, log_path=_out(cfg, "run_log.jsonl"))
    swin.save_checkpoint(_out(cfg, "model.npz"), params, cfg.model)
    last = history[-1]
    print(f"trained {last.epoch} epochs; final val loss {last.val_loss:.6f}"
          f"{' (early stop)' if last.stopped_early else ''}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, checkpoint: str | None = None) -> int:
    params, model_config = swin.load_checkpoint(checkpoint or _out(cfg, "model.npz"))
    records = data.parse_merged_manifest(_out(cfg, "test.csv"))
    images, labels = _load_records_arrays(records, model_config.channels)
    masks = build_mask(labels)
    logits = np.concatenate([swin.forward(images[i:i + 64], params, model_config)
                             for i in range(0, len(images), 64)])
    preds = (1.0 / (1.0 + np.exp(-logits)) >= cfg.thresholds.prediction).astype(int)
    report = metrics.report_from_counts(metrics.confusion(preds, labels, masks))
    out = _out(cfg, "metrics.csv")
    _atomic(out, lambda p: metrics.write_report(p, report))
    mean_f1, mean_acc = metrics.mean_metrics(report)
    print(f"eval: mean F1 {mean_f1:.4f}, mean accuracy {mean_acc:.4f} -> {out}")
    return EXIT_OK


def cmd_infer(cfg: PipelineConfig, checkpoint: str | None = None) -> int:
    if not (cfg.paths.frame_manifest and cfg.paths.frames_dir):
        print("infer: frame_manifest and frames_dir must be configured",
              file=sys.stderr)
        return EXIT_USAGE
    params, model_config = swin.load_checkpoint(checkpoint or _out(cfg, "model.npz"))
    frames = data.parse_frame_manifest(cfg.paths.frame_manifest)
    detections = []
    for start in range(0, len(frames), 64):
        chunk = frames[start:start + 64]
        images = np.stack([data.load_image(
            str(Path(cfg.paths.frames_dir) / f"{f.frame_id}.npy")) for f in chunk])
        if images.ndim == 3:
            images = images[..., None]
        probs = 1.0 / (1.0 + np.exp(-swin.forward(images, params, model_config)))
        for f, row in zip(chunk, probs):
            for k, au in enumerate(AU_IDS):
                detections.append(association.Detection(
                    f.frame_id, f.video_id, f.patient_id, au, float(row[k])))
    out = _out(cfg, "detections.csv")
    _atomic(out, lambda p: association.write_detections(p, detections))
    print(f"inferred {len(frames)} frames -> {out}")
    return EXIT_OK


def cmd_phenotype(cfg: PipelineConfig) -> int:
    paths = cfg.paths
    if not all((paths.stays, paths.pain_events, paths.therapies, paths.assessments)):
        print("phenotype: stays, pain_events, therapies, and assessments files "
              "must be configured", file=sys.stderr)
        return EXIT_USAGE
    stays = phenotypes.read_stays(paths.stays)
    pains = phenotypes.read_pain_events(paths.pain_events)
    therapies = phenotypes.read_therapies(paths.therapies)
    assessments = phenotypes.read_assessments(paths.assessments)
    thresholds = phenotypes.AbdThresholds(cfg.phenotype.coma_rass_max,
                                          cfg.phenotype.coma_gcs_max)
    intervals = []
    for stay in stays:
        pid = stay.patient_id
        intervals.extend(phenotypes.label_patient(
            stay,
            [t for t in therapies if t.patient_id == pid],
            [a for a in assessments if a.patient_id == pid],
            [p for p in pains if p.patient_id == pid],
            pain_half_window=cfg.phenotype.pain_half_window,
            thresholds=thresholds))
    out = _out(cfg, "intervals.csv")
    _atomic(out, lambda p: phenotypes.write_intervals(p, intervals))
    print(f"phenotyped {len(stays)} patients, {len(intervals)} intervals -> {out}")
    return EXIT_OK


def cmd_associate(cfg: PipelineConfig) -> int:
    report = metrics.read_report(_out(cfg, "metrics.csv"))
    included = sorted(metrics.inclusion_filter(report, cfg.thresholds.f1_min,
                                               cfg.thresholds.acc_min))
    if not included:
        print("associate: no AUs pass the inclusion filter", file=sys.stderr)
        return EXIT_RUNTIME
    detections = [d for d in association.read_detections(_out(cfg, "detections.csv"))
                  if d.au in included]
    intervals = phenotypes.read_intervals(_out(cfg, "intervals.csv"))
    frames = data.parse_frame_manifest(cfg.paths.frame_manifest)
    frame_times = {f.frame_id: f.timestamp for f in frames}

    report_rows, ratio_rows = [], []
    for contrast in ("pain", "abd", "acuity"):
        aggregates = association.aggregate_by_video(
            detections, frame_times, intervals, contrast,
            threshold=cfg.thresholds.prediction)
        fit = association.fit_glmm(aggregates, included)
        for (au, sign, p, sig), beta, se in zip(
                association.significance_report(fit, cfg.thresholds.alpha),
                fit.beta[1:], fit.se[1:]):
            report_rows.append({"contrast": contrast, "au": au,
                                "beta": float(beta), "se": float(se), "p": p,
                                "sign": sign, "significant": sig})
        ratio_rows.extend(_presence_rows(contrast, detections, frame_times,
                                         intervals, included, cfg))
    _atomic(_out(cfg, "association.csv"),
            lambda p: association.write_association_report(p, report_rows))
    _atomic(_out(cfg, "presence_ratios.csv"),
            lambda p: association.write_presence_ratios(p, ratio_rows))
    print(f"associated {len(included)} AUs across 3 contrasts -> "
          f"{_out(cfg, 'association.csv')}")
    return EXIT_OK


def _presence_rows(contrast, detections, frame_times, intervals, included, cfg):
    positive, negative = association.CONTRASTS[contrast]
    per_frame: dict[str, dict] = {}
    for d in detections:
        per_frame.setdefault(d.frame_id, {"patient_id": d.patient_id})[d.au] = d.probability
    by_patient: dict[str, list] = {}
    for iv in intervals:
        if iv.kind == contrast:
            by_patient.setdefault(iv.patient_id, []).append(iv)
    indicators, classes = [], []
    for frame_id, aus in sorted(per_frame.items()):
        ts = frame_times[frame_id]
        label = None
        for iv in by_patient.get(aus["patient_id"], ()):
            if iv.start <= ts < iv.end:
                if iv.label in positive:
                    label = "positive"
                elif iv.label in negative:
                    label = "negative"
        if label is None:
            continue
        classes.append(label)
        indicators.append([int(aus.get(au, 0.0) >= cfg.thresholds.prediction)
                           for au in included])
    ratios = association.presence_ratio(np.array(indicators), included, classes)
    return [{"contrast": contrast, "class": cls, "au": au, "ratio": ratio}
            for (au, cls), ratio in sorted(ratios.items())]


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aucues",
        description="Facial AU detection across partially labeled datasets "
                    "and clinical association analysis")
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("merge")
    sub.add_parser("split")
    sub.add_parser("align")
    sub.add_parser("train")
    for name in ("eval", "infer"):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", help="model checkpoint (default: out dir)")
    sub.add_parser("phenotype")
    sub.add_parser("associate")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; fold that into the usage code
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(
                cfg, seed=args.seed,
                train=dataclasses.replace(cfg.train, seed=args.seed))
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        if args.command == "merge":
            return cmd_merge(cfg)
        if args.command == "split":
            return cmd_split(cfg)
        if args.command == "align":
            return cmd_align(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint)
        if args.command == "phenotype":
            return cmd_phenotype(cfg)
        if args.command == "associate":
            return cmd_associate(cfg)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
