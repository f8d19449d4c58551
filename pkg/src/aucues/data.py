"""Dataset ingestion: manifests, intensity binarization, dummy-label
merging, subject-disjoint splitting, and pain-window frame selection.

Manifest formats (CSV, header required, unknown columns rejected):

* dataset manifest: ``sample_id, dataset_id, subject_id, image_ref,
  [timestamp,] au<k>...`` with one ``au<k>`` column per covered AU;
  values are binary, or 0-5 intensities for datasets flagged
  ``intensity_labels`` (binarized at >= 2).
* merged manifest: same base columns plus all 18 ``au<k>`` columns,
  uncovered entries written as -1.
* frame manifest: ``frame_id, video_id, patient_id, timestamp``.
* landmark manifest: ``frame_id, x1, y1, ..., x5, y5``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .catalog import AU_IDS, DatasetCoverage, LabelError, build_mask, fill_dummy


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class SampleRecord:
    sample_id: str
    dataset_id: str
    subject_id: str
    image_ref: str
    labels: np.ndarray  # full 18-entry ternary vector
    timestamp: float | None = None


@dataclass(frozen=True)
class FrameEvent:
    frame_id: str
    video_id: str
    patient_id: str
    timestamp: float


def disfa_binarize(intensity: int) -> int:
    """0-5 AU intensity -> presence; present iff intensity >= 2."""
    if not isinstance(intensity, (int, np.integer)) or not 0 <= intensity <= 5:
        raise ManifestError(f"intensity must be an integer in 0..5, got {intensity!r}")
    return int(intensity >= 2)


_BASE_COLUMNS = ("sample_id", "dataset_id", "subject_id", "image_ref")


def _read_rows(path, allowed: set[str], required: tuple[str, ...]):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        unknown = [c for c in cols if c not in allowed]
        if unknown:
            raise ManifestError(f"{path}: unknown columns {unknown}")
        missing = [c for c in required if c not in cols]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        return cols, list(reader)


def parse_dataset_manifest(path, coverage: DatasetCoverage) -> list[SampleRecord]:
    """Read one dataset's manifest and expand labels to the full catalog."""
    au_cols = {f"au{a}": a for a in coverage.covered_aus}
    allowed = set(_BASE_COLUMNS) | {"timestamp"} | set(au_cols)
    _, rows = _read_rows(path, allowed, _BASE_COLUMNS)
    records = []
    for lineno, row in enumerate(rows, start=2):
        if row["dataset_id"] != coverage.dataset_id:
            raise ManifestError(
                f"{path}:{lineno}: dataset_id {row['dataset_id']!r} does not match "
                f"coverage {coverage.dataset_id!r}"
            )
        partial = {}
        for col, au in au_cols.items():
            raw = row.get(col)
            if raw in (None, ""):
                continue
            value = int(raw)
            if coverage.intensity_labels:
                value = disfa_binarize(value)
            partial[au] = value
        try:
            labels = fill_dummy(partial, coverage)
        except LabelError as exc:
            raise ManifestError(f"{path}:{lineno} ({row['sample_id']}): {exc}") from exc
        ts = row.get("timestamp")
        records.append(SampleRecord(
            sample_id=row["sample_id"],
            dataset_id=row["dataset_id"],
            subject_id=row["subject_id"],
            image_ref=row["image_ref"],
            labels=labels,
            timestamp=float(ts) if ts not in (None, "") else None,
        ))
    return records


def merge_datasets(datasets: list[tuple[list[SampleRecord], DatasetCoverage]]) -> list[SampleRecord]:
    """Concatenate datasets over the full catalog, checking coverage."""
    merged = []
    for records, coverage in datasets:
        indicator = coverage.indicator()
        for rec in records:
            mask = build_mask(rec.labels)
            if not np.array_equal(mask, indicator):
                raise LabelError(
                    f"record {rec.sample_id!r}: labels violate coverage of "
                    f"{coverage.dataset_id!r}"
                )
            merged.append(rec)
    return merged


def write_merged_manifest(path, records: list[SampleRecord]) -> None:
    cols = list(_BASE_COLUMNS) + ["timestamp"] + [f"au{a}" for a in AU_IDS]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in records:
            ts = "" if rec.timestamp is None else repr(rec.timestamp)
            writer.writerow([rec.sample_id, rec.dataset_id, rec.subject_id,
                             rec.image_ref, ts] + [int(v) for v in rec.labels])


def parse_merged_manifest(path) -> list[SampleRecord]:
    au_cols = {f"au{a}": k for k, a in enumerate(AU_IDS)}
    allowed = set(_BASE_COLUMNS) | {"timestamp"} | set(au_cols)
    required = _BASE_COLUMNS + tuple(au_cols)
    _, rows = _read_rows(path, allowed, required)
    records = []
    for row in rows:
        labels = np.array([int(row[f"au{a}"]) for a in AU_IDS], dtype=np.int64)
        build_mask(labels)  # validates ternary values
        ts = row.get("timestamp")
        records.append(SampleRecord(
            sample_id=row["sample_id"], dataset_id=row["dataset_id"],
            subject_id=row["subject_id"], image_ref=row["image_ref"],
            labels=labels,
            timestamp=float(ts) if ts not in (None, "") else None,
        ))
    return records


def subject_split(records: list[SampleRecord], test_fraction: float,
                  seed: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Split whole subjects into disjoint train/test partitions.

    Subjects are shuffled with the seed, then assigned to the test side
    greedily until its record count reaches the target fraction.
    """
    if not 0 < test_fraction < 1:
        raise SplitError("test_fraction must be in (0, 1)")
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 2:
        raise SplitError("need at least 2 subjects for a subject-disjoint split")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    counts = {s: 0 for s in subjects}
    for r in records:
        counts[r.subject_id] += 1
    target = test_fraction * len(records)
    test_subjects: set[str] = set()
    filled = 0
    for s in order:
        if filled >= target or len(test_subjects) == len(subjects) - 1:
            break
        test_subjects.add(s)
        filled += counts[s]
    train = [r for r in records if r.subject_id not in test_subjects]
    test = [r for r in records if r.subject_id in test_subjects]
    return train, test


def parse_frame_manifest(path) -> list[FrameEvent]:
    allowed = {"frame_id", "video_id", "patient_id", "timestamp"}
    _, rows = _read_rows(path, allowed, tuple(sorted(allowed)))
    frames = []
    last_ts: dict[str, float] = {}
    for lineno, row in enumerate(rows, start=2):
        ts = float(row["timestamp"])
        if ts < 0:
            raise ManifestError(f"{path}:{lineno}: negative timestamp")
        prev = last_ts.get(row["video_id"])
        if prev is not None and ts < prev:
            raise ManifestError(
                f"{path}:{lineno}: timestamps not monotone within video "
                f"{row['video_id']!r}"
            )
        last_ts[row["video_id"]] = ts
        frames.append(FrameEvent(row["frame_id"], row["video_id"],
                                 row["patient_id"], ts))
    return frames


def parse_landmark_manifest(path) -> dict[str, np.ndarray]:
    cols = ["frame_id"] + [f"{c}{i}" for i in range(1, 6) for c in ("x", "y")]
    _, rows = _read_rows(path, set(cols), tuple(cols))
    out = {}
    for row in rows:
        pts = np.array([[float(row[f"x{i}"]), float(row[f"y{i}"])]
                        for i in range(1, 6)])
        out[row["frame_id"]] = pts
    return out


def select_pain_window_frames(frames: list[FrameEvent], pain_ts: float,
                              half_window: float = 3600.0) -> list[FrameEvent]:
    """Frames with |timestamp - pain_ts| <= half_window (closed interval)."""
    times = [f.timestamp for f in frames]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ManifestError("frames must be sorted by timestamp")
    return [f for f in frames if abs(f.timestamp - pain_ts) <= half_window]


def load_image(path) -> np.ndarray:
    """Resolve an image_ref: .npy arrays as-is, raster files scaled to [0, 1]."""
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0
