"""Synthetic fixtures: two partially-labeled image datasets with a
separable AU signal, plus a small clinical cohort (frames, EHR events)
for the association pipeline. Real patient data is private; these stand
in for it in tests and demos.

Images are 32x32x3: AU k present lights one (pixel, channel) slot of a
4x4 pattern that is tiled over the whole image. Every patch then carries
the full label vector, so the signal is linear in the mean patch and
survives the model's global mean pooling (which is position-blind: the
patch projection is shared and relative position bias is off by
default). A patch-position encoding would not be learnable here.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .catalog import AU_IDS

# disjoint coverage: first 9 catalog AUs vs last 9
SYNTH_A_AUS = AU_IDS[:9]
SYNTH_B_AUS = AU_IDS[9:]


def au_image(labels: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render the 18-bit label vector into a tiled 4x4x3 patch pattern.

    AU k present lights pixel k % 16, channel k // 16 of the pattern.
    """
    pattern = np.zeros((16, 3))
    for k, present in enumerate(labels):
        if present == 1:
            pattern[k % 16, k // 16] = 1.0
    img = np.tile(pattern.reshape(4, 4, 3), (8, 8, 1))
    if rng is not None:
        img += rng.normal(0, 0.01, img.shape)
    return img


def write_dataset(root: Path, dataset_id: str, au_subset, n_subjects: int,
                  samples_per_subject: int, rng: np.random.Generator,
                  intensity: bool = False) -> Path:
    """One dataset manifest + images; labels Bernoulli(1/2) on covered AUs."""
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = root / f"{dataset_id}.csv"
    cols = ["sample_id", "dataset_id", "subject_id", "image_ref"] + \
        [f"au{a}" for a in au_subset]
    rows = []
    positions = [AU_IDS.index(a) for a in au_subset]
    for s in range(n_subjects):
        subject = f"{dataset_id}-subj{s:03d}"
        for i in range(samples_per_subject):
            sample = f"{dataset_id}-{s:03d}-{i:04d}"
            covered = rng.integers(0, 2, len(au_subset))
            full = np.zeros(len(AU_IDS), dtype=np.int64)
            full[positions] = covered
            path = img_dir / f"{sample}.npy"
            np.save(path, au_image(full, rng))
            values = covered * 4 if intensity else covered  # intensity 0/4 -> 0/1
            rows.append([sample, dataset_id, subject, str(path)] + list(values))
    with manifest.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    return manifest


def write_coverage(root: Path) -> Path:
    path = root / "coverage.json"
    path.write_text(json.dumps([
        {"dataset_id": "SYNTHA", "covered_aus": list(SYNTH_A_AUS)},
        {"dataset_id": "SYNTHB", "covered_aus": list(SYNTH_B_AUS)},
    ]))
    return path


def write_clinical_fixture(root: Path, rng: np.random.Generator,
                           n_patients: int = 10, videos_per_patient: int = 8,
                           frames_per_video: int = 5) -> dict[str, Path]:
    """Frames + frame manifest + EHR event files for one synthetic cohort.

    Videos sit 4 h apart inside a stay, so each falls in exactly one
    acuity interval and one pain window. Outcomes alternate so every
    contrast has both classes.
    """
    frames_dir = root / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    frame_rows, pain_rows, therapy_rows, assess_rows, stay_rows = [], [], [], [], []
    hour = 3600.0
    for p in range(n_patients):
        pid = f"pat{p:03d}"
        admission = 0.0
        discharge = videos_per_patient * 4 * hour
        stay_rows.append((pid, admission, discharge))
        for v in range(videos_per_patient):
            vid = f"{pid}-vid{v:02d}"
            base = v * 4 * hour + 600.0
            for f in range(frames_per_video):
                fid = f"{vid}-f{f:02d}"
                ts = base + f
                labels = rng.integers(0, 2, len(AU_IDS))
                np.save(frames_dir / f"{fid}.npy", au_image(labels, rng))
                frame_rows.append((fid, vid, pid, ts))
            # pain report centered on the video; class alternates per video
            pain_rows.append((pid, base + 2.0, 2 if (v + p) % 2 == 0 else 6))
            if (v + p) % 2 == 1:  # therapy overlapping this 4h interval
                therapy_rows.append((pid, "mechanical_ventilation",
                                     v * 4 * hour, v * 4 * hour + 2 * hour))
        # one assessment per 12h window, delirium in alternating windows
        n_abd = int(np.ceil(discharge / (12 * hour)))
        for w in range(n_abd):
            cam = "positive" if (w + p) % 2 == 0 else "negative"
            assess_rows.append((pid, w * 12 * hour + hour, cam, 0, 15))

    paths = {}
    paths["frame_manifest"] = root / "frame_manifest.csv"
    with paths["frame_manifest"].open("w") as fh:
        fh.write("frame_id,video_id,patient_id,timestamp\n")
        for r in frame_rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]!r}\n")
    paths["pain_events"] = root / "pain_events.csv"
    with paths["pain_events"].open("w") as fh:
        fh.write("patient_id,timestamp,score\n")
        for r in pain_rows:
            fh.write(f"{r[0]},{r[1]!r},{r[2]}\n")
    paths["therapies"] = root / "therapies.csv"
    with paths["therapies"].open("w") as fh:
        fh.write("patient_id,therapy,start,end\n")
        for r in therapy_rows:
            fh.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r}\n")
    paths["assessments"] = root / "assessments.csv"
    with paths["assessments"].open("w") as fh:
        fh.write("patient_id,timestamp,cam,rass,gcs\n")
        for r in assess_rows:
            fh.write(f"{r[0]},{r[1]!r},{r[2]},{r[3]},{r[4]}\n")
    paths["stays"] = root / "stays.csv"
    with paths["stays"].open("w") as fh:
        fh.write("patient_id,admission,discharge\n")
        for r in stay_rows:
            fh.write(f"{r[0]},{r[1]!r},{r[2]!r}\n")
    paths["frames_dir"] = frames_dir
    return paths


def write_pipeline_fixture(root: Path, seed: int = 0,
                           n_subjects: int = 8, samples_per_subject: int = 25,
                           epochs: int = 10) -> Path:
    """Full CLI fixture: datasets, clinical cohort, and a config.json."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    manifest_a = write_dataset(root, "SYNTHA", SYNTH_A_AUS, n_subjects,
                               samples_per_subject, rng)
    manifest_b = write_dataset(root, "SYNTHB", SYNTH_B_AUS, n_subjects,
                               samples_per_subject, rng)
    coverage = write_coverage(root)
    clinical = write_clinical_fixture(root, rng)
    config = {
        "seed": seed,
        "out_dir": "out",
        "test_fraction": 0.3,
        "paths": {
            "dataset_manifests": [manifest_a.name, manifest_b.name],
            "coverage": coverage.name,
            "frame_manifest": clinical["frame_manifest"].name,
            "frames_dir": clinical["frames_dir"].name,
            "stays": clinical["stays"].name,
            "pain_events": clinical["pain_events"].name,
            "therapies": clinical["therapies"].name,
            "assessments": clinical["assessments"].name,
        },
        "model": {"channels": 3, "seed": seed},
        "train": {"epochs": epochs, "learning_rate": 3e-3, "seed": seed},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2))
    return config_path
