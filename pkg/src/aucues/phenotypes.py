"""Interval-level clinical phenotypes from EHR event streams.

Pain scores (DVPRS 0-10) dichotomize at < 4 vs >= 4. Acuity is labeled
stable/unstable on a 4-hour grid from admission by overlap with life
support therapies. Acute brain dysfunction is labeled on a 12-hour grid
from CAM/RASS/GCS assessments with precedence coma > delirium > normal.
All intervals are half-open [start, end); the final partial interval of
a stay is kept.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ACUITY_WIDTH = 4 * 3600.0
ABD_WIDTH = 12 * 3600.0
THERAPIES = ("CRRT", "mechanical_ventilation", "vasopressor", "blood_transfusion")
CAM_VALUES = ("positive", "negative", "unassessable")


class PhenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class PainEvent:
    patient_id: str
    timestamp: float
    score: int

    def __post_init__(self):
        if not 0 <= self.score <= 10:
            raise PhenotypeError(f"DVPRS score must be 0..10, got {self.score}")


@dataclass(frozen=True)
class TherapyInterval:
    patient_id: str
    therapy: str
    start: float
    end: float

    def __post_init__(self):
        if self.therapy not in THERAPIES:
            raise PhenotypeError(f"unknown therapy {self.therapy!r}")
        if self.start > self.end:
            raise PhenotypeError("therapy interval has start > end")


@dataclass(frozen=True)
class AssessmentEvent:
    patient_id: str
    timestamp: float
    cam: str | None = None
    rass: int | None = None
    gcs: int | None = None

    def __post_init__(self):
        if self.cam is not None and self.cam not in CAM_VALUES:
            raise PhenotypeError(f"CAM must be one of {CAM_VALUES}, got {self.cam!r}")
        if self.rass is not None and not -5 <= self.rass <= 4:
            raise PhenotypeError(f"RASS must be -5..+4, got {self.rass}")
        if self.gcs is not None and not 3 <= self.gcs <= 15:
            raise PhenotypeError(f"GCS must be 3..15, got {self.gcs}")


@dataclass(frozen=True)
class PhenotypeInterval:
    patient_id: str
    start: float
    end: float
    kind: str  # pain | acuity | abd
    label: str


@dataclass(frozen=True)
class AbdThresholds:
    """Coma cut points; delirium requires a positive CAM. Configurable so
    alternative published criteria can be substituted."""

    coma_rass_max: int = -4
    coma_gcs_max: int = 8


def pain_category(score: int) -> str:
    """low iff score < 4 (DVPRS dichotomy used in the analysis)."""
    if not 0 <= score <= 10:
        raise PhenotypeError(f"DVPRS score must be 0..10, got {score}")
    return "low" if score < 4 else "high"


def interval_grid(admission: float, discharge: float, width: float
                  ) -> list[tuple[float, float]]:
    """Half-open intervals tiling [admission, discharge); last may be partial."""
    if admission >= discharge:
        raise PhenotypeError("admission must precede discharge")
    if width <= 0:
        raise PhenotypeError("interval width must be positive")
    edges = []
    start = admission
    while start < discharge:
        edges.append((start, min(start + width, discharge)))
        start += width
    return edges


def acuity_label(interval: tuple[float, float],
                 therapies: list[TherapyInterval]) -> str:
    """unstable iff any life-support therapy overlaps the interval."""
    start, end = interval
    for th in therapies:
        if th.start < end and th.end > start:
            return "unstable"
    return "stable"


def abd_label(interval: tuple[float, float],
              assessments: list[AssessmentEvent],
              thresholds: AbdThresholds = AbdThresholds()) -> str:
    """Worst state observed in the interval: coma > delirium > normal;
    unlabeled when no assessment falls inside."""
    start, end = interval
    inside = [a for a in assessments if start <= a.timestamp < end]
    if not inside:
        return "unlabeled"
    for a in inside:
        if a.rass is not None and a.rass <= thresholds.coma_rass_max:
            return "coma"
        if a.gcs is not None and a.gcs <= thresholds.coma_gcs_max:
            return "coma"
    if any(a.cam == "positive" for a in inside):
        return "delirium"
    return "normal"


@dataclass
class PatientStay:
    patient_id: str
    admission: float
    discharge: float


def label_patient(stay: PatientStay,
                  therapies: list[TherapyInterval],
                  assessments: list[AssessmentEvent],
                  pain_events: list[PainEvent],
                  pain_half_window: float = 3600.0,
                  thresholds: AbdThresholds = AbdThresholds()
                  ) -> list[PhenotypeInterval]:
    """All phenotype intervals for one stay.

    Pain intervals are centered (closed width 2*half_window) on each
    reported score; acuity and ABD tile the stay on their fixed grids.
    """
    out = []
    for lo, hi in interval_grid(stay.admission, stay.discharge, ACUITY_WIDTH):
        out.append(PhenotypeInterval(stay.patient_id, lo, hi, "acuity",
                                     acuity_label((lo, hi), therapies)))
    for lo, hi in interval_grid(stay.admission, stay.discharge, ABD_WIDTH):
        out.append(PhenotypeInterval(stay.patient_id, lo, hi, "abd",
                                     abd_label((lo, hi), assessments, thresholds)))
    for ev in pain_events:
        out.append(PhenotypeInterval(
            stay.patient_id, ev.timestamp - pain_half_window,
            ev.timestamp + pain_half_window, "pain", pain_category(ev.score)))
    return out


# -- file io ------------------------------------------------------------------


def _read_csv(path, required: tuple[str, ...]):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise PhenotypeError(f"{path}: missing columns {missing}")
        return list(reader)


def read_pain_events(path) -> list[PainEvent]:
    return [PainEvent(r["patient_id"], float(r["timestamp"]), int(r["score"]))
            for r in _read_csv(path, ("patient_id", "timestamp", "score"))]


def read_therapies(path) -> list[TherapyInterval]:
    return [TherapyInterval(r["patient_id"], r["therapy"],
                            float(r["start"]), float(r["end"]))
            for r in _read_csv(path, ("patient_id", "therapy", "start", "end"))]


def read_assessments(path) -> list[AssessmentEvent]:
    out = []
    for r in _read_csv(path, ("patient_id", "timestamp")):
        out.append(AssessmentEvent(
            r["patient_id"], float(r["timestamp"]),
            cam=r.get("cam") or None,
            rass=int(r["rass"]) if r.get("rass") else None,
            gcs=int(r["gcs"]) if r.get("gcs") else None,
        ))
    return out


def read_stays(path) -> list[PatientStay]:
    return [PatientStay(r["patient_id"], float(r["admission"]), float(r["discharge"]))
            for r in _read_csv(path, ("patient_id", "admission", "discharge"))]


def write_intervals(path, intervals: list[PhenotypeInterval]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "kind", "start", "end", "label"])
        for iv in intervals:
            writer.writerow([iv.patient_id, iv.kind, repr(iv.start),
                             repr(iv.end), iv.label])


def read_intervals(path) -> list[PhenotypeInterval]:
    rows = _read_csv(path, ("patient_id", "kind", "start", "end", "label"))
    return [PhenotypeInterval(r["patient_id"], float(r["start"]),
                              float(r["end"]), r["kind"], r["label"])
            for r in rows]
