"""Action unit catalog, ternary label vectors, and mask derivation.

All label vectors and masks in this package are positional against the
fixed 18-AU catalog below. -1 marks an AU that is not annotated in the
record's source dataset; the derived binary mask is 1 exactly where a
real {0,1} label exists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# Canonical catalog order. Every vector/mask index k refers to AU_IDS[k].
AU_IDS: tuple[int, ...] = (1, 2, 4, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 24, 25, 26, 27, 43)
N_AUS = len(AU_IDS)

AU_NAMES: dict[int, str] = {
    1: "Inner Brow Raiser",
    2: "Outer Brow Raiser",
    4: "Brow Lowerer",
    6: "Cheek Raiser",
    7: "Lid Tightener",
    9: "Nose Wrinkler",
    10: "Upper Lip Raiser",
    12: "Lip Corner Puller",
    14: "Dimpler",
    15: "Lip Corner Depressor",
    17: "Chin Raiser",
    20: "Lip Stretcher",
    23: "Lip Tightener",
    24: "Lip Pressor",
    25: "Lips Part",
    26: "Jaw Drop",
    27: "Mouth Stretch",
    43: "Eyes Closed",
}

_AU_INDEX = {au: k for k, au in enumerate(AU_IDS)}


class LabelError(ValueError):
    """Raised when a label vector, mask, or coverage set is malformed."""


@dataclass(frozen=True)
class DatasetCoverage:
    """Which AUs a dataset annotates. ``intensity_labels`` marks datasets
    whose raw annotations are 0-5 intensities rather than binary."""

    dataset_id: str
    covered_aus: frozenset[int]
    intensity_labels: bool = False

    def __post_init__(self):
        extra = self.covered_aus - set(AU_IDS)
        if extra:
            raise LabelError(
                f"dataset {self.dataset_id!r}: AUs {sorted(extra)} not in catalog"
            )

    def indicator(self) -> np.ndarray:
        """0/1 vector over the catalog, 1 where this dataset has labels."""
        out = np.zeros(N_AUS, dtype=np.int64)
        for au in self.covered_aus:
            out[_AU_INDEX[au]] = 1
        return out


# Built-in coverage of the four source datasets. AU5 appears in DISFA's
# raw annotations but is outside the 18-AU catalog and is dropped here.
BUILTIN_COVERAGE: dict[str, DatasetCoverage] = {
    "BP4D": DatasetCoverage("BP4D", frozenset({1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24})),
    "DISFA": DatasetCoverage(
        "DISFA", frozenset({1, 2, 4, 6, 9, 12, 15, 17, 20, 25, 26}), intensity_labels=True
    ),
    "UNBC": DatasetCoverage("UNBC", frozenset({4, 6, 7, 9, 10, 12, 15, 20, 25, 26, 27, 43})),
    "AU-ICU": DatasetCoverage("AU-ICU", frozenset({4, 6, 7, 9, 10, 12, 20, 24, 25, 26, 27, 43})),
}


def au_index(au_id: int) -> int:
    if au_id not in _AU_INDEX:
        raise LabelError(f"AU{au_id} is not in the catalog")
    return _AU_INDEX[au_id]


def validate_labels(values) -> np.ndarray:
    """Check a ternary label vector (or batch of rows) and return it as int64."""
    arr = np.asarray(values, dtype=np.int64)
    if arr.shape[-1] != N_AUS:
        raise LabelError(f"label vector must have {N_AUS} entries, got shape {arr.shape}")
    bad = ~np.isin(arr, (-1, 0, 1))
    if bad.any():
        raise LabelError(f"label values must be in {{-1, 0, 1}}; found {arr[bad][:5]}")
    return arr


def build_mask(labels) -> np.ndarray:
    """Binary mask: 1 where the label is a real {0,1} annotation, 0 at -1."""
    arr = validate_labels(labels)
    return (arr != -1).astype(np.int64)


def fill_dummy(partial_labels: dict[int, int], coverage: DatasetCoverage) -> np.ndarray:
    """Expand per-AU binary labels into a full catalog vector with -1 fill.

    Covered AUs default to 0 when not present in ``partial_labels``;
    uncovered AUs always carry the -1 dummy.
    """
    bad = set(partial_labels) - coverage.covered_aus
    if bad:
        raise LabelError(
            f"labels supplied for AUs {sorted(bad)} not covered by {coverage.dataset_id!r}"
        )
    out = np.full(N_AUS, -1, dtype=np.int64)
    for au in coverage.covered_aus:
        v = int(partial_labels.get(au, 0))
        if v not in (0, 1):
            raise LabelError(f"AU{au}: binary label expected, got {v}")
        out[_AU_INDEX[au]] = v
    return out


def load_coverage(path) -> dict[str, DatasetCoverage]:
    """Read a coverage override file: JSON list of
    ``{"dataset_id": ..., "covered_aus": [...], "intensity_labels": bool?}``."""
    with open(path) as fh:
        records = json.load(fh)
    out = {}
    for rec in records:
        cov = DatasetCoverage(
            dataset_id=rec["dataset_id"],
            covered_aus=frozenset(int(a) for a in rec["covered_aus"]),
            intensity_labels=bool(rec.get("intensity_labels", False)),
        )
        out[cov.dataset_id] = cov
    return out
