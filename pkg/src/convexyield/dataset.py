"""Specimen table, the nine published train/validation/test splits, and CSV I/O."""

import csv
import hashlib
import io
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .stress import PLANES, specimen_rotation, uniaxial_stress

HEADER = ("id", "plane", "angle_deg", "sigma_mpa", "r")
BUNDLED = "al7079_specimens.csv"
N_SPECIMENS = 12

# (train, validation, test) ids for splits 1..9
SPLITS = (
    ((1, 2, 3, 5, 6, 7, 9, 12), (4, 8), (10, 11)),
    ((1, 2, 4, 6, 7, 8, 10, 11), (9, 12), (3, 5)),
    ((1, 2, 4, 7, 8, 10, 11, 12), (5, 9), (3, 6)),
    ((1, 3, 4, 5, 7, 8, 9, 11), (2, 10), (6, 12)),
    ((2, 4, 5, 6, 7, 8, 9, 12), (1, 11), (3, 10)),
    ((1, 2, 5, 6, 8, 9, 10, 12), (3, 7), (4, 11)),
    ((2, 3, 4, 6, 7, 9, 11, 12), (1, 10), (5, 8)),
    ((1, 2, 4, 5, 7, 9, 10, 11), (3, 6), (8, 12)),
    ((3, 4, 5, 6, 8, 9, 10, 12), (1, 7), (2, 11)),
)


class DatasetError(ValueError):
    """Malformed specimen file; the message carries the offending line."""


@dataclass(frozen=True)
class Specimen:
    id: int
    plane: str
    angle_deg: float
    sigma_c: float
    r_c: float

    @property
    def angle(self):
        return np.deg2rad(self.angle_deg)

    @property
    def rotation(self):
        return specimen_rotation(self.plane, self.angle)


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple

    def ids(self, which):
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[which]


def bundled_text():
    return resources.files("convexyield.data").joinpath(BUNDLED).read_text(encoding="utf-8")


def bundled_checksum():
    return resources.files("convexyield.data").joinpath("al7079_specimens.sha256").read_text().strip()


def checksum(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_specimens(text, source="<string>", expected=N_SPECIMENS):
    """Parse specimen CSV text, validating every record."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
        raise DatasetError(f"{source}:1: header must be {','.join(HEADER)}")
    out, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            raise DatasetError(f"{source}:{lineno}: expected {len(HEADER)} columns, got {len(row)}")
        sid, plane, ang, sig, r = (c.strip() for c in row)
        try:
            sid = int(sid)
            ang, sig, r = float(ang), float(sig), float(r)
        except ValueError:
            raise DatasetError(f"{source}:{lineno}: non-numeric field in {row}") from None
        if plane.upper() not in PLANES:
            raise DatasetError(f"{source}:{lineno}: unknown plane {plane!r}")
        if not (sig > 0 and r > 0 and np.isfinite(ang)):
            raise DatasetError(f"{source}:{lineno}: sigma and r must be positive")
        if sid in seen:
            raise DatasetError(f"{source}:{lineno}: duplicate specimen id {sid}")
        seen.add(sid)
        out.append(Specimen(sid, plane.upper(), ang, sig, r))
    if expected is not None and len(out) != expected:
        raise DatasetError(
            f"{source}: expected {expected} specimens, found {len(out)} "
            f"({expected - len(out):+d} missing)" if len(out) < expected
            else f"{source}: expected {expected} specimens, found {len(out)}"
        )
    return sorted(out, key=lambda s: s.id)


def load_specimens(path=None, expected=N_SPECIMENS):
    """Load specimens from ``path``, ``$CONVEXYIELD_DATASET`` or the bundled table."""
    path = path or os.environ.get("CONVEXYIELD_DATASET")
    if path is None:
        return parse_specimens(bundled_text(), BUNDLED, expected)
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_specimens(fh.read(), str(path), expected)


def dataset_checksum(path=None):
    path = path or os.environ.get("CONVEXYIELD_DATASET")
    if path is None:
        return checksum(bundled_text())
    with open(path, encoding="utf-8", newline="") as fh:
        return checksum(fh.read())


def format_specimens(specimens):
    lines = [",".join(HEADER)]
    for s in specimens:
        lines.append(f"{s.id},{s.plane},{s.angle_deg:.17g},{s.sigma_c:.17g},{s.r_c:.17g}")
    return "\n".join(lines) + "\n"


def write_specimens(specimens, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_specimens(specimens))


def split(k):
    """The k-th (1-based) published train/validation/test assignment."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= len(SPLITS):
        raise ValueError(f"split index must be an integer in 1..{len(SPLITS)}, got {k!r}")
    return SplitSpec(*SPLITS[k - 1])


def full_split(specimens):
    """Every specimen in training, nothing held out."""
    return SplitSpec(tuple(s.id for s in specimens), (), ())


def select(specimens, ids):
    by_id = {s.id: s for s in specimens}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"specimen ids not in dataset: {missing}")
    return [by_id[i] for i in ids]


def specimen_stress(s, magnitude=None):
    """Voigt stress of the uniaxial test on specimen ``s`` (default: its yield stress)."""
    mag = s.sigma_c if magnitude is None else magnitude
    return uniaxial_stress(s.rotation, mag)
