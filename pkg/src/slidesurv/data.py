"""Survival records, image manifests, patch manifests, and fold splits.

CSV schemas:
    clinical.csv        patient_id,time,event        (event 0/1, time days)
    images.csv          patient_id,image_path
    patch manifest      patch_id,patient_id,image_path,x,y,side,cluster
                        (cluster empty until assigned)

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: bool


@dataclass(frozen=True)
class Cohort:
    """Patient survival records plus the patient -> slide images mapping."""

    records: tuple[SurvivalRecord, ...]
    images: dict[str, tuple[str, ...]]

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient_id in cohort records")
        unknown = set(self.images) - set(ids)
        if unknown:
            raise DataError(f"images reference unknown patients: {sorted(unknown)}")

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def record_map(self) -> dict[str, SurvivalRecord]:
        return {r.patient_id: r for r in self.records}

    def subset(self, patient_ids) -> "Cohort":
        keep = set(patient_ids)
        return Cohort(
            records=tuple(r for r in self.records if r.patient_id in keep),
            images={p: v for p, v in self.images.items() if p in keep},
        )

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PatchRecord:
    """One sampled patch; (x, y) is the top-left corner in pixels."""

    patch_id: str
    patient_id: str
    image_path: str
    x: int
    y: int
    side: int
    cluster: int | None = None

    def with_cluster(self, cluster: int) -> "PatchRecord":
        return replace(self, cluster=cluster)


def _parse_time(raw: str, row: int):
    try:
        t = float(raw)
    except ValueError:
        raise DataError(f"clinical row {row}: time {raw!r} is not a number") from None
    if not math.isfinite(t) or t < 0:
        raise DataError(f"clinical row {row}: time must be finite and >= 0, got {raw!r}")
    return t


def _parse_event(raw: str, row: int) -> bool:
    if raw not in ("0", "1"):
        raise DataError(f"clinical row {row}: event must be 0 or 1, got {raw!r}")
    return raw == "1"


def load_cohort(clinical_path, images_path) -> Cohort:
    """Read and validate the two cohort CSVs; errors name the offending row."""
    records = []
    seen: set[str] = set()
    with open(clinical_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["patient_id", "time", "event"]:
            raise DataError(f"{clinical_path}: expected header patient_id,time,event, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"clinical row {row_no}: expected 3 fields, got {len(row)}")
            pid, t_raw, e_raw = row
            if not pid:
                raise DataError(f"clinical row {row_no}: empty patient_id")
            if pid in seen:
                raise DataError(f"clinical row {row_no}: duplicate patient_id {pid!r}")
            seen.add(pid)
            records.append(SurvivalRecord(pid, _parse_time(t_raw, row_no), _parse_event(e_raw, row_no)))

    images: dict[str, list[str]] = {}
    with open(images_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["patient_id", "image_path"]:
            raise DataError(f"{images_path}: expected header patient_id,image_path, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"images row {row_no}: expected 2 fields, got {len(row)}")
            pid, path = row
            if pid not in seen:
                raise DataError(f"images row {row_no}: unknown patient {pid!r}")
            if not path:
                raise DataError(f"images row {row_no}: empty image_path")
            images.setdefault(pid, []).append(path)

    return Cohort(records=tuple(records), images={p: tuple(v) for p, v in images.items()})


def save_cohort(cohort: Cohort, clinical_path, images_path) -> None:
    with open(clinical_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient_id", "time", "event"])
        for r in cohort.records:
            w.writerow([r.patient_id, repr(r.time), int(r.event)])
    with open(images_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient_id", "image_path"])
        for pid in cohort.patient_ids:
            for path in cohort.images.get(pid, ()):
                w.writerow([pid, path])


PATCH_HEADER = ["patch_id", "patient_id", "image_path", "x", "y", "side", "cluster"]


def save_patches(patches: list[PatchRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PATCH_HEADER)
        for p in patches:
            w.writerow([p.patch_id, p.patient_id, p.image_path, p.x, p.y, p.side,
                        "" if p.cluster is None else p.cluster])


def load_patches(path) -> list[PatchRecord]:
    out = []
    seen: set[str] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != PATCH_HEADER:
            raise DataError(f"{path}: expected header {','.join(PATCH_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise DataError(f"patch row {row_no}: expected 7 fields, got {len(row)}")
            patch_id, pid, image_path, x, y, side, cluster = row
            if patch_id in seen:
                raise DataError(f"patch row {row_no}: duplicate patch_id {patch_id!r}")
            seen.add(patch_id)
            try:
                xi, yi, si = int(x), int(y), int(side)
                ci = None if cluster == "" else int(cluster)
            except ValueError:
                raise DataError(f"patch row {row_no}: non-integer geometry or cluster") from None
            if xi < 0 or yi < 0 or si <= 0 or (ci is not None and ci < 0):
                raise DataError(f"patch row {row_no}: negative geometry or cluster")
            out.append(PatchRecord(patch_id, pid, image_path, xi, yi, si, ci))
    return out


def split_k_fold(cohort: Cohort, k: int, seed: int) -> list[tuple[Cohort, Cohort]]:
    """Patient-level k-fold: shuffled ids dealt round-robin into folds.

    Returns (train, test) cohort pairs; fold sizes differ by at most one and
    every patient appears in exactly one test fold. No patient's records ever
    sit on both sides of a split.
    """
    n = len(cohort)
    if k < 2 or k > n:
        raise DataError(f"k must be in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    ids = list(cohort.patient_ids)
    order = rng.permutation(n)
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    pairs = []
    for i in range(k):
        test_ids = set(folds[i])
        train_ids = [p for p in ids if p not in test_ids]
        pairs.append((cohort.subset(train_ids), cohort.subset(folds[i])))
    return pairs


def holdout_split(patient_ids: list[str], holdout_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Patient-level train/held-out split (at least one patient on each side)."""
    n = len(patient_ids)
    if n < 2:
        raise DataError("need at least 2 patients to split")
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_hold = min(max(int(round(n * holdout_fraction)), 1), n - 1)
    held = sorted(patient_ids[i] for i in order[:n_hold])
    train = sorted(patient_ids[i] for i in order[n_hold:])
    return train, held


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
