"""Patient-level features: weighted nested means over patch vectors.

A patient's weight grows with the number of selected clusters their patches
cover: w_i = n_i / (n_h - n_l) where n_h and n_l are the highest and lowest
coverage counts in the cohort (all weights 1 when every patient covers the
same number). The patient vector averages patches within each covered cluster
first, then averages those cluster means, then scales by the weight, so a
cluster with many patches counts no more than a cluster with one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class PatientFeature:
    patient_id: str
    n_clusters_covered: int
    weight: float
    vector: np.ndarray


def cluster_coverage(features, patient_ids=None):
    """Map each patient to the set of cluster ids their patches reach.

    ``patient_ids``, when given, is the full cohort; patients with no patch in
    any selected cluster come back in the second (uncovered) list, input order.
    """
    coverage: dict[str, set[int]] = {}
    for f in features:
        coverage.setdefault(f.patient_id, set()).add(f.cluster_id)
    if patient_ids is None:
        return coverage, []
    unknown = set(coverage) - set(patient_ids)
    if unknown:
        raise DataError(f"features reference patients outside the cohort: "
                        f"{sorted(unknown)}")
    uncovered = [pid for pid in patient_ids if pid not in coverage]
    return coverage, uncovered


def compute_weights(coverage: dict) -> dict:
    """Coverage-count weights n_i / (n_h - n_l), or all 1 when the counts are
    uniform (the formula's denominator vanishes)."""
    if not coverage:
        raise DataError("empty coverage map")
    counts = {pid: len(cids) for pid, cids in coverage.items()}
    n_h = max(counts.values())
    n_l = min(counts.values())
    if n_h == n_l:
        return {pid: 1.0 for pid in counts}
    return {pid: n / (n_h - n_l) for pid, n in counts.items()}


def patient_feature(features, weight: float) -> PatientFeature:
    """Nested mean of one patient's patch vectors, scaled by their weight.

    Patches are averaged within each cluster, the cluster means are averaged
    in ascending cluster-id order, and the result is multiplied by ``weight``.
    """
    if not features:
        raise DataError("patient has no patch features in selected clusters")
    pids = {f.patient_id for f in features}
    if len(pids) != 1:
        raise DataError(f"features span multiple patients: {sorted(pids)}")
    by_cluster: dict[int, list[np.ndarray]] = {}
    for f in features:
        by_cluster.setdefault(f.cluster_id, []).append(f.vector)
    means = [np.stack(vecs).mean(axis=0) for _, vecs in sorted(by_cluster.items())]
    vector = weight * np.stack(means).mean(axis=0)
    return PatientFeature(patient_id=pids.pop(),
                          n_clusters_covered=len(by_cluster),
                          weight=float(weight), vector=vector)


def aggregate_cohort(features, patient_ids):
    """All patient features plus the uncovered-patient list, cohort order."""
    coverage, uncovered = cluster_coverage(features, patient_ids)
    weights = compute_weights(coverage)
    by_patient: dict[str, list] = {}
    for f in features:
        by_patient.setdefault(f.patient_id, []).append(f)
    out = [patient_feature(by_patient[pid], weights[pid])
           for pid in patient_ids if pid in coverage]
    return out, uncovered


# ---------------------------------------------------------------------------
# on-disk form: patient_id,n_clusters,weight,f0..f31
# ---------------------------------------------------------------------------

def save_patient_features(path, rows: list) -> None:
    if not rows:
        raise DataError("no patient features to save")
    dim = rows[0].vector.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "n_clusters", "weight"]
                        + [f"f{j}" for j in range(dim)])
        for r in rows:
            writer.writerow([r.patient_id, r.n_clusters_covered, repr(r.weight)]
                            + [repr(float(v)) for v in r.vector])


def load_patient_features(path) -> list[PatientFeature]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["patient_id", "n_clusters", "weight"]:
        raise DataError(f"{path}: bad patient feature header")
    dim = len(rows[0]) - 3
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 3:
            raise DataError(f"{path} line {i}: expected {dim + 3} fields")
        out.append(PatientFeature(
            patient_id=row[0], n_clusters_covered=int(row[1]),
            weight=float(row[2]),
            vector=np.array([float(v) for v in row[3:]], dtype=np.float64)))
    return out
