"""Held-out evaluation of cluster models, cluster selection, and patch features.

Each cluster's model is scored by the concordance of its patch-level risks on
that cluster's held-out patches. Clusters at or above the threshold survive;
their models then embed every patch of the cluster (train and test alike) into
a 32-d feature vector read off the last fully connected layer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .clustering import load_embeddings, save_embeddings
from .data import PatchRecord
from .errors import DataError, SelectionError
from .survival import concordance_with_pairs

REPORT_HEADER = ["cluster_id", "n_train", "n_test", "test_cindex", "selected"]
DEFAULT_THRESHOLD = 0.55


@dataclass(frozen=True)
class ClusterReport:
    cluster_id: int
    n_train: int
    n_test: int
    test_cindex: float  # nan when the held-out set has under 2 comparable pairs
    selected: bool


@dataclass(frozen=True)
class PatchFeature:
    patch_id: str
    patient_id: str
    cluster_id: int
    vector: np.ndarray


def evaluate_cluster(model, test_pixels, records, cluster_id: int,
                     n_train: int, threshold: float = DEFAULT_THRESHOLD,
                     ) -> ClusterReport:
    """Score one cluster model on its held-out patches.

    ``records`` aligns with ``test_pixels`` row for row (each patch carries its
    patient's survival record). A held-out set with fewer than 2 comparable
    pairs is unevaluable: the report carries nan and is never selected.
    """
    n_test = len(test_pixels)
    if n_test != len(records):
        raise DataError(f"cluster {cluster_id}: {n_test} patches vs "
                        f"{len(records)} records")
    if n_test == 0:
        return ClusterReport(cluster_id, n_train, 0, float("nan"), False)
    risks, _ = model.infer(test_pixels)
    cindex, pairs = concordance_with_pairs(risks, records)
    if pairs < 2:
        return ClusterReport(cluster_id, n_train, n_test, float("nan"), False)
    return ClusterReport(cluster_id, n_train, n_test, cindex,
                         bool(cindex >= threshold))


def select_clusters(reports, threshold: float = DEFAULT_THRESHOLD) -> list[int]:
    """Ascending ids of clusters whose held-out concordance reaches the
    threshold. Unevaluable reports (nan) never qualify."""
    chosen = sorted(r.cluster_id for r in reports
                    if not math.isnan(r.test_cindex) and r.test_cindex >= threshold)
    if not chosen:
        scores = {r.cluster_id: r.test_cindex for r in reports}
        raise SelectionError(
            f"no cluster reached concordance {threshold} (scores: {scores}); "
            "lower selection.threshold or revisit clustering")
    return chosen


def extract_features(models: dict, patches: list[PatchRecord],
                     pixels: np.ndarray, batch_size: int = 64,
                     ) -> list[PatchFeature]:
    """Embed every patch belonging to a selected cluster.

    ``models`` maps selected cluster id to its trained model; ``patches`` and
    ``pixels`` align row for row and may span all clusters. Patches of
    unselected clusters are skipped. Output is grouped by ascending cluster id,
    input order within a cluster.
    """
    if len(patches) != len(pixels):
        raise DataError(f"{len(patches)} patch records vs {len(pixels)} pixel rows")
    out: list[PatchFeature] = []
    for cid in sorted(models):
        rows = [i for i, p in enumerate(patches) if p.cluster == cid]
        if not rows:
            continue
        _, feats = models[cid].infer(pixels[rows], batch_size=batch_size)
        for i, vec in zip(rows, feats):
            out.append(PatchFeature(patch_id=patches[i].patch_id,
                                    patient_id=patches[i].patient_id,
                                    cluster_id=cid, vector=vec))
    return out


# ---------------------------------------------------------------------------
# on-disk forms
# ---------------------------------------------------------------------------

def save_reports(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for r in sorted(reports, key=lambda r: r.cluster_id):
            writer.writerow([r.cluster_id, r.n_train, r.n_test,
                             repr(r.test_cindex), int(r.selected)])


def load_reports(path) -> list[ClusterReport]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != REPORT_HEADER:
        raise DataError(f"{path}: expected header {','.join(REPORT_HEADER)}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise DataError(f"{path} line {i}: expected 5 fields")
        out.append(ClusterReport(cluster_id=int(row[0]), n_train=int(row[1]),
                                 n_test=int(row[2]), test_cindex=float(row[3]),
                                 selected=bool(int(row[4]))))
    return out


def save_patch_features(matrix_path, index_path, features) -> None:
    """Feature matrix as the binary embedding format plus a CSV row index."""
    if not features:
        raise DataError("no patch features to save")
    matrix = np.stack([f.vector for f in features])
    save_embeddings(matrix_path, matrix)
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "patient_id", "cluster_id", "row"])
        for row, f in enumerate(features):
            writer.writerow([f.patch_id, f.patient_id, f.cluster_id, row])


def load_patch_features(matrix_path, index_path) -> list[PatchFeature]:
    matrix = load_embeddings(matrix_path)
    with open(index_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["patch_id", "patient_id", "cluster_id", "row"]:
        raise DataError(f"{index_path}: bad feature index header")
    if len(rows) - 1 != matrix.shape[0]:
        raise DataError(f"{index_path}: {len(rows) - 1} index rows for "
                        f"{matrix.shape[0]} matrix rows")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if int(row[3]) != i - 2:
            raise DataError(f"{index_path} line {i}: rows must be sequential")
        out.append(PatchFeature(patch_id=row[0], patient_id=row[1],
                                cluster_id=int(row[2]), vector=matrix[i - 2]))
    return out
