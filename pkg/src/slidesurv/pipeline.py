"""Stage orchestration with content-addressed manifests.

Every stage records a manifest: its parameters, the chain hashes of its
upstream stages, the hash of every file it read, and the hash of every file it
wrote. A stage re-run is a no-op when all of those still match; anything else
either re-runs cleanly or, if an upstream is missing or out of date, stops
with a stale-input error so stages cannot run out of order.

All outputs are written into a temporary directory and renamed into place,
manifest last, so an interrupted stage never masquerades as a finished one.
Randomness derives from the config's global seed hashed with the stage name;
any stage is reproducible in isolation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aggregation import aggregate_cohort, load_patient_features, save_patient_features
from .clustering import cluster_patches, save_embeddings, thumbnail_embed
from .config import PipelineConfig, section_params
from .data import ensure_dir, holdout_split, load_cohort, load_patches, save_patches
from .errors import ConfigError, DataError, NumericError, StaleInputError, UntrainableClusterError
from .network import SurvivalCnn, train_cluster_model
from .plots import emit_plots
from .sampling import crop, image_seed, load_image, sample_image, save_patch_png
from .selection import (ClusterReport, evaluate_cluster, extract_features,
                        load_patch_features, load_reports, save_patch_features,
                        save_reports, select_clusters)
from .survival import (DAYS_PER_YEAR, concordance_with_pairs, cross_validated_risks,
                       fit_lasso_cox, kaplan_meier, log_rank, median_risk_split,
                       time_dependent_roc)
from .synthetic import generate_cohort

log = logging.getLogger(__name__)

STAGES = ["synth", "sample", "cluster", "train", "select", "features",
          "aggregate", "survive", "report"]


def upstream_stages(stage: str, config: PipelineConfig) -> list[str]:
    dag = {
        "synth": [],
        "sample": ["synth"] if config.synth is not None else [],
        "cluster": ["sample"],
        "train": ["cluster"],
        "select": ["train"],
        "features": ["select"],
        "aggregate": ["features"],
        "survive": ["aggregate"],
        "report": ["survive", "select"],
    }
    return dag[stage]


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed: the global seed hashed with the stage name."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# manifests and freshness
# ---------------------------------------------------------------------------

def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve(config: PipelineConfig, relkey: str) -> Path:
    tag, rel = relkey.split(":", 1)
    if tag == "data":
        return config.data_root / rel
    if tag == "out":
        return config.output_root / rel
    raise ValueError(f"bad manifest path key: {relkey}")


def _manifest_path(config: PipelineConfig, stage: str) -> Path:
    return config.output_root / "manifests" / f"{stage}.json"


def _load_manifest(config: PipelineConfig, stage: str):
    path = _manifest_path(config, stage)
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StaleInputError(f"corrupt manifest for stage '{stage}': {exc}") from exc


def _stage_params(config: PipelineConfig, stage: str, seed: int) -> dict:
    params: dict = {"stage_seed": seed}
    if stage == "synth":
        params["synth"] = section_params(config, "synth")
    elif stage == "sample":
        params["sampler"] = section_params(config, "sampler")
    elif stage == "cluster":
        params["cluster"] = section_params(config, "cluster")
    elif stage == "train":
        params["network"] = section_params(config, "network")
        params["holdout_fraction"] = config.selection.holdout_fraction
    elif stage == "select":
        params["network"] = section_params(config, "network")
        params["threshold"] = config.selection.threshold
    elif stage == "features":
        params["network"] = section_params(config, "network")
        params["threshold"] = config.selection.threshold
    elif stage == "survive":
        params["survival"] = section_params(config, "survival")
    # Round-trip through JSON so values compare equal to a reloaded manifest
    # (tuples become lists, ints stay ints).
    return json.loads(_canon(params))


def _expected_header(config: PipelineConfig, stage: str, seed: int) -> dict:
    upstream = {}
    for up in upstream_stages(stage, config):
        manifest = _load_manifest(config, up)
        if manifest is None:
            raise StaleInputError(
                f"stage '{stage}' needs stage '{up}', which has not been run")
        upstream[up] = manifest["chain_hash"]
    return {"version": 1, "stage": stage,
            "params": _stage_params(config, stage, seed), "upstream": upstream}


def _chain_hash(header: dict, inputs: dict) -> str:
    return hashlib.sha256(
        _canon({**header, "inputs": inputs}).encode()).hexdigest()


def _seed_for(config: PipelineConfig, stage: str, override) -> int:
    return override if override is not None else stage_seed(config.seed, stage)


def is_fresh(config: PipelineConfig, stage: str, seed_override=None) -> bool:
    """True when the stage's manifest, inputs, and outputs all still match."""
    try:
        manifest = _load_manifest(config, stage)
        if manifest is None:
            return False
        header = _expected_header(config, stage, _seed_for(config, stage, seed_override))
    except StaleInputError:
        return False
    if any(manifest.get(k) != header[k] for k in header):
        return False
    for up in header["upstream"]:
        if not is_fresh(config, up):
            return False
    for relkey, digest in {**manifest["inputs"], **manifest["outputs"]}.items():
        path = _resolve(config, relkey)
        if not path.exists() or _sha256_file(path) != digest:
            return False
    return manifest.get("chain_hash") == _chain_hash(header, manifest["inputs"])


class _StageRun:
    """Scratch directory plus the input/output ledger for one stage run."""

    def __init__(self, config: PipelineConfig, stage: str):
        self.config = config
        self.stage = stage
        self.inputs: dict[str, str] = {}
        self.out_files: list[str] = []  # relative to the stage directory
        self.tmp = config.output_root / f".{stage}.tmp"
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        ensure_dir(self.tmp)

    def read(self, relkey: str) -> Path:
        path = _resolve(self.config, relkey)
        if not path.exists():
            raise StaleInputError(f"stage '{self.stage}': missing input {relkey}")
        if relkey not in self.inputs:
            self.inputs[relkey] = _sha256_file(path)
        return path

    def out(self, rel: str) -> Path:
        path = self.tmp / rel
        ensure_dir(path.parent)
        if rel not in self.out_files:
            self.out_files.append(rel)
        return path

    def write_json(self, rel: str, obj) -> None:
        self.out(rel).write_text(
            json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def commit(self) -> dict[str, str]:
        final = self.config.output_root / self.stage
        if final.exists():
            shutil.rmtree(final)
        os.replace(self.tmp, final)
        return {f"out:{self.stage}/{rel}": _sha256_file(final / rel)
                for rel in self.out_files}


# ---------------------------------------------------------------------------
# stage bodies
# ---------------------------------------------------------------------------

def _cohort_inputs(run: _StageRun):
    clinical = run.read("data:clinical.csv")
    images = run.read("data:images.csv")
    return load_cohort(clinical, images)


def _parallel_map(fn, items, jobs: int) -> list:
    """Order-preserving map, threaded when jobs > 1.

    Workers must be pure compute over their own state (each autodiff tape is
    thread-confined); callers do all file-ledger writes sequentially
    afterwards, so output bytes never depend on the worker count.
    """
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _run_synth(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    if config.synth is None:
        raise ConfigError("the synth stage needs a 'synth' section in the config")
    spec = dataclasses.replace(config.synth, seed=seed)
    tmp = config.data_root / ".synth.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    ensure_dir(tmp)
    cohort, _ = generate_cohort(spec, tmp)

    images_final = config.data_root / "images"
    if images_final.exists():
        shutil.rmtree(images_final)
    os.replace(tmp / "images", images_final)
    for name in ("clinical.csv", "images.csv"):
        os.replace(tmp / name, config.data_root / name)
    shutil.rmtree(tmp)

    outputs = {}
    for name in ("clinical.csv", "images.csv"):
        outputs[f"data:{name}"] = _sha256_file(config.data_root / name)
    for pid in cohort.patient_ids:
        for rel in cohort.images[pid]:
            outputs[f"data:{rel}"] = _sha256_file(config.data_root / rel)
    shutil.rmtree(run.tmp)  # synth writes under data_root, not the stage dir
    log.info("synth: %d patients, %d images", len(cohort),
             sum(len(v) for v in cohort.images.values()))
    return outputs


def _run_sample(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    cohort = _cohort_inputs(run)
    tasks = []
    for pid in cohort.patient_ids:
        for k, rel in enumerate(cohort.images[pid]):
            tasks.append((pid, k, rel, run.read(f"data:{rel}"), len(tasks)))

    def sample_one(task):
        pid, k, rel, path, image_index = task
        pixels = load_image(path)
        patches, diag = sample_image(
            pixels, config.sampler, pid, rel, id_prefix=f"{pid}_i{k}",
            seed=image_seed(seed, image_index))
        return patches, [crop(pixels, rec) for rec in patches], diag

    all_patches = []
    diagnostics = {}
    for (pid, k, rel, path, i), (patches, crops, diag) in zip(
            tasks, _parallel_map(sample_one, tasks, config.jobs)):
        for rec, pix in zip(patches, crops):
            save_patch_png(pix, run.out(f"patches/{rec.patch_id}.png"))
        all_patches.extend(patches)
        diagnostics[rel] = {"requested": diag.requested, "produced": diag.produced,
                            "draws": diag.draws, "rejected": diag.rejected}
    if not all_patches:
        raise DataError("sampling produced no patches; check background thresholds")
    save_patches(all_patches, run.out("patches.csv"))
    run.write_json("diagnostics.json", {
        "images": diagnostics, "total_patches": len(all_patches)})
    log.info("sample: %d patches from %d images", len(all_patches), len(tasks))
    return run.commit()


def _load_patch_pixels(run: _StageRun, patches) -> np.ndarray:
    return np.stack([load_image(run.read(f"out:sample/patches/{p.patch_id}.png"))
                     for p in patches])


def _run_cluster(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    patches = load_patches(run.read("out:sample/patches.csv"))
    embeddings = np.stack([
        thumbnail_embed(load_image(run.read(f"out:sample/patches/{p.patch_id}.png")),
                        config.cluster.thumb_side)
        for p in patches])
    save_embeddings(run.out("embeddings.bin"), embeddings)
    pca, km = cluster_patches(embeddings, p=config.cluster.p,
                              q=config.cluster.pca_dim, seed=seed)
    ad.save_tensors(run.out("pca.bin"), {
        "mean": pca.mean, "components": pca.components,
        "explained_variance": pca.explained_variance})
    ad.save_tensors(run.out("kmeans.bin"), {"centers": km.centers})
    with open(run.out("kmeans_trace.csv"), "w") as fh:
        fh.write("iteration,cost\n")
        for i, cost in enumerate(km.cost_trace):
            fh.write(f"{i},{repr(cost)}\n")
    clustered = [p.with_cluster(int(c)) for p, c in zip(patches, km.assignments)]
    save_patches(clustered, run.out("patches.csv"))
    sizes = np.bincount(km.assignments, minlength=config.cluster.p)
    log.info("cluster: sizes %s, final cost %.4f", sizes.tolist(), km.cost)
    return run.commit()


def _run_train(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    cohort = _cohort_inputs(run)
    rmap = cohort.record_map()
    patches = load_patches(run.read("out:cluster/patches.csv"))
    if any(p.cluster is None for p in patches):
        raise DataError("cluster stage output has unassigned patches")
    pixels = _load_patch_pixels(run, patches)

    def train_one(cid):
        idx = [i for i, p in enumerate(patches) if p.cluster == cid]
        pids = sorted({patches[i].patient_id for i in idx})
        seeds = np.random.SeedSequence([seed, cid]).generate_state(2)
        info: dict = {"patients": len(pids)}
        try:
            train_pids, test_pids = holdout_split(
                pids, config.selection.holdout_fraction, int(seeds[0]))
            train_set = set(train_pids)
            tr = [i for i in idx if patches[i].patient_id in train_set]
            te = [i for i in idx if patches[i].patient_id not in train_set]
            times = np.array([rmap[patches[i].patient_id].time for i in tr])
            events = np.array([rmap[patches[i].patient_id].event for i in tr])
            model, trace = train_cluster_model(pixels[tr], times, events,
                                               config.network, seed=int(seeds[1]))
        except (DataError, UntrainableClusterError) as exc:
            return None, None, {**info, "trained": False, "note": str(exc)}
        split = {**info, "trained": True,
                 "train_patients": train_pids, "test_patients": test_pids,
                 "n_train_patches": len(tr), "n_test_patches": len(te)}
        return model, trace, split

    cids = sorted({p.cluster for p in patches})
    splits: dict[str, dict] = {}
    trained = 0
    for cid, (model, trace, split) in zip(
            cids, _parallel_map(train_one, cids, config.jobs)):
        splits[str(cid)] = split
        if model is None:
            log.warning("train: cluster %d skipped: %s", cid, split["note"])
            continue
        model.save(run.out(f"dcas_cluster_{cid}.bin"))
        with open(run.out(f"train_trace_cluster_{cid}.csv"), "w") as fh:
            fh.write("epoch,loss,lr\n")
            for epoch, loss, lr in trace:
                fh.write(f"{epoch},{repr(loss)},{repr(lr)}\n")
        trained += 1
        log.info("train: cluster %d done (%d train patches, final loss %.4f)",
                 cid, split["n_train_patches"], trace[-1][1])
    run.write_json("cluster_splits.json", splits)
    if trained == 0:
        log.warning("train: no cluster was trainable")
    return run.commit()


def _run_select(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    cohort = _cohort_inputs(run)
    rmap = cohort.record_map()
    patches = load_patches(run.read("out:cluster/patches.csv"))
    splits = json.loads(run.read("out:train/cluster_splits.json").read_text())
    reports = []
    for key in sorted(splits, key=int):
        cid = int(key)
        info = splits[key]
        if not info.get("trained"):
            reports.append(ClusterReport(cid, 0, 0, float("nan"), False))
            continue
        model = SurvivalCnn.load(run.read(f"out:train/dcas_cluster_{cid}.bin"),
                                 config.network)
        test_set = set(info["test_patients"])
        te = [p for p in patches
              if p.cluster == cid and p.patient_id in test_set]
        te_pixels = _load_patch_pixels(run, te)
        te_records = [rmap[p.patient_id] for p in te]
        reports.append(evaluate_cluster(
            model, te_pixels, te_records, cluster_id=cid,
            n_train=info["n_train_patches"],
            threshold=config.selection.threshold))
    chosen = select_clusters(reports, config.selection.threshold)
    save_reports(run.out("cluster_reports.csv"), reports)
    log.info("select: kept clusters %s of %d", chosen, len(reports))
    return run.commit()


def _run_features(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    reports = load_reports(run.read("out:select/cluster_reports.csv"))
    selected = select_clusters(reports, config.selection.threshold)
    models = {cid: SurvivalCnn.load(run.read(f"out:train/dcas_cluster_{cid}.bin"),
                                    config.network)
              for cid in selected}
    patches = load_patches(run.read("out:cluster/patches.csv"))
    keep = [p for p in patches if p.cluster in models]
    pixels = _load_patch_pixels(run, keep)
    features = extract_features(models, keep, pixels)
    save_patch_features(run.out("patch_features.bin"),
                        run.out("patch_features.csv"), features)
    log.info("features: %d vectors from clusters %s", len(features), selected)
    return run.commit()


def _run_aggregate(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    cohort = _cohort_inputs(run)
    features = load_patch_features(run.read("out:features/patch_features.bin"),
                                   run.read("out:features/patch_features.csv"))
    rows, uncovered = aggregate_cohort(features, cohort.patient_ids)
    if uncovered:
        log.warning("aggregate: %d patients have no patch in any selected "
                    "cluster: %s", len(uncovered), uncovered)
    save_patient_features(run.out("patient_features.csv"), rows)
    run.write_json("uncovered.json", {"uncovered": uncovered})
    log.info("aggregate: %d patients covered", len(rows))
    return run.commit()


def _horizon_label(years: float) -> str:
    return str(int(years)) if years == int(years) else str(years)


def _write_km_csv(path: Path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("time,survival\n")
        for t, s in zip(curve.times, curve.survival):
            fh.write(f"{repr(float(t))},{repr(float(s))}\n")


def _run_survive(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    cohort = _cohort_inputs(run)
    rows = load_patient_features(run.read("out:aggregate/patient_features.csv"))
    rmap = cohort.record_map()
    records = [rmap[r.patient_id] for r in rows]
    X = np.stack([r.vector for r in rows])
    folds = config.survival.folds
    fit = fit_lasso_cox(X, records, folds=folds, seed=seed,
                        lambda_count=config.survival.lambda_count,
                        lambda_min_ratio=config.survival.lambda_min_ratio)
    risks, assign = cross_validated_risks(X, records, fit.chosen_lambda,
                                          fit.lambda_path, folds, seed)

    per_fold = []
    for f in range(folds):
        members = np.flatnonzero(assign == f)
        c, pairs = concordance_with_pairs(risks[members],
                                          [records[i] for i in members])
        per_fold.append(c if pairs else float("nan"))
    valid = [c for c in per_fold if not math.isnan(c)]
    pooled, pooled_pairs = concordance_with_pairs(risks, records)
    if not pooled_pairs:
        raise NumericError("no comparable patient pairs in the cohort")

    with open(run.out("risks.csv"), "w") as fh:
        fh.write("patient_id,risk,fold\n")
        for r, risk, f in zip(rows, risks, assign):
            fh.write(f"{r.patient_id},{repr(float(risk))},{int(f)}\n")

    high, low = median_risk_split(risks, records)
    group_sizes = {"high": len(high), "low": len(low)}
    log_rank_chi = log_rank_p = None
    if high and low:
        high_recs = [records[i] for i in high]
        low_recs = [records[i] for i in low]
        _write_km_csv(run.out("km_high.csv"), kaplan_meier(high_recs))
        _write_km_csv(run.out("km_low.csv"), kaplan_meier(low_recs))
        log_rank_chi, log_rank_p = log_rank(high_recs, low_recs)
    else:
        log.warning("survive: degenerate risk split %s; skipping the "
                    "group comparison", group_sizes)

    aucs = {}
    for years in config.survival.horizons_years:
        label = _horizon_label(years)
        try:
            curve, auc = time_dependent_roc(risks, records, years * DAYS_PER_YEAR)
        except NumericError as exc:
            log.warning("survive: ROC at %s years skipped: %s", label, exc)
            aucs[label] = None
            continue
        aucs[label] = auc
        with open(run.out(f"roc_{label}.csv"), "w") as fh:
            fh.write("threshold,fpr,tpr\n")
            for thr, fpr, tpr in curve:
                fh.write(f"{repr(float(thr))},{repr(float(fpr))},{repr(float(tpr))}\n")

    nonzero = {f"f{j}": float(c) for j, c in enumerate(fit.coefficients)
               if c != 0.0}
    report = {
        "n_patients": len(cohort), "n_covered": len(rows),
        "n_events": int(sum(r.event for r in records)),
        "folds": folds,
        "cindex_per_fold": [None if math.isnan(c) else c for c in per_fold],
        "cindex_mean": float(np.mean(valid)) if valid else None,
        "cindex_sd": float(np.std(valid, ddof=1)) if len(valid) > 1 else None,
        "cindex_pooled": pooled,
        "chosen_lambda": fit.chosen_lambda,
        "nonzero_coefficients": nonzero,
        "converged": fit.converged,
        "log_rank_chi2": log_rank_chi,
        "log_rank_p": log_rank_p,
        "risk_groups": group_sizes,
        "auc": aucs,
    }
    run.write_json("survival_report.json", report)
    log.info("survive: pooled C-index %.3f, lambda %.5f, %d nonzero",
             pooled, fit.chosen_lambda, len(nonzero))
    return run.commit()


def _run_report(config: PipelineConfig, seed: int, run: _StageRun) -> dict:
    srv = config.output_root / "survive"
    inputs = [p.name for p in sorted(srv.glob("km_*.csv"))]
    inputs += [p.name for p in sorted(srv.glob("roc_*.csv"))]
    for name in inputs:
        run.read(f"out:survive/{name}")
    run.read("out:select/cluster_reports.csv")
    written = emit_plots(config.output_root, run.tmp,
                         threshold=config.selection.threshold)
    for rel in written:
        run.out(rel)  # already on disk; register for the manifest
    log.info("report: wrote %s", written)
    return run.commit()


_RUNNERS = {
    "synth": _run_synth, "sample": _run_sample, "cluster": _run_cluster,
    "train": _run_train, "select": _run_select, "features": _run_features,
    "aggregate": _run_aggregate, "survive": _run_survive, "report": _run_report,
}


def run_stage(stage: str, config: PipelineConfig, seed_override=None) -> str:
    """Run one stage; returns "ran" or "skipped" (already up to date)."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}' (choose from {STAGES})")
    config.validate()
    ensure_dir(config.output_root / "manifests")
    ensure_dir(config.data_root)
    if is_fresh(config, stage, seed_override):
        log.info("%s: up to date", stage)
        return "skipped"
    for up in upstream_stages(stage, config):
        if not is_fresh(config, up):
            raise StaleInputError(
                f"stage '{stage}' needs stage '{up}' to be re-run first "
                "(missing, stale, or modified on disk)")
    seed = _seed_for(config, stage, seed_override)
    header = _expected_header(config, stage, seed)
    run = _StageRun(config, stage)
    try:
        outputs = _RUNNERS[stage](config, seed, run)
    except Exception:
        if run.tmp.exists():
            shutil.rmtree(run.tmp)
        raise
    manifest = {**header, "inputs": run.inputs, "outputs": outputs,
                "chain_hash": _chain_hash(header, run.inputs)}
    path = _manifest_path(config, stage)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)
    return "ran"


def run_all(config: PipelineConfig, seed_override=None) -> dict[str, str]:
    """Run every stage in order; synth is skipped without a synth section."""
    statuses = {}
    for stage in STAGES:
        if stage == "synth" and config.synth is None:
            continue
        statuses[stage] = run_stage(stage, config, seed_override)
    return statuses
