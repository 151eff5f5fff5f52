"""Command-line entry point: ``volmask <subcommand> --config FILE [--set key=value ...]``.

Each invocation writes one run directory::

    <run>/resolved.cfg    every key with its effective value
    <run>/summary.json    machine-readable outcome
    <run>/checkpoints/ masks/ logs/ reports/

The run directory is ``--run-dir`` if given, else a fresh directory under
``$VOLMASK_RUN_ROOT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .dataio import (
    CheckpointError,
    CohortManifest,
    ManifestError,
    NiftiError,
    generate_synthetic_cohort,
    load_session_volumes,
    load_volume,
    parse_manifest,
    render_slices,
    save_volume,
)
from .jobs import job_rng, parallel_map
from .masker import (
    MaskDivergenceError,
    MaskError,
    loss_outlier_flags,
    optimize_group_mask,
    optimize_session_mask,
    quality_check_stage1,
    grid_search_masks,
    target_probability,
)
from .metrics import MaskContext, intra_inter_subject, pairwise_report, roi_density_vector, roi_similarity, write_report
from .network import ArchitectureError, load_checkpoint, predict, save_checkpoint
from .trainer import (
    TRAIN_LOG_COLUMNS,
    CohortData,
    SplitError,
    cv_table,
    fold_rows,
    make_split,
    random_search,
    run_cv,
    write_log,
)

logger = logging.getLogger("volmask")

RUN_ROOT_ENV = "VOLMASK_RUN_ROOT"
RESOLVED_NAME = "resolved.cfg"
SUBDIRS = ("checkpoints", "masks", "logs", "reports")

COMMANDS = {
    "synth": ("generate a synthetic cohort, atlas and manifest", ("run", "synth")),
    "qc": ("quality check of every manifest volume", ("run", "data")),
    "train": ("train one model per (fold, run); folds default to fold 0", ("run", "data", "arch", "train", "split")),
    "cv": ("cross-validation over all (or split.folds) folds", ("run", "data", "arch", "train", "split")),
    "random-search": ("random architecture/optimizer search on fold 0", ("run", "data", "train", "split", "search")),
    "mask-group": ("one group mask per trained (fold, run)", ("run", "mask", "split")),
    "mask-session": ("one mask per session of each selected AD subject", ("run", "mask", "split")),
    "grid-search": ("group masks over a regularization grid", ("run", "data", "mask", "grid", "split")),
    "compare": ("pairwise ROI similarity and prob_CNN between masks", ("run", "data", "compare")),
    "render": ("slice montage of a volume with an optional mask", ("render",)),
}


class RunError(RuntimeError):
    """A job failed in a way that makes the run's outputs incomplete."""


# --- run directory -------------------------------------------------------------


def make_run_dir(command: str, run_dir: str | None) -> Path:
    if run_dir:
        path = Path(run_dir)
        if path.exists() and any(path.iterdir()):
            raise C.ConfigError(f"run directory {path} exists and is not empty")
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = root / f"{command}-{stamp}"
        k = 1
        while path.exists():
            path = root / f"{command}-{stamp}-{k}"
            k += 1
    path.mkdir(parents=True, exist_ok=True)
    for sub in SUBDIRS:
        (path / sub).mkdir(exist_ok=True)
    return path


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_summary(run: Path, summary: dict) -> None:
    _atomic_text(run / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(type(v))


def _save_mask(mask: np.ndarray, path: Path) -> None:
    save_volume(mask, path, datatype=16)


# --- shared loading ------------------------------------------------------------


def _manifest(cfg) -> CohortManifest:
    if not cfg["data.manifest"]:
        raise C.ConfigError("data.manifest is required")
    return parse_manifest(cfg["data.manifest"])


def _cohort(cfg) -> CohortData:
    manifest = _manifest(cfg)
    return CohortData(manifest, load_session_volumes(manifest))


def _plan(cfg, manifest):
    return make_split(manifest, cfg["split.n_folds"], cfg["split.n_test_per_class"], cfg["split.seed"])


def _training_config(train_dir: Path) -> dict:
    """The resolved config of a train/cv run; its data and split keys define the images."""
    path = train_dir / RESOLVED_NAME
    if not path.is_file():
        raise C.ConfigError(f"{train_dir} is not a run directory (missing {RESOLVED_NAME})")
    return C.parse_assignments(path.read_text().splitlines(), str(path))


def _checkpoints(train_dir: Path, folds=()) -> list[tuple[int, int, Path]]:
    """(fold, run, path) of every checkpoint in a train/cv run, optionally restricted to ``folds``."""
    found = []
    for p in (train_dir / "checkpoints").glob("fold*_run*.ckpt"):
        m = re.fullmatch(r"fold(\d+)_run(\d+)", p.stem)
        if m and (not folds or int(m[1]) in folds):
            found.append((int(m[1]), int(m[2]), p))
    if not found:
        raise C.ConfigError(f"no checkpoint for folds {list(folds) or 'any'} in {train_dir}")
    return sorted(found)


def _atlas_path(cfg, manifest_path: str) -> Path:
    return Path(cfg["data.atlas"] or Path(manifest_path).parent / "atlas.nii.gz")


def _atlas(cfg, manifest_path: str) -> np.ndarray:
    path = _atlas_path(cfg, manifest_path)
    if not path.is_file():
        raise C.ConfigError(f"atlas {path} not found; set data.atlas")
    return np.rint(load_volume(path)).astype(np.int64)


def _correct(net, X, target: int):
    """Indices of images the network assigns to ``target``."""
    keep = []
    for start in range(0, len(X), 16):
        pred = predict(net, X[start:start + 16])
        keep.extend((start + np.flatnonzero(pred == target)).tolist())
    return np.array(keep, dtype=np.int64)


# --- subcommands ---------------------------------------------------------------


def cmd_synth(cfg, run: Path, jobs: int) -> dict:
    spec = C.synthetic_spec(cfg)
    cohort = generate_synthetic_cohort(spec, run / "data")
    return {
        "manifest": "data/manifest.tsv",
        "atlas": "data/atlas.nii.gz",
        "n_volumes": len(cohort.manifest),
        "n_subjects": len(cohort.manifest.subjects()),
        "atrophy_labels": list(cohort.atrophy_labels),
        "atrophy_fraction": float(cohort.atrophy_mask.mean()),
    }


def cmd_qc(cfg, run: Path, jobs: int) -> dict:
    manifest = _manifest(cfg)
    ids = [f"{r.participant_id}_{r.session_id}" for r in manifest.rows]
    report = quality_check_stage1(load_session_volumes(manifest), ids)
    rows = [{"id": i, "max_value": mx, "status": "kept", "reason": ""} for i, mx in report.kept]
    rows += [{"id": i, "max_value": mx, "status": "rejected", "reason": why} for i, mx, why in report.rejected]
    rows.sort(key=lambda r: r["id"])
    write_log(rows, run / "reports" / "qc.tsv", ("id", "max_value", "status", "reason"))
    return {"kept": len(report.kept), "rejected": [i for i, _, _ in report.rejected]}


def _write_split(plan, path: Path) -> None:
    rows = [{"participant_id": s, "set": "test"} for s in sorted(plan.test_subjects)]
    for f, (_, val) in enumerate(plan.folds):
        rows += [{"participant_id": s, "set": f"fold{f}"} for s in sorted(val)]
    write_log(rows, path, ("participant_id", "set"))


def _train(cfg, run: Path, jobs: int, default_folds) -> dict:
    data = _cohort(cfg)
    plan = _plan(cfg, data.manifest)
    folds = list(cfg["split.folds"]) or list(default_folds(plan))
    for f in folds:
        if not 0 <= f < plan.n_folds:
            raise C.ConfigError(f"split.folds: fold {f} outside 0..{plan.n_folds - 1}")
    spec = C.architecture(cfg, data.volumes.shape[1:])
    spec.validate()
    results = run_cv(data, plan, spec, C.train_config(cfg), cfg["run.seed"], folds, cfg["run.runs"], jobs)
    jobs_out = []
    for r in results:
        stem = f"fold{r.fold}_run{r.run}"
        save_checkpoint(r.network, run / "checkpoints" / f"{stem}.ckpt")
        write_log(r.log, run / "logs" / f"train_{stem}.tsv", TRAIN_LOG_COLUMNS)
        jobs_out.append(
            {
                "fold": r.fold,
                "run": r.run,
                "checkpoint": f"checkpoints/{stem}.ckpt",
                "best_epoch": r.best_epoch,
                "epochs_run": len(r.log),
                "val_balanced_accuracy": r.val_balanced_accuracy,
                "test_balanced_accuracy": r.test_balanced_accuracy,
            }
        )
    table = cv_table(results)
    write_log(table, run / "reports" / "cv.tsv")
    _write_split(plan, run / "reports" / "split.tsv")
    return {"jobs": jobs_out, "mean_val_balanced_accuracy": table[-1]["val_balanced_accuracy"], "n_parameters": int(results[0].network.n_parameters())}


def cmd_train(cfg, run, jobs):
    return _train(cfg, run, jobs, lambda plan: [0])


def cmd_cv(cfg, run, jobs):
    return _train(cfg, run, jobs, lambda plan: range(plan.n_folds))


def cmd_random_search(cfg, run: Path, jobs: int) -> dict:
    data = _cohort(cfg)
    plan = _plan(cfg, data.manifest)
    rows = random_search(C.search_space(cfg), cfg["search.n_trials"], data, plan, cfg["run.seed"], C.train_config(cfg), jobs)
    write_log(rows, run / "reports" / "search.tsv")
    best = rows[0]
    return {"n_trials": len(rows), "n_failed": sum(r["status"] != "ok" for r in rows), "best": best}


def _mask_sources(cfg):
    if not cfg["mask.train_dir"]:
        raise C.ConfigError("mask.train_dir is required")
    train_dir = Path(cfg["mask.train_dir"])
    tcfg = _training_config(train_dir)
    data = _cohort(tcfg)
    plan = _plan(tcfg, data.manifest)
    return train_dir, tcfg, data, plan


def _group_job(ckpt, X, Xv, mcfg, seed, fold, run, max_images):
    net = load_checkpoint(ckpt)
    target = mcfg.target_class
    idx = _correct(net, X, target)
    if max_images:
        idx = idx[:max_images]
    vidx = _correct(net, Xv, target)
    if len(idx) == 0:
        raise MaskError(f"fold {fold} run {run}: no training image is predicted as class {target}")
    try:
        res = optimize_group_mask(net, X[idx, 0], Xv[vidx, 0] if len(vidx) else None, mcfg, job_rng(seed, "mask-group", fold, run))
    except MaskDivergenceError as exc:
        return {"fold": fold, "run": run, "status": "diverged", "error": str(exc)}
    eval_X = Xv[vidx, 0] if len(vidx) else X[idx, 0]
    return {
        "fold": fold,
        "run": run,
        "status": "ok",
        "mask": res.mask,
        "log": res.log,
        "images": idx.tolist(),
        "best_epoch": res.best_epoch,
        "epochs_run": res.epochs_run,
        "best_loss": res.best_loss,
        "masked_probability": float(np.mean(target_probability(net, eval_X, res.mask, mcfg))),
        "coverage": int(np.count_nonzero(res.mask < mcfg.threshold)),
        "outliers": loss_outlier_flags(res.image_losses) if len(idx) >= 3 else [],
    }


def cmd_mask_group(cfg, run: Path, jobs: int) -> dict:
    train_dir, tcfg, data, plan = _mask_sources(cfg)
    mcfg = C.mask_config(cfg)
    target_label = "AD" if mcfg.target_class == 1 else "CN"
    args, rows_for = [], {}
    for f, r, ckpt in _checkpoints(train_dir, cfg["split.folds"]):
        train_rows, val_rows, _ = fold_rows(data.manifest, plan, f)
        train_rows = [x for x in train_rows if x.label == target_label]
        val_rows = [x for x in val_rows if x.label == target_label]
        X, _ = data.arrays(train_rows, tcfg["train.normalization"])
        Xv, _ = data.arrays(val_rows, tcfg["train.normalization"])
        rows_for[(f, r)] = train_rows
        args.append((ckpt, X, Xv, mcfg, cfg["run.seed"], f, r, cfg["mask.max_images"]))
    outcomes = parallel_map(_group_job, jobs, args)
    contexts, failed = [], []
    for out, a in zip(outcomes, args):
        f, r = out["fold"], out["run"]
        if out["status"] != "ok":
            failed.append(out)
            continue
        stem = f"fold{f}_run{r}"
        _save_mask(out["mask"], run / "masks" / f"{stem}.nii.gz")
        write_log(out["log"], run / "logs" / f"mask_{stem}.tsv")
        rows = rows_for[(f, r)]
        contexts.append(
            {
                "name": stem,
                "group": f"fold{f}",
                "mask": f"masks/{stem}.nii.gz",
                "checkpoint": str(a[0].resolve()),
                "rows": [[rows[i].participant_id, rows[i].session_id] for i in out["images"]],
                **{k: out[k] for k in ("best_epoch", "epochs_run", "best_loss", "masked_probability", "coverage")},
                "outliers": [f"{rows[i].participant_id}_{rows[i].session_id}" for i in (out["images"][j] for j in out["outliers"])],
            }
        )
    write_log(
        [{k: c[k] for k in ("name", "coverage", "masked_probability", "best_epoch", "epochs_run", "best_loss")} for c in contexts],
        run / "reports" / "group_masks.tsv",
        ("name", "coverage", "masked_probability", "best_epoch", "epochs_run", "best_loss"),
    )
    summary = {"manifest": tcfg["data.manifest"], "normalization": tcfg["train.normalization"], "contexts": contexts, "failed": failed}
    if failed:
        write_summary(run, {"status": "failed", **summary})
        raise RunError(f"{len(failed)} group mask job(s) diverged")
    return summary


def _session_job(ckpt, X, mcfg, name):
    net = load_checkpoint(ckpt)
    if predict(net, X[None, None])[0] != mcfg.target_class:
        return {"name": name, "status": "skipped", "error": "not predicted as the target class"}
    try:
        res = optimize_session_mask(net, X, mcfg)
    except MaskDivergenceError as exc:
        return {"name": name, "status": "diverged", "error": str(exc)}
    return {
        "name": name,
        "status": "ok",
        "mask": res.mask,
        "log": res.log,
        "best_epoch": res.best_epoch,
        "epochs_run": res.epochs_run,
        "masked_probability": float(target_probability(net, X, res.mask, mcfg)[0]),
        "coverage": int(np.count_nonzero(res.mask < mcfg.threshold)),
    }


def cmd_mask_session(cfg, run: Path, jobs: int) -> dict:
    train_dir, tcfg, data, plan = _mask_sources(cfg)
    mcfg = C.mask_config(cfg)
    fold = (list(cfg["split.folds"]) or [0])[0]
    ckpt = _checkpoints(train_dir, [fold])[0][2]
    train_ids, val_ids = plan.folds[fold]
    pools = {"train": train_ids, "validation": val_ids, "test": plan.test_subjects, "all": set(data.manifest.subjects())}
    if cfg["mask.subjects"] not in pools:
        raise C.ConfigError(f"mask.subjects must be one of {sorted(pools)}")
    label = "AD" if mcfg.target_class == 1 else "CN"
    subjects = sorted(s for s in pools[cfg["mask.subjects"]] if data.manifest.subjects()[s] == label)
    if cfg["mask.max_subjects"]:
        subjects = subjects[: cfg["mask.max_subjects"]]
    if not subjects:
        raise C.ConfigError("no subject selected for session masks")
    rows = [r for s in subjects for r in data.manifest.sessions_of(s)]
    X, _ = data.arrays(rows, tcfg["train.normalization"])
    names = [f"{r.participant_id}_{r.session_id}" for r in rows]
    outcomes = parallel_map(_session_job, jobs, [(ckpt, X[i, 0], mcfg, n) for i, n in enumerate(names)])
    contexts, skipped, failed = [], [], []
    for row, out in zip(rows, outcomes):
        if out["status"] == "skipped":
            skipped.append(out["name"])
            continue
        if out["status"] != "ok":
            failed.append(out)
            continue
        _save_mask(out["mask"], run / "masks" / f"{out['name']}.nii.gz")
        write_log(out["log"], run / "logs" / f"mask_{out['name']}.tsv")
        contexts.append(
            {
                "name": out["name"],
                "group": row.participant_id,
                "baseline": row.session_id == data.manifest.baseline(row.participant_id).session_id,
                "mask": f"masks/{out['name']}.nii.gz",
                "checkpoint": str(ckpt.resolve()),
                "rows": [[row.participant_id, row.session_id]],
                **{k: out[k] for k in ("best_epoch", "epochs_run", "masked_probability", "coverage")},
            }
        )
    write_log(
        [{k: c[k] for k in ("name", "coverage", "masked_probability", "best_epoch", "epochs_run")} for c in contexts],
        run / "reports" / "session_masks.tsv",
        ("name", "coverage", "masked_probability", "best_epoch", "epochs_run"),
    )
    summary = {
        "manifest": tcfg["data.manifest"],
        "normalization": tcfg["train.normalization"],
        "fold": fold,
        "contexts": contexts,
        "skipped": skipped,
        "failed": failed,
    }
    if failed:
        write_summary(run, {"status": "failed", **summary})
        raise RunError(f"{len(failed)} session mask job(s) diverged")
    return summary


def grid_cells(cfg) -> list[tuple[str, dict]]:
    """(axis label, overrides) per cell; ``axes`` varies one weight at a time."""
    names = ("lambda1", "lambda2", "beta1", "beta2")
    if cfg["grid.mode"] == "axes":
        return [(n, {n: v}) for n in names for v in cfg[f"grid.{n}"]]
    if cfg["grid.mode"] == "product":
        return [
            ("product", dict(zip(names, combo)))
            for combo in itertools.product(*(cfg[f"grid.{n}"] for n in names))
        ]
    raise C.ConfigError(f"grid.mode must be 'axes' or 'product', got {cfg['grid.mode']!r}")


def cmd_grid_search(cfg, run: Path, jobs: int) -> dict:
    train_dir, tcfg, data, plan = _mask_sources(cfg)
    mcfg = C.mask_config(cfg)
    fold = (list(cfg["split.folds"]) or [0])[0]
    ckpt = _checkpoints(train_dir, [fold])[0][2]
    net = load_checkpoint(ckpt)
    label = "AD" if mcfg.target_class == 1 else "CN"
    train_rows, val_rows, _ = fold_rows(data.manifest, plan, fold)
    X, _ = data.arrays([r for r in train_rows if r.label == label], tcfg["train.normalization"])
    Xv, _ = data.arrays([r for r in val_rows if r.label == label], tcfg["train.normalization"])
    idx, vidx = _correct(net, X, mcfg.target_class), _correct(net, Xv, mcfg.target_class)
    if cfg["mask.max_images"]:
        idx = idx[: cfg["mask.max_images"]]
    cells = grid_cells(cfg)
    try:
        results, rows = grid_search_masks(
            net,
            X[idx, 0],
            Xv[vidx, 0] if len(vidx) else None,
            [c for _, c in cells],
            mcfg,
            seed=cfg["run.seed"],
            fallback_learning_rate=cfg["grid.fallback_learning_rate"],
            jobs=jobs,
        )
    except MaskDivergenceError as exc:
        raise RunError(f"a grid cell diverged even at the fallback rate: {exc}") from exc
    for (axis, _), res, row in zip(cells, results, rows):
        row["axis"] = axis
        _save_mask(res.mask, run / "masks" / f"cell{row['cell']:02d}.nii.gz")
        write_log(res.log, run / "logs" / f"mask_cell{row['cell']:02d}.tsv")
    columns = ("cell", "axis", "lambda1", "lambda2", "beta1", "beta2", "learning_rate", "coverage", "min_value",
               "masked_probability", "best_epoch", "best_loss")
    write_log(rows, run / "reports" / "grid.tsv", columns)
    summary = {"fold": fold, "cells": rows}
    if _atlas_path(cfg, tcfg["data.manifest"]).is_file():
        atlas = _atlas(cfg, tcfg["data.manifest"])
        n_rois = int(atlas.max())
        vectors = [roi_density_vector(r.mask, atlas, n_rois) for r in results]
        neighbours = {}
        for axis in dict.fromkeys(a for a, _ in cells):
            members = [i for i, (a, _) in enumerate(cells) if a == axis]
            matrix = [
                {"cell": i, **{f"cell{j:02d}": roi_similarity(vectors[i], vectors[j]) for j in members}} for i in members
            ]
            write_log(matrix, run / "reports" / f"grid_similarity_{axis}.tsv")
            neighbours[axis] = [roi_similarity(vectors[i], vectors[j]) for i, j in zip(members, members[1:])]
        summary["neighbour_similarity"] = neighbours
    return summary


def _load_contexts(mask_dir: Path):
    path = mask_dir / "summary.json"
    if not path.is_file():
        raise C.ConfigError(f"{mask_dir} has no summary.json")
    summary = json.loads(path.read_text())
    if "contexts" not in summary:
        raise C.ConfigError(f"{mask_dir} is not a mask-group or mask-session run")
    manifest = parse_manifest(summary["manifest"])
    data = CohortData(manifest, load_session_volumes(manifest))
    by_key = {(r.participant_id, r.session_id): r for r in manifest.rows}
    nets: dict = {}
    contexts, baselines = [], set()
    for c in summary["contexts"]:
        if c["checkpoint"] not in nets:
            nets[c["checkpoint"]] = load_checkpoint(c["checkpoint"])
        net = nets[c["checkpoint"]]
        X, _ = data.arrays([by_key[tuple(k)] for k in c["rows"]], summary["normalization"])
        contexts.append(MaskContext(c["name"], net, X[:, 0], load_volume(mask_dir / c["mask"]), c["group"]))
        if c.get("baseline"):
            baselines.add(c["name"])
    return summary, contexts, baselines


def cmd_compare(cfg, run: Path, jobs: int) -> dict:
    if not cfg["compare.mask_dir"]:
        raise C.ConfigError("compare.mask_dir is required")
    mask_dir = Path(cfg["compare.mask_dir"])
    summary, contexts, baselines = _load_contexts(mask_dir)
    atlas = _atlas(cfg, summary["manifest"])
    target = int(_training_config(mask_dir)["mask.target_class"])
    mu = float(_training_config(mask_dir)["mask.mu"])
    kw = {"target_class": target, "mu": mu, "density_mode": cfg["compare.density_mode"]}
    grouping = cfg["compare.grouping"]
    reports = run / "reports"
    if grouping == "intra-inter":
        out = intra_inter_subject(contexts, atlas, baselines, **kw)
        write_report(out["intra"], reports / "intra_pairs.tsv", reports / "intra_summary.txt")
        write_report(out["inter"], reports / "inter_pairs.tsv", reports / "inter_summary.txt")
        return {k: out[k] for k in ("intra_roi_similarity", "inter_roi_similarity", "intra_probcnn", "inter_probcnn")}
    report = pairwise_report(contexts, atlas, grouping, **kw)
    write_report(report, reports / "pairs.tsv", reports / "summary.txt")
    return {
        "grouping": grouping,
        "means": {k: {"n_pairs": m.n_pairs, "n_undefined": m.n_undefined, "roi_similarity": m.roi_similarity, "probcnn": m.probcnn}
                  for k, m in report.means.items()},
    }


def cmd_render(cfg, run: Path, jobs: int) -> dict:
    if not cfg["render.volume"]:
        raise C.ConfigError("render.volume is required")
    volume = load_volume(cfg["render.volume"])
    mask = load_volume(cfg["render.mask"]) if cfg["render.mask"] else None
    axis = cfg["render.axis"]
    if not 0 <= axis <= 2:
        raise C.ConfigError("render.axis must be 0, 1 or 2")
    indices = list(cfg["render.indices"]) or np.linspace(0, volume.shape[axis] - 1, 7)[1:-1].round().astype(int).tolist()
    out = render_slices(volume, mask, axis, indices, run / "reports" / "montage.png")
    return {"image": str(out.relative_to(run)), "indices": indices, "axis": axis}


HANDLERS = {
    "synth": cmd_synth,
    "qc": cmd_qc,
    "train": cmd_train,
    "cv": cmd_cv,
    "random-search": cmd_random_search,
    "mask-group": cmd_mask_group,
    "mask-session": cmd_mask_session,
    "grid-search": cmd_grid_search,
    "compare": cmd_compare,
    "render": cmd_render,
}


# --- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volmask",
        description="Train 3D CNN classifiers on gray-matter maps and explain them with optimized occlusion masks.",
        epilog=f"Run directories go under ${RUN_ROOT_ENV} (default ./runs) unless --run-dir is given.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name, (doc, namespaces) in COMMANDS.items():
        p = sub.add_parser(
            name,
            help=doc,
            description=doc,
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="configuration keys (key = default):\n" + C.help_table(namespaces),
        )
        p.add_argument("--config", help="key = value file; keys not listed keep their defaults")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--run-dir", help="output directory (must be new or empty)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise C.ConfigError("--jobs must be at least 1")
        cfg = C.load_config(args.config, args.set)
        run = make_run_dir(args.command, args.run_dir)
    except C.ConfigError as exc:
        print(f"volmask {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    _atomic_text(run / RESOLVED_NAME, C.format_config(cfg))
    try:
        summary = HANDLERS[args.command](cfg, run, args.jobs)
    except C.ConfigError as exc:
        print(f"volmask {args.command}: config error: {exc}", file=sys.stderr)
        write_summary(run, {"status": "error", "command": args.command, "error": str(exc)})
        return 2
    except RunError as exc:
        print(f"volmask {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, NiftiError, CheckpointError, ArchitectureError, SplitError, MaskError, ValueError) as exc:
        print(f"volmask {args.command}: error: {exc}", file=sys.stderr)
        write_summary(run, {"status": "error", "command": args.command, "error": str(exc)})
        return 1
    write_summary(run, {"status": "ok", "command": args.command, **summary})
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
