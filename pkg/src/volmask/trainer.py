"""Subject-level splits, classifier training with early stopping, cross-validation and random search."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.model_selection import StratifiedKFold

from . import volgrad as vg
from .dataio.manifest import LABEL_INDEX, CohortManifest, ManifestRow
from .network import ArchitectureError, ArchitectureSpec, Network, build_network, forward
from .jobs import job_rng, parallel_map

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_balanced_accuracy")


@dataclass
class EarlyStopPolicy:
    """Stop after ``patience`` consecutive epochs that violate the best loss so far.

    ``absolute``: an epoch violates when its loss is above the best.
    ``relative``: when (loss - best) / max(best, 1e-12) exceeds ``tolerance``.
    Training never runs past ``max_epochs``.
    """

    patience: int = 5
    max_epochs: int = 30
    mode: str = "absolute"
    tolerance: float = 0.0

    def __post_init__(self):
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown early-stopping mode {self.mode!r}")
        if self.patience < 1 or self.max_epochs < 0:
            raise ValueError("patience must be >= 1 and max_epochs >= 0")


class EarlyStopper:
    def __init__(self, policy: EarlyStopPolicy, initial_best: float = math.inf):
        self.policy = policy
        self.best = initial_best
        self.bad_epochs = 0
        self.epoch = 0

    def violates(self, loss: float) -> bool:
        if self.policy.mode == "absolute":
            return loss > self.best
        return (loss - self.best) / max(self.best, 1e-12) > self.policy.tolerance

    def update(self, loss: float) -> bool:
        """Register one epoch's monitored loss; True when training should stop."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        elif self.violates(loss):
            self.bad_epochs += 1
        else:
            self.bad_epochs = 0
        return self.bad_epochs >= self.policy.patience or self.epoch >= self.policy.max_epochs


def simulate_stop(trace, policy: EarlyStopPolicy) -> int | None:
    """1-based epoch at which ``policy`` stops on a loss trace, or None if it never does."""
    stopper = EarlyStopper(policy)
    for loss in trace:
        if stopper.update(loss):
            return stopper.epoch
    return None


@dataclass(frozen=True)
class SplitPlan:
    test_subjects: frozenset
    folds: tuple[tuple[frozenset, frozenset], ...]
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)


class SplitError(ValueError):
    pass


def make_split(manifest: CohortManifest, n_folds: int = 5, n_test_per_class: int = 0, seed: int = 2) -> SplitPlan:
    """Label-balanced random test set, then stratified K-fold over the remaining subjects."""
    subjects = manifest.subjects()
    ids = sorted(subjects)
    rng = np.random.default_rng(seed)
    test: set[str] = set()
    for label in LABEL_INDEX:
        members = [s for s in ids if subjects[s] == label]
        if len(members) < n_test_per_class + n_folds:
            raise SplitError(
                f"class {label} has {len(members)} subjects; need {n_test_per_class} for test and "
                f"at least {n_folds} for cross-validation"
            )
        if n_test_per_class:
            test.update(rng.choice(members, size=n_test_per_class, replace=False).tolist())
    rest = np.array([s for s in ids if s not in test])
    labels = np.array([LABEL_INDEX[subjects[s]] for s in rest])
    skf = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    folds = tuple(
        (frozenset(rest[tr].tolist()), frozenset(rest[va].tolist())) for tr, va in skf.split(rest, labels)
    )
    return SplitPlan(frozenset(test), folds, seed)


def fold_rows(manifest: CohortManifest, plan: SplitPlan, fold: int):
    """(train rows with every session, validation baselines, test baselines)."""
    train_ids, val_ids = plan.folds[fold]
    train = [r for r in manifest.rows if r.participant_id in train_ids]
    val = [manifest.baseline(s) for s in sorted(val_ids)]
    test = [manifest.baseline(s) for s in sorted(plan.test_subjects)]
    return train, val, test


@dataclass
class CohortData:
    """Manifest rows aligned with an in-memory (n, D, H, W) volume stack."""

    manifest: CohortManifest
    volumes: np.ndarray

    def __post_init__(self):
        if len(self.volumes) != len(self.manifest):
            raise ValueError("volume stack and manifest differ in length")
        self._index = {(r.participant_id, r.session_id): i for i, r in enumerate(self.manifest.rows)}

    def arrays(self, rows: list[ManifestRow], normalization: str = "none") -> tuple[np.ndarray, np.ndarray]:
        idx = [self._index[(r.participant_id, r.session_id)] for r in rows]
        X = normalize_intensity(self.volumes[idx], normalization)[:, None]
        y = np.array([r.label_index for r in rows], dtype=np.int64)
        return X.astype(np.float32, copy=False), y


def normalize_intensity(volumes: np.ndarray, mode: str = "none") -> np.ndarray:
    if mode == "none":
        return volumes
    if mode == "minmax":
        lo = volumes.min(axis=(1, 2, 3), keepdims=True)
        hi = volumes.max(axis=(1, 2, 3), keepdims=True)
        return (volumes - lo) / np.where(hi > lo, hi - lo, 1.0)
    raise ValueError(f"unknown intensity normalization {mode!r}")


def balanced_accuracy(true_labels, predicted_labels) -> float:
    """Mean of the per-class recalls over classes 0 and 1."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.size == 0 or t.shape != p.shape:
        raise ValueError("label arrays must be non-empty and equally long")
    recalls = []
    for c in (0, 1):
        sel = t == c
        if not sel.any():
            raise ValueError(f"class {c} is absent from the true labels")
        recalls.append(float(np.mean(p[sel] == c)))
    return float(np.mean(recalls))


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    batch_size: int = 8
    normalization: str = "none"
    stop: EarlyStopPolicy = field(default_factory=EarlyStopPolicy)


def predict_proba(net: Network, X: np.ndarray, chunk: int = 16) -> np.ndarray:
    return np.concatenate([forward(net, X[i:i + chunk]) for i in range(0, len(X), chunk)])


def train_classifier(
    net: Network,
    train_set: tuple[np.ndarray, np.ndarray],
    validation_set: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Network, list[dict]]:
    """Minibatch SGD; returns the epoch snapshot with the best validation balanced accuracy and the log.

    Early stopping watches the validation cross-entropy, which also breaks
    balanced-accuracy ties.
    """
    X, y = train_set
    Xv, yv = validation_set
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = list(net.params.values())
    stopper = EarlyStopper(cfg.stop)
    best_net, best_key = net.clone().eval(), (-1.0, math.inf)
    log: list[dict] = []
    for epoch in range(1, cfg.stop.max_epochs + 1):
        net.train()
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with vg.GradientTape() as tape:
                tape.watch(*params)
                loss = vg.softmax_cross_entropy(net.logits(X[idx], rng), y[idx])
            grads = tape.gradient(loss, params)
            vg.sgd_step(params, grads, cfg.learning_rate, cfg.weight_decay)
            total += float(loss.data) * len(idx)
        net.eval()
        probs = predict_proba(net, Xv)
        val_loss = float(-np.mean(np.log(np.clip(probs[np.arange(len(yv)), yv], 1e-12, None))))
        val_ba = balanced_accuracy(yv, probs.argmax(axis=1))
        log.append(
            {"epoch": epoch, "train_loss": total / len(X), "val_loss": val_loss, "val_balanced_accuracy": val_ba}
        )
        logger.debug("epoch %d train %.4f val %.4f ba %.3f", epoch, total / len(X), val_loss, val_ba)
        # ties on balanced accuracy go to the lower validation loss
        if val_ba > best_key[0] or (val_ba == best_key[0] and val_loss < best_key[1]):
            best_key, best_net = (val_ba, val_loss), net.clone().eval()
        if stopper.update(val_loss):
            break
    net.eval()
    return best_net, log


def write_log(rows: list[dict], path, columns=None) -> None:
    """Tab-separated log with a header row; floats use repr so logs diff exactly."""
    if not rows and columns is None:
        raise ValueError("cannot infer columns of an empty log")
    columns = list(columns or rows[0].keys())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    tmp.replace(path)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class FoldResult:
    fold: int
    run: int
    network: Network
    log: list[dict]
    best_epoch: int
    val_balanced_accuracy: float
    test_balanced_accuracy: float | None


def _fit_fold(data: CohortData, plan: SplitPlan, spec: ArchitectureSpec, cfg: TrainConfig, seed: int, fold: int, run: int):
    train_rows, val_rows, test_rows = fold_rows(data.manifest, plan, fold)
    init_rng = job_rng(seed, "init", fold, run)
    train_rng = job_rng(seed, "train", fold, run)
    net = build_network(spec, init_rng)
    best, log = train_classifier(
        net, data.arrays(train_rows, cfg.normalization), data.arrays(val_rows, cfg.normalization), cfg, train_rng
    )
    best_row = max(log, key=lambda r: (r["val_balanced_accuracy"], -r["val_loss"], -r["epoch"]))
    test_ba = None
    if test_rows:
        Xt, yt = data.arrays(test_rows, cfg.normalization)
        test_ba = balanced_accuracy(yt, predict_proba(best, Xt).argmax(axis=1))
    return FoldResult(fold, run, best, log, best_row["epoch"], best_row["val_balanced_accuracy"], test_ba)


def run_cv(
    data: CohortData,
    plan: SplitPlan,
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    seed: int,
    folds=None,
    runs: int = 1,
    jobs: int = 1,
) -> list[FoldResult]:
    """Train one model per (fold, run); each job draws its own streams from ``seed``."""
    folds = range(plan.n_folds) if folds is None else folds
    args = [(data, plan, spec, cfg, seed, f, r) for f in folds for r in range(runs)]
    return parallel_map(_fit_fold, jobs, args)


def cv_table(results: list[FoldResult]) -> list[dict]:
    rows = [
        {
            "fold": r.fold,
            "run": r.run,
            "best_epoch": r.best_epoch,
            "val_balanced_accuracy": r.val_balanced_accuracy,
            "test_balanced_accuracy": r.test_balanced_accuracy,
        }
        for r in results
    ]
    test = [r["test_balanced_accuracy"] for r in rows if r["test_balanced_accuracy"] is not None]
    rows.append(
        {
            "fold": "mean",
            "run": "",
            "best_epoch": "",
            "val_balanced_accuracy": float(np.mean([r["val_balanced_accuracy"] for r in rows])),
            "test_balanced_accuracy": float(np.mean(test)) if test else None,
        }
    )
    return rows


@dataclass
class SearchSpace:
    n_blocks: tuple[int, ...] = (2, 3, 4)
    first_filters: tuple[int, ...] = (4, 8)
    sub_blocks: tuple[int, ...] = (1, 2)
    reduction: tuple[str, ...] = ("maxpool", "strided_conv")
    n_fc_layers: tuple[int, ...] = (1, 2)
    dropout_rate: tuple[float, ...] = (0.0, 0.25, 0.5)
    log10_learning_rate: tuple[float, float] = (-2.0, -1.0)
    log10_weight_decay: tuple[float, float] = (-5.0, -3.0)
    batch_size: tuple[int, ...] = (4, 8)
    normalization: tuple[str, ...] = ("none", "minmax")


def sample_trial(space: SearchSpace, input_shape, rng: np.random.Generator, base: TrainConfig) -> tuple[dict, ArchitectureSpec, TrainConfig]:
    def pick(options):
        return options[int(rng.integers(len(options)))]

    params = {
        "n_blocks": int(pick(space.n_blocks)),
        "first_filters": int(pick(space.first_filters)),
        "sub_blocks": int(pick(space.sub_blocks)),
        "reduction": str(pick(space.reduction)),
        "n_fc_layers": int(pick(space.n_fc_layers)),
        "dropout_rate": float(pick(space.dropout_rate)),
        "learning_rate": float(10 ** rng.uniform(*space.log10_learning_rate)),
        "weight_decay": float(10 ** rng.uniform(*space.log10_weight_decay)),
        "batch_size": int(pick(space.batch_size)),
        "normalization": str(pick(space.normalization)),
    }
    spec = ArchitectureSpec.from_pattern(
        params["n_blocks"],
        input_shape,
        first_filters=params["first_filters"],
        sub_blocks=params["sub_blocks"],
        reduction=params["reduction"],
        n_fc_layers=params["n_fc_layers"],
        dropout_rate=params["dropout_rate"],
    )
    cfg = replace(
        base,
        learning_rate=params["learning_rate"],
        weight_decay=params["weight_decay"],
        batch_size=params["batch_size"],
        normalization=params["normalization"],
    )
    return params, spec, cfg


def _run_trial(data, plan, space, base, seed, trial):
    rng = job_rng(seed, "search", trial)
    input_shape = data.volumes.shape[1:]
    params, spec, cfg = sample_trial(space, input_shape, rng, base)
    row = {"trial": trial, **params, "status": "ok", "val_balanced_accuracy": None, "error": ""}
    try:
        spec.validate()
    except ArchitectureError as exc:
        row.update(status="failed", error=str(exc))
        return row
    result = _fit_fold(data, plan, spec, cfg, seed, 0, 1000 + trial)
    row["val_balanced_accuracy"] = result.val_balanced_accuracy
    return row


def random_search(
    space: SearchSpace,
    n_trials: int,
    data: CohortData,
    plan: SplitPlan,
    seed: int,
    base: TrainConfig | None = None,
    jobs: int = 1,
) -> list[dict]:
    """Train each sampled configuration on fold 0; rows ranked by validation balanced accuracy.

    Configurations whose architecture does not fit the input are kept as
    ``status == "failed"`` rows at the bottom of the ranking.
    """
    base = base or TrainConfig()
    rows = parallel_map(_run_trial, jobs, [(data, plan, space, base, seed, t) for t in range(n_trials)])
    rows.sort(key=lambda r: (r["status"] != "ok", -(r["val_balanced_accuracy"] or 0.0), r["trial"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows
