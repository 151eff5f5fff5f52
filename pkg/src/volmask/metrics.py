"""Mask comparison: ROI-density cosine similarity and the prob_CNN cross-occlusion score."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masker import apply_mask
from .network import Network, forward


def roi_density_vector(m: np.ndarray, atlas: np.ndarray, n_rois: int | None = None, mode: str = "sum") -> np.ndarray:
    """Per-ROI mask density sum(1 - m) over labels 1..n_rois (label 0 is background).

    ``mode="mean"`` divides each sum by the ROI's voxel count instead.
    """
    m = np.asarray(m, dtype=np.float64)
    atlas = np.asarray(atlas)
    if m.shape != atlas.shape:
        raise ValueError(f"mask shape {m.shape} differs from atlas shape {atlas.shape}")
    labels = atlas.astype(np.int64).ravel()
    if labels.size and labels.min() < 0:
        raise ValueError("atlas labels must be non-negative")
    if n_rois is None:
        n_rois = int(labels.max()) if labels.size else 0
    if labels.size and labels.max() > n_rois:
        raise ValueError(f"atlas contains label {labels.max()} > n_rois = {n_rois}")
    sums = np.bincount(labels, weights=(1.0 - m).ravel(), minlength=n_rois + 1)[1:]
    if mode == "sum":
        return sums
    if mode == "mean":
        counts = np.bincount(labels, minlength=n_rois + 1)[1:]
        return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    raise ValueError(f"unknown density mode {mode!r}")


def roi_similarity(v_a, v_b) -> float | None:
    """Cosine similarity of two ROI vectors; None when either vector is all zeros."""
    a = np.asarray(v_a, dtype=np.float64)
    b = np.asarray(v_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ROI vectors differ in length: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def probcnn_dissimilarity(net_a: Network, images_a, mask_b, target_class: int = 1, mu: float = 1.0) -> float:
    """Mean probability of ``target_class`` that ``net_a`` gives its own images occluded by ``mask_b``.

    Close to 1: ``mask_b`` does not perturb ``net_a`` (dissimilar contexts).
    Close to 0: ``mask_b`` occludes ``net_a``'s evidence as well.
    """
    X = np.asarray(images_a)
    if X.ndim == 3:
        X = X[None]
    masked = apply_mask(X, mask_b, mu)[:, None].astype(net_a.dtype, copy=False)
    probs = np.concatenate([forward(net_a, masked[i:i + 16]) for i in range(0, len(masked), 16)])
    return float(np.mean(probs[:, target_class]))


@dataclass
class MaskContext:
    """A mask together with the network and images it was optimized in."""

    name: str
    net: Network
    images: np.ndarray
    mask: np.ndarray
    group: str | None = None


@dataclass
class PairResult:
    context_a: str
    context_b: str
    group_a: str | None
    group_b: str | None
    roi_similarity: float | None
    probcnn_ab: float
    probcnn_ba: float

    @property
    def probcnn_mean(self) -> float:
        return 0.5 * (self.probcnn_ab + self.probcnn_ba)


@dataclass
class GroupMean:
    n_pairs: int
    n_undefined: int
    roi_similarity: float | None
    probcnn: float


@dataclass
class ComparisonReport:
    grouping: str
    pairs: list[PairResult]
    means: dict[str, GroupMean] = field(default_factory=dict)

    @property
    def overall(self) -> GroupMean:
        return self.means["all"]


def _mean_of(pairs: list[PairResult]) -> GroupMean:
    sims = [p.roi_similarity for p in pairs if p.roi_similarity is not None]
    return GroupMean(
        n_pairs=len(pairs),
        n_undefined=len(pairs) - len(sims),
        roi_similarity=float(np.mean(sims)) if sims else None,
        probcnn=float(np.mean([p.probcnn_mean for p in pairs])) if pairs else math.nan,
    )


def pairwise_report(
    contexts: list[MaskContext],
    atlas: np.ndarray,
    grouping: str = "all",
    target_class: int = 1,
    mu: float = 1.0,
    density_mode: str = "sum",
) -> ComparisonReport:
    """Compare every unordered pair of contexts with both metrics.

    ``grouping``: ``"all"`` pairs everything; ``"within"`` only pairs sharing a
    group (e.g. sessions of one subject), with one mean per group plus
    ``"mean_of_groups"``; ``"between"`` only pairs from different groups.
    """
    if len(contexts) < 2:
        raise ValueError("a comparison needs at least two contexts")
    if grouping not in ("all", "within", "between"):
        raise ValueError(f"unknown grouping {grouping!r}")
    n_rois = int(np.max(atlas))
    vectors = [roi_density_vector(c.mask, atlas, n_rois, density_mode) for c in contexts]
    pairs = []
    for i, j in itertools.combinations(range(len(contexts)), 2):
        a, b = contexts[i], contexts[j]
        same = a.group == b.group
        if (grouping == "within" and not same) or (grouping == "between" and same):
            continue
        pairs.append(
            PairResult(
                a.name,
                b.name,
                a.group,
                b.group,
                roi_similarity(vectors[i], vectors[j]),
                probcnn_dissimilarity(a.net, a.images, b.mask, target_class, mu),
                probcnn_dissimilarity(b.net, b.images, a.mask, target_class, mu),
            )
        )
    if not pairs:
        raise ValueError(f"no context pairs satisfy grouping {grouping!r}")
    report = ComparisonReport(grouping, pairs, {"all": _mean_of(pairs)})
    if grouping == "within":
        by_group: dict[str, list[PairResult]] = {}
        for p in pairs:
            by_group.setdefault(str(p.group_a), []).append(p)
        for g in sorted(by_group):
            report.means[f"group:{g}"] = _mean_of(by_group[g])
        group_means = [report.means[f"group:{g}"] for g in sorted(by_group)]
        sims = [gm.roi_similarity for gm in group_means if gm.roi_similarity is not None]
        report.means["mean_of_groups"] = GroupMean(
            n_pairs=len(pairs),
            n_undefined=sum(gm.n_undefined for gm in group_means),
            roi_similarity=float(np.mean(sims)) if sims else None,
            probcnn=float(np.mean([gm.probcnn for gm in group_means])),
        )
    return report


def intra_inter_subject(contexts: list[MaskContext], atlas: np.ndarray, baselines: set[str], **kw) -> dict:
    """Intra-subject (mean over subjects of their session-pair means) and inter-subject (baseline pairs) scores.

    ``contexts`` are session masks grouped by subject; ``baselines`` names the
    contexts that are each subject's first session.
    """
    intra = pairwise_report(contexts, atlas, "within", **kw)
    inter = pairwise_report([c for c in contexts if c.name in baselines], atlas, "all", **kw)
    return {
        "intra": intra,
        "inter": inter,
        "intra_roi_similarity": intra.means["mean_of_groups"].roi_similarity,
        "inter_roi_similarity": inter.overall.roi_similarity,
        "intra_probcnn": intra.means["mean_of_groups"].probcnn,
        "inter_probcnn": inter.overall.probcnn,
    }


PAIR_COLUMNS = ("context_a", "context_b", "group_a", "group_b", "roi_similarity", "probcnn_ab", "probcnn_ba", "probcnn_mean")


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: ComparisonReport, pairs_path, summary_path) -> None:
    """Pairs as tab-separated rows; grouped means as sorted ``key = value`` lines."""
    pairs_path, summary_path = Path(pairs_path), Path(summary_path)
    tmp = pairs_path.with_name(pairs_path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for p in report.pairs:
            w.writerow([_fmt(p.context_a), _fmt(p.context_b), _fmt(p.group_a), _fmt(p.group_b),
                        _fmt(p.roi_similarity), _fmt(p.probcnn_ab), _fmt(p.probcnn_ba), _fmt(p.probcnn_mean)])
    tmp.replace(pairs_path)
    lines = [f"grouping = {report.grouping}"]
    for key in sorted(report.means):
        gm = report.means[key]
        lines += [
            f"{key}.n_pairs = {gm.n_pairs}",
            f"{key}.n_undefined = {gm.n_undefined}",
            f"{key}.roi_similarity = {_fmt(gm.roi_similarity)}",
            f"{key}.probcnn = {_fmt(gm.probcnn)}",
        ]
    tmp = summary_path.with_name(summary_path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(summary_path)
