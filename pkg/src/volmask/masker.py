"""Occlusion-mask optimization against a frozen classifier.

A mask ``m`` in [0, 1] blends each voxel toward a constant ``mu``::

    X'(u) = m(u) X(u) + (1 - m(u)) mu

and is found by projected gradient descent on

    lambda1 * sum |1 - m|^beta1  +  lambda2 * sum_u sum_axis |d_axis m(u)|^beta2
    + mean_batch p_target(X')

where ``p_target`` is the softmax probability of the class being suppressed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .jobs import job_rng, parallel_map
from .network import Network, forward, input_gradient, predict
from .trainer import EarlyStopper, EarlyStopPolicy

logger = logging.getLogger(__name__)

MASK_LOG_COLUMNS = ("epoch", "train_mask_loss", "val_mask_loss")


def group_profile() -> EarlyStopPolicy:
    return EarlyStopPolicy(patience=5, max_epochs=150, mode="relative", tolerance=0.05)


def session_profile() -> EarlyStopPolicy:
    return EarlyStopPolicy(patience=200, max_epochs=5000, mode="relative", tolerance=0.01)


class MaskError(ValueError):
    pass


class MaskDivergenceError(RuntimeError):
    """The monitored mask loss exceeded ``divergence_factor`` times its initial value."""


@dataclass
class MaskOptConfig:
    mu: float = 1.0
    lambda1: float = 1e-4
    lambda2: float = 1e-2
    beta1: float = 0.1
    beta2: float = 1.0
    learning_rate: float = 0.1
    target_class: int = 1
    stop: EarlyStopPolicy = field(default_factory=group_profile)
    session_stop: EarlyStopPolicy = field(default_factory=session_profile)
    session_multiplier: float = 100.0
    epsilon: float = 1e-6
    threshold: float = 0.95
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("norm exponents must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.target_class not in (0, 1):
            raise ValueError("target_class must be 0 or 1")


def apply_mask(X: np.ndarray, m: np.ndarray, mu: float = 1.0) -> np.ndarray:
    """Voxelwise convex combination of the image and ``mu``; broadcasts over leading batch axes."""
    X = np.asarray(X)
    m = np.asarray(m)
    if X.shape[-m.ndim:] != m.shape:
        raise MaskError(f"mask shape {m.shape} does not match image shape {X.shape}")
    return m * X + (1.0 - m) * mu


def sparsity_term(m: np.ndarray, beta1: float) -> float:
    return float(np.sum(np.abs(1.0 - m) ** beta1))


def sparsity_gradient(m: np.ndarray, beta1: float, epsilon: float = 1e-6) -> np.ndarray:
    # base floored at epsilon; sign(0) = 0, so an untouched voxel (m == 1) gets no push
    d = 1.0 - m
    return -beta1 * np.maximum(np.abs(d), epsilon) ** (beta1 - 1.0) * np.sign(d)


def _forward_differences(m: np.ndarray):
    return [np.diff(m, axis=a) for a in range(m.ndim)]


def tv_term(m: np.ndarray, beta2: float) -> float:
    """Sum over voxels and axes of |forward difference|^beta2; the far face contributes nothing."""
    return float(sum(np.sum(np.abs(d) ** beta2) for d in _forward_differences(m)))


def tv_gradient(m: np.ndarray, beta2: float, epsilon: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(m, dtype=np.result_type(m, np.float32))
    for axis, d in enumerate(_forward_differences(m)):
        gd = beta2 * np.maximum(np.abs(d), epsilon) ** (beta2 - 1.0) * np.sign(d)
        hi = [slice(None)] * m.ndim
        lo = [slice(None)] * m.ndim
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        grad[tuple(hi)] += gd
        grad[tuple(lo)] -= gd
    return grad


def _as_batch(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        return X[None, None]
    if X.ndim == 4:
        return X[:, None]
    return X


def _regularizers(m, cfg: MaskOptConfig, scale: float) -> float:
    return scale * (cfg.lambda1 * sparsity_term(m, cfg.beta1) + cfg.lambda2 * tv_term(m, cfg.beta2))


def target_probability(net: Network, X_batch, m, cfg: MaskOptConfig) -> np.ndarray:
    """Per-image probability of ``cfg.target_class`` on the masked batch."""
    X = _as_batch(X_batch)
    masked = apply_mask(X, m, cfg.mu).astype(net.dtype, copy=False)
    probs = np.concatenate([forward(net, masked[i:i + 16]) for i in range(0, len(masked), 16)])
    return probs[:, cfg.target_class]


def mask_loss(net: Network, X_batch, m, cfg: MaskOptConfig, scale: float = 1.0) -> float:
    """Full objective; ``scale`` multiplies both regularization weights."""
    return _regularizers(m, cfg, scale) + float(np.mean(target_probability(net, X_batch, m, cfg)))


def mask_gradient(net: Network, X_batch, m, cfg: MaskOptConfig, scale: float = 1.0) -> tuple[float, np.ndarray]:
    """Objective value and its gradient with respect to the mask.

    The classifier part follows the chain rule through the blend:
    d/dm(u) = (X(u) - mu) * dp/dX'(u), averaged over the batch.
    """
    X = _as_batch(X_batch)
    masked = apply_mask(X, m, cfg.mu).astype(net.dtype, copy=False)
    n = len(X)
    probs, g_in = input_gradient(net, masked, cfg.target_class, weights=np.full(n, 1.0 / n))
    grad = np.sum((X[:, 0] - cfg.mu) * g_in[:, 0], axis=0)
    grad = grad + scale * (
        cfg.lambda1 * sparsity_gradient(m, cfg.beta1, cfg.epsilon) + cfg.lambda2 * tv_gradient(m, cfg.beta2, cfg.epsilon)
    )
    loss = _regularizers(m, cfg, scale) + float(np.mean(probs[:, cfg.target_class]))
    return loss, grad


def threshold_mask(m: np.ndarray, cutoff: float = 0.95) -> np.ndarray:
    """Values strictly above ``cutoff`` become 1; others are kept."""
    return np.where(m > cutoff, 1.0, m).astype(np.asarray(m).dtype, copy=False)


@dataclass
class MaskResult:
    mask: np.ndarray
    raw_mask: np.ndarray
    log: list[dict]
    best_epoch: int
    best_loss: float
    learning_rate: float
    image_losses: np.ndarray | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.log) - 1


def _check_predicted(net: Network, X: np.ndarray, target: int) -> None:
    pred = np.concatenate([predict(net, X[i:i + 16]) for i in range(0, len(X), 16)])
    wrong = np.flatnonzero(pred != target)
    if wrong.size:
        raise MaskError(f"{wrong.size} image(s) are not predicted as class {target} (indices {wrong[:10].tolist()})")


def optimize_group_mask(
    net: Network,
    images: np.ndarray,
    validation_images: np.ndarray | None,
    cfg: MaskOptConfig,
    rng: np.random.Generator | None = None,
) -> MaskResult:
    """One shared mask, updated by one projected gradient step per image per epoch.

    The image order is reshuffled every epoch when ``rng`` is given. At each
    epoch end the mask loss on ``validation_images`` (or, without them, the
    mean training step loss) is monitored; the lowest-loss mask is returned
    after thresholding. ``image_losses`` holds each image's mean step loss,
    the input for :func:`loss_outlier_flags`.
    """
    X = _as_batch(images)
    if len(X) == 0:
        raise MaskError("group masking needs at least one image")
    if net.training:
        raise MaskError("the classifier must be in eval mode")
    _check_predicted(net, X, cfg.target_class)
    Xv = _as_batch(validation_images) if validation_images is not None and len(validation_images) else None
    if Xv is not None:
        _check_predicted(net, Xv, cfg.target_class)

    shape = X.shape[2:]
    m = np.ones(shape, dtype=np.float64)
    initial_train = mask_loss(net, X, m, cfg)
    initial = mask_loss(net, Xv, m, cfg) if Xv is not None else initial_train
    log = [{"epoch": 0, "train_mask_loss": initial_train, "val_mask_loss": initial if Xv is not None else None}]
    best_mask, best_loss, best_epoch = m.copy(), initial, 0
    stopper = EarlyStopper(cfg.stop, initial_best=initial)
    image_losses = np.zeros(len(X))
    epochs = 0
    for epoch in range(1, cfg.stop.max_epochs + 1):
        order = rng.permutation(len(X)) if rng is not None else np.arange(len(X))
        step_losses = np.empty(len(X))
        for i in order:
            loss, grad = mask_gradient(net, X[i:i + 1, 0], m, cfg)
            np.clip(m - cfg.learning_rate * grad, 0.0, 1.0, out=m)
            step_losses[i] = loss
        image_losses += step_losses
        epochs += 1
        train_loss = float(step_losses.mean())
        monitored = mask_loss(net, Xv, m, cfg) if Xv is not None else train_loss
        log.append({"epoch": epoch, "train_mask_loss": train_loss, "val_mask_loss": monitored if Xv is not None else None})
        if not np.isfinite(monitored) or monitored > cfg.divergence_factor * initial:
            raise MaskDivergenceError(f"epoch {epoch}: mask loss {monitored:.4g} vs initial {initial:.4g}")
        if monitored < best_loss:
            best_mask, best_loss, best_epoch = m.copy(), monitored, epoch
        if stopper.update(monitored):
            break
    return MaskResult(
        threshold_mask(best_mask, cfg.threshold),
        best_mask,
        log,
        best_epoch,
        best_loss,
        cfg.learning_rate,
        image_losses / max(epochs, 1),
    )


def optimize_session_mask(net: Network, X: np.ndarray, cfg: MaskOptConfig) -> MaskResult:
    """Mask for a single image, with both regularization weights scaled by ``session_multiplier``.

    There is no validation set: the monitored loss is the objective on the
    image itself after each step, under ``cfg.session_stop``.
    """
    if net.training:
        raise MaskError("the classifier must be in eval mode")
    Xb = _as_batch(X)
    if len(Xb) != 1:
        raise MaskError("session masking takes exactly one image")
    if predict(net, Xb)[0] != cfg.target_class:
        raise MaskError(f"image is not predicted as class {cfg.target_class}; its mask is undefined")
    scale = cfg.session_multiplier
    policy = cfg.session_stop
    m = np.ones(Xb.shape[2:], dtype=np.float64)
    loss, grad = mask_gradient(net, Xb, m, cfg, scale)
    initial = loss
    log = [{"epoch": 0, "train_mask_loss": loss, "val_mask_loss": None}]
    best_mask, best_loss, best_epoch = m.copy(), loss, 0
    stopper = EarlyStopper(policy, initial_best=initial)
    for epoch in range(1, policy.max_epochs + 1):
        np.clip(m - cfg.learning_rate * grad, 0.0, 1.0, out=m)
        # the gradient at the new mask is needed for the next step anyway
        loss, grad = mask_gradient(net, Xb, m, cfg, scale)
        log.append({"epoch": epoch, "train_mask_loss": loss, "val_mask_loss": None})
        if not np.isfinite(loss) or loss > cfg.divergence_factor * initial:
            raise MaskDivergenceError(f"epoch {epoch}: mask loss {loss:.4g} vs initial {initial:.4g}")
        if loss < best_loss:
            best_mask, best_loss, best_epoch = m.copy(), loss, epoch
        if stopper.update(loss):
            break
    return MaskResult(threshold_mask(best_mask, cfg.threshold), best_mask, log, best_epoch, best_loss, cfg.learning_rate)


@dataclass
class QualityReport:
    kept: list[tuple[str, float]]
    rejected: list[tuple[str, float, str]]


def quality_check_stage1(volumes, ids=None, min_max_value: float = 0.95) -> QualityReport:
    """Reject volumes whose maximum is below ``min_max_value``; both lists in ascending max order."""
    volumes = list(volumes)
    ids = [str(i) for i in range(len(volumes))] if ids is None else list(ids)
    maxima = [(ident, float(np.max(v))) for ident, v in zip(ids, volumes)]
    maxima.sort(key=lambda t: t[1])
    kept = [(i, mx) for i, mx in maxima if mx >= min_max_value]
    rejected = [(i, mx, f"max {mx:.4f} < {min_max_value}") for i, mx in maxima if mx < min_max_value]
    return QualityReport(kept, rejected)


def loss_outlier_flags(per_image_losses, z_threshold: float = 3.0) -> list[int]:
    """Indices whose loss exceeds median + z * 1.4826 * MAD."""
    losses = np.asarray(per_image_losses, dtype=np.float64)
    if losses.size < 3:
        raise ValueError("outlier flagging needs at least 3 losses")
    med = np.median(losses)
    mad = 1.4826 * np.median(np.abs(losses - med))
    return np.flatnonzero(losses > med + z_threshold * mad).tolist()


DEFAULT_BETA1 = (0.1, 0.5, 1.0, 2.0)
DEFAULT_BETA2 = (1.0, 2.0, 3.0)
DEFAULT_LAMBDAS = (0.1, 0.01, 0.001, 0.0001)


def beta_grid(beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, lambda1=1e-4, lambda2=1e-3) -> list[dict]:
    return [{"beta1": b1, "beta2": b2, "lambda1": lambda1, "lambda2": lambda2} for b2 in beta2 for b1 in beta1]


def lambda_grid(lambda1=DEFAULT_LAMBDAS, lambda2=DEFAULT_LAMBDAS, beta1=0.1, beta2=1.0) -> list[dict]:
    return [{"beta1": beta1, "beta2": beta2, "lambda1": l1, "lambda2": l2} for l2 in lambda2 for l1 in lambda1]


def _grid_cell(net, images, validation_images, cfg, cell, seed, fallback_learning_rate):
    cell_cfg = replace(cfg, **cell)
    try:
        res = optimize_group_mask(net, images, validation_images, cell_cfg, _grid_rng(seed))
    except MaskDivergenceError:
        logger.info("cell %s diverged at lr %g; retrying at %g", cell, cell_cfg.learning_rate, fallback_learning_rate)
        cell_cfg = replace(cell_cfg, learning_rate=fallback_learning_rate)
        res = optimize_group_mask(net, images, validation_images, cell_cfg, _grid_rng(seed))
    eval_images = validation_images if validation_images is not None and len(validation_images) else images
    row = {
        **{k: getattr(cell_cfg, k) for k in ("beta1", "beta2", "lambda1", "lambda2")},
        "learning_rate": cell_cfg.learning_rate,
        "coverage": int(np.count_nonzero(res.mask < cfg.threshold)),
        "min_value": float(res.mask.min()),
        "best_epoch": res.best_epoch,
        "best_loss": res.best_loss,
        "masked_probability": float(np.mean(target_probability(net, eval_images, res.mask, cell_cfg))),
    }
    return res, row


def _grid_rng(seed):
    # every cell sees the same image order, so cells differ only in their weights
    return None if seed is None else job_rng(seed, "grid")


def grid_search_masks(
    net: Network,
    images: np.ndarray,
    validation_images: np.ndarray | None,
    cells: list[dict],
    cfg: MaskOptConfig,
    seed: int | None = None,
    fallback_learning_rate: float = 0.01,
    jobs: int = 1,
) -> tuple[list[MaskResult], list[dict]]:
    """One group mask per grid cell.

    ``cells`` are overrides of ``cfg`` fields. A cell whose optimization
    diverges is rerun once at ``fallback_learning_rate``; a second divergence
    propagates. With ``seed`` the images are reshuffled every epoch, in the
    same order for all cells. Cells that resolve to the same configuration
    are optimized once and share the result.
    """
    if not cells:
        raise ValueError("the grid is empty")
    keys = [repr(replace(cfg, **cell)) for cell in cells]
    unique = list(dict.fromkeys(keys))
    first = {k: cells[keys.index(k)] for k in unique}
    args = [(net, images, validation_images, cfg, first[k], seed, fallback_learning_rate) for k in unique]
    done = dict(zip(unique, parallel_map(_grid_cell, jobs, args)))
    results = [done[k][0] for k in keys]
    rows = [{"cell": i, **done[k][1]} for i, k in enumerate(keys)]
    return results, rows
