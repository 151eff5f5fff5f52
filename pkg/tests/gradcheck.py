"""Central finite differences, used as the independent oracle for every backward pass."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps the (mutated in place) array to a float."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max|n|, 1e-12).

    The floor keeps entries that are zero in both from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(1e-3 * float(np.max(np.abs(n), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def separated_values(rng: np.random.Generator, shape, gap: float = 0.01) -> np.ndarray:
    """Distinct values at least ``gap`` apart and away from zero, so kinks are never crossed by h."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * gap
    return vals.reshape(shape).astype(np.float64)


def _tape_grads(build, arrays, R):
    """Analytic gradients of sum(build(*tensors) * R) via the tape."""
    from volmask.volgrad import GradientTape, Tensor

    tensors = [Tensor(a) for a in arrays]
    with GradientTape() as tape:
        tape.watch(*tensors)
        out = build(*tensors)
        return tape.gradient(out, tensors, R)


def check_instance(build, arrays, rng, h: float = 1e-4) -> float:
    """Max relative error over all inputs of ``build`` against central differences."""
    from volmask.volgrad import Tensor

    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = build(*[Tensor(a) for a in arrays])
    R = rng.standard_normal(out.shape)
    analytic = _tape_grads(build, arrays, R)
    worst = 0.0
    for idx, a in enumerate(arrays):
        def f(x, idx=idx):
            args = [Tensor(x if j == idx else arrays[j]) for j in range(len(arrays))]
            return float(np.sum(build(*args).data * R))
        worst = max(worst, max_rel_error(analytic[idx], numeric_grad(f, a, h)))
    return worst


def random_op_instance(name: str, rng: np.random.Generator):
    """A random small instance of a differentiable op: (build, input arrays)."""
    from volmask.volgrad import functional as F

    if name == "conv3d":
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        sp = tuple(int(v) for v in rng.integers(3, 5, size=3))
        x = rng.standard_normal((n, cin, *sp))
        w = rng.standard_normal((cout, cin, 3, 3, 3)) * 0.3
        b = rng.standard_normal(cout)
        return (lambda x, w, b: F.conv3d(x, w, b, stride, pad)), [x, w, b]
    if name in ("batchnorm3d_train", "batchnorm3d_eval"):
        training = name.endswith("train")
        c = int(rng.integers(1, 3))
        x = rng.standard_normal((2, c, 2, 2, 2))
        gamma = rng.uniform(0.5, 1.5, c)
        beta = rng.standard_normal(c)
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)

        def bn(x, g, b):
            return F.batchnorm3d(x, g, b, rm.copy(), rv.copy(), training)

        return bn, [x, gamma, beta]
    if name == "leaky_relu":
        slope = float(rng.uniform(0.0, 0.3))
        return (lambda x: F.leaky_relu(x, slope)), [separated_values(rng, (2, 3, 4))]
    if name == "maxpool3d":
        sp = tuple(int(v) for v in rng.integers(2, 6, size=3))
        return (lambda x: F.maxpool3d(x)), [separated_values(rng, (1, 2, *sp))]
    if name == "linear":
        n, f, o = (int(v) for v in rng.integers(1, 5, size=3))
        return F.linear, [rng.standard_normal((n, f)), rng.standard_normal((o, f)), rng.standard_normal(o)]
    if name == "softmax":
        return F.softmax, [rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 4)))) * 2]
    if name == "softmax_cross_entropy":
        n, k = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        labels = rng.integers(0, k, n)
        return (lambda z: F.softmax_cross_entropy(z, labels)), [rng.standard_normal((n, k)) * 2]
    if name == "dropout":
        seed = int(rng.integers(1 << 30))
        return (lambda x: F.dropout(x, 0.4, True, np.random.default_rng(seed))), [rng.standard_normal((2, 3, 3))]
    if name == "flatten":
        return F.flatten, [rng.standard_normal((2, 2, 2, 3, 2))]
    if name == "crop_spatial":
        return (lambda x: F.crop_spatial(x, (2, 1, 3))), [rng.standard_normal((1, 2, 3, 3, 3))]
    if name == "pad_spatial_end":
        return (lambda x: F.pad_spatial_end(x, (3, 4, 2))), [rng.standard_normal((1, 2, 2, 3, 2))]
    raise KeyError(name)


OP_NAMES = (
    "conv3d",
    "batchnorm3d_train",
    "batchnorm3d_eval",
    "leaky_relu",
    "maxpool3d",
    "linear",
    "softmax",
    "softmax_cross_entropy",
    "dropout",
    "flatten",
    "crop_spatial",
    "pad_spatial_end",
)


def kink_margin(net, batch) -> float:
    """Smallest distance of any leaky-ReLU input from 0 or any pooling window's top-2 gap.

    Finite differences are only an oracle where the network is differentiable
    within +-h, so instances closer than a margin to a kink are redrawn.
    """
    from unittest import mock

    from volmask import volgrad as vg

    margins = []
    relu, pool = vg.leaky_relu, vg.maxpool3d

    def relu_probe(x, *a, **kw):
        margins.append(float(np.abs(x.data).min()))
        return relu(x, *a, **kw)

    def pool_probe(x, kernel=2, stride=2):
        d = x.data
        n, c = d.shape[:2]
        sp = [e // kernel for e in d.shape[2:]]
        w = d[:, :, : sp[0] * kernel, : sp[1] * kernel, : sp[2] * kernel]
        w = w.reshape(n, c, sp[0], kernel, sp[1], kernel, sp[2], kernel).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        top = np.sort(w.reshape(n, c, *sp, -1), axis=-1)
        margins.append(float((top[..., -1] - top[..., -2]).min()))
        return pool(x, kernel, stride)

    with mock.patch.object(vg, "leaky_relu", relu_probe), mock.patch.object(vg, "maxpool3d", pool_probe):
        net.logits(batch)
    return min(margins) if margins else np.inf


def random_mask_instance(rng: np.random.Generator, margin: float = 1e-2):
    """A tiny float64 classifier, images and an interior mask for the full objective."""
    while True:
        net, X, m, cfg = _draw_mask_instance(rng)
        if kink_margin(net, (m * X + (1 - m) * cfg.mu)[:, None]) > margin:
            return net, X, m, cfg


def _draw_mask_instance(rng):
    from volmask.masker import MaskOptConfig
    from volmask.network import ArchitectureSpec, build_network

    sp = tuple(int(v) for v in rng.integers(4, 7, size=3))
    spec = ArchitectureSpec.from_pattern(2, sp, first_filters=2, fc_hidden=4, dropout_rate=0.0)
    net = build_network(spec, rng, dtype=np.float64).eval()
    for k, buf in net.buffers.items():
        if k.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
        else:
            buf[...] = rng.normal(0, 0.1, buf.shape)
    X = rng.uniform(0, 1, (int(rng.integers(1, 4)), *sp))
    # mask values spread over (0.2, 0.8) with distinct neighbours, away from the |.| kinks
    m = 0.2 + 0.6 * (np.argsort(rng.random(int(np.prod(sp)))).reshape(sp) + 0.5) / np.prod(sp)
    cfg = MaskOptConfig(
        lambda1=float(rng.uniform(1e-3, 1e-1)),
        lambda2=float(rng.uniform(1e-3, 1e-1)),
        beta1=float(rng.choice([0.1, 0.5, 1.0, 2.0])),
        beta2=float(rng.choice([1.0, 2.0, 3.0])),
        target_class=int(rng.integers(0, 2)),
    )
    return net, X, m, cfg


def check_mask_instance(rng: np.random.Generator, h: float = 1e-4) -> float:
    from volmask.masker import mask_gradient, mask_loss

    net, X, m, cfg = random_mask_instance(rng)
    _, analytic = mask_gradient(net, X, m, cfg)
    numeric = numeric_grad(lambda mm: mask_loss(net, X, mm, cfg), m.copy(), h)
    return max_rel_error(analytic, numeric)
