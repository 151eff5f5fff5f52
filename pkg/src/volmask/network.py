"""Block-structured 3D CNN classifier built on :mod:`volmask.volgrad`."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import volgrad as vg
from .volgrad import GradientTape, Tensor

REDUCTIONS = ("maxpool", "strided_conv")


class ArchitectureError(ValueError):
    """The architecture cannot be built for the requested input shape."""


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    sub_blocks: int = 1
    reduction: str = "maxpool"


@dataclass(frozen=True)
class ArchitectureSpec:
    """Convolutional blocks, then dropout, then ``n_fc_layers`` fully-connected layers.

    Each sub-block is conv(k=3, pad=1) -> batchnorm -> leaky ReLU. A block ends
    with a halving reduction: a 2x2x2 max pool, or stride 2 on its last conv.
    Odd extents lose their last voxel before the reduction (floor), unless
    ``pad_odd`` is set, in which case they are zero-padded by one (ceil).
    """

    conv_blocks: tuple[ConvBlock, ...]
    input_shape: tuple[int, int, int]
    n_fc_layers: int = 1
    fc_hidden: int = 64
    dropout_rate: float = 0.5
    negative_slope: float = 0.01
    n_classes: int = 2
    pad_odd: bool = False

    @classmethod
    def from_pattern(
        cls,
        n_blocks: int,
        input_shape,
        first_filters: int = 8,
        max_channels: int = 128,
        sub_blocks: int = 1,
        reduction: str = "maxpool",
        **kwargs,
    ) -> "ArchitectureSpec":
        """Channels double per block from ``first_filters``, capped at ``max_channels``."""
        blocks = tuple(
            ConvBlock(min(first_filters * 2**i, max_channels), sub_blocks, reduction) for i in range(n_blocks)
        )
        return cls(conv_blocks=blocks, input_shape=tuple(input_shape), **kwargs)

    def spatial_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial extent after each block, starting with the input extent."""
        shapes = [tuple(self.input_shape)]
        for _ in self.conv_blocks:
            prev = shapes[-1]
            if self.pad_odd:
                shapes.append(tuple((e + 1) // 2 for e in prev))
            else:
                shapes.append(tuple(e // 2 for e in prev))
        return shapes

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchitectureError(f"invalid input shape {self.input_shape}")
        if not self.conv_blocks:
            raise ArchitectureError("at least one convolutional block is required")
        for b in self.conv_blocks:
            if not 1 <= b.sub_blocks <= 3:
                raise ArchitectureError(f"sub_blocks must be in 1..3, got {b.sub_blocks}")
            if b.out_channels < 1:
                raise ArchitectureError("out_channels must be positive")
            if b.reduction not in REDUCTIONS:
                raise ArchitectureError(f"unknown reduction {b.reduction!r}")
        if self.n_fc_layers < 1:
            raise ArchitectureError("n_fc_layers must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArchitectureError("dropout_rate must lie in [0, 1)")
        if self.n_classes != 2:
            raise ArchitectureError("only two-class networks are supported")
        for i, shape in enumerate(self.spatial_shapes()[1:]):
            if min(shape) < 1:
                raise ArchitectureError(
                    f"block {i} reduces spatial extent {self.spatial_shapes()[i]} below 1 voxel"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(**b) for b in d["conv_blocks"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def full_size_architecture(input_shape=(121, 145, 121), first_filters: int = 8) -> ArchitectureSpec:
    """Seven max-pool blocks (8, 16, 32, 64, 128, 128, 128 channels), dropout, one FC layer.

    Seven floor-halvings do not fit 121 voxels, so odd extents are padded.
    """
    return ArchitectureSpec.from_pattern(7, input_shape, first_filters=first_filters, pad_odd=True)


@dataclass
class Network:
    spec: ArchitectureSpec
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = False

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        """A copy with every parameter and buffer cast to ``dtype``."""
        return Network(
            self.spec,
            {k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.training,
        )

    def clone(self) -> "Network":
        return Network(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.training,
        )

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def logits(self, batch, rng: np.random.Generator | None = None) -> Tensor:
        """Forward pass to pre-softmax scores. Records on the active tape if inputs are watched."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=self.dtype)
        expected = (1, *self.spec.input_shape)
        if x.data.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise vg.DimensionError(f"expected input of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        spec, P, training = self.spec, self.params, self.training
        slope = spec.negative_slope
        for bi, block in enumerate(spec.conv_blocks):
            strided = block.reduction == "strided_conv"
            for si in range(block.sub_blocks):
                last = si == block.sub_blocks - 1
                name = f"block{bi}.sub{si}"
                stride = 1
                if strided and last:
                    x = self._fit_for_halving(x)
                    stride = 2
                x = vg.conv3d(x, P[f"{name}.conv.weight"], P[f"{name}.conv.bias"], stride=stride, padding=1)
                x = vg.batchnorm3d(
                    x,
                    P[f"{name}.bn.weight"],
                    P[f"{name}.bn.bias"],
                    self.buffers[f"{name}.bn.running_mean"],
                    self.buffers[f"{name}.bn.running_var"],
                    training,
                )
                x = vg.leaky_relu(x, slope)
            if not strided:
                x = vg.maxpool3d(self._fit_for_halving(x), 2, 2)
        x = vg.flatten(x)
        x = vg.dropout(x, spec.dropout_rate, training, rng)
        for fi in range(spec.n_fc_layers):
            x = vg.linear(x, P[f"fc{fi}.weight"], P[f"fc{fi}.bias"])
            if fi < spec.n_fc_layers - 1:
                x = vg.leaky_relu(x, slope)
        return x

    def _fit_for_halving(self, x: Tensor) -> Tensor:
        sp = x.shape[2:]
        if self.spec.pad_odd:
            return vg.pad_spatial_end(x, tuple(e + (e % 2) for e in sp))
        return vg.crop_spatial(x, tuple(e - (e % 2) for e in sp))

    def __call__(self, batch) -> np.ndarray:
        return forward(self, batch)


def build_network(spec: ArchitectureSpec, rng: np.random.Generator, dtype=np.float32) -> Network:
    """He-initialized conv/FC weights, zero biases, identity batchnorm."""
    spec.validate()
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    slope = spec.negative_slope
    cin = 1
    for bi, block in enumerate(spec.conv_blocks):
        for si in range(block.sub_blocks):
            name = f"block{bi}.sub{si}"
            cout = block.out_channels
            fan_in = cin * 27
            params[f"{name}.conv.weight"] = vg.he_init((cout, cin, 3, 3, 3), fan_in, slope, rng, dtype)
            params[f"{name}.conv.bias"] = Tensor(np.zeros(cout), dtype=dtype)
            params[f"{name}.bn.weight"] = Tensor(np.ones(cout), dtype=dtype)
            params[f"{name}.bn.bias"] = Tensor(np.zeros(cout), dtype=dtype)
            buffers[f"{name}.bn.running_mean"] = np.zeros(cout, dtype=dtype)
            buffers[f"{name}.bn.running_var"] = np.ones(cout, dtype=dtype)
            cin = cout
    features = cin * int(np.prod(spec.spatial_shapes()[-1]))
    for fi in range(spec.n_fc_layers):
        out = spec.n_classes if fi == spec.n_fc_layers - 1 else spec.fc_hidden
        params[f"fc{fi}.weight"] = vg.he_init((out, features), features, slope, rng, dtype)
        params[f"fc{fi}.bias"] = Tensor(np.zeros(out), dtype=dtype)
        features = out
    return Network(spec, params, buffers, training=False)


def forward(net: Network, batch, rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities, shape (N, 2)."""
    return vg.softmax(net.logits(batch, rng)).data


def predict(net: Network, batch) -> np.ndarray:
    """Most probable class per row; ties resolve to the lower index (argmax keeps the first)."""
    return np.argmax(forward(net, batch), axis=1)


def input_gradient(net: Network, batch, class_index: int, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and d(sum_i weights_i * p_i[class_index]) / d input.

    Returns ``(probs, grad)`` with ``grad`` shaped like the batch. With the
    default unit weights each row of ``grad`` is the gradient of that image's
    own class probability, since eval-mode samples do not interact.
    """
    if net.training:
        raise RuntimeError("input_gradient requires an eval-mode network")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=net.dtype)
    if x.data.ndim == 3:
        x = Tensor(x.data[None, None])
    with GradientTape() as tape:
        tape.watch(x)
        probs = vg.softmax(net.logits(x))
    seed = np.zeros_like(probs.data)
    seed[:, class_index] = 1.0 if weights is None else np.asarray(weights, dtype=seed.dtype)
    (grad,) = tape.gradient(probs, [x], seed)
    return probs.data, grad


def save_checkpoint(net: Network, path) -> None:
    from .dataio.checkpoint import write_checkpoint

    tensors = {k: v.data for k, v in net.params.items()}
    tensors.update({f"buffer:{k}": v for k, v in net.buffers.items()})
    write_checkpoint(path, net.spec.to_dict(), tensors)


def load_checkpoint(path) -> Network:
    from .dataio.checkpoint import read_checkpoint

    spec_dict, tensors = read_checkpoint(path)
    spec = ArchitectureSpec.from_dict(spec_dict)
    params, buffers = {}, {}
    for name, arr in tensors.items():
        if name.startswith("buffer:"):
            buffers[name[len("buffer:"):]] = arr
        else:
            params[name] = Tensor(arr)
    return Network(spec, params, buffers, training=False)
