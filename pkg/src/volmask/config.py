"""Flat ``key = value`` run configuration with namespaced keys and typed defaults.

Every key has a default; a file (or ``--set`` override) only lists what it
changes. Unknown keys are errors. ``format_config`` writes the fully resolved
mapping, which parses back to itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .dataio.synthetic import SyntheticCohortSpec
from .masker import MaskOptConfig, group_profile, session_profile
from .network import ArchitectureSpec, ConvBlock
from .trainer import EarlyStopPolicy, SearchSpace, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int, float, bool, str, ints, floats, strs
    default: object
    help: str = ""


def _k(name, kind, default, help=""):
    return Key(name, kind, default, help)


_SYN = SyntheticCohortSpec()
_ARCH = ArchitectureSpec(conv_blocks=(ConvBlock(8),), input_shape=(1, 1, 1))
_TRAIN = TrainConfig()
_MASK = MaskOptConfig()
_GROUP, _SESSION = group_profile(), session_profile()
_SPACE = SearchSpace()

KEYS: tuple[Key, ...] = (
    _k("run.seed", "int", 0, "master seed; every job derives its own stream"),
    _k("run.runs", "int", 1, "independent trainings per fold"),
    _k("data.manifest", "str", "", "cohort manifest (TSV); relative paths resolve against the config file"),
    _k("data.atlas", "str", "", "integer-label atlas volume (NIfTI) for ROI similarity"),
    _k("synth.shape", "ints", _SYN.shape, "volume extent D,H,W"),
    _k("synth.n_subjects_per_class", "int", _SYN.n_subjects_per_class),
    _k("synth.sessions_per_subject", "int", _SYN.sessions_per_subject),
    _k("synth.n_atrophy_regions", "int", _SYN.n_atrophy_regions),
    _k("synth.atrophy_size", "int", _SYN.atrophy_size, "edge of each cubic atrophy region"),
    _k("synth.atrophy_depth_min", "float", _SYN.atrophy_depth_min),
    _k("synth.atrophy_depth_max", "float", _SYN.atrophy_depth_max),
    _k("synth.regional_variability", "float", _SYN.regional_variability, "uneven split of depth across regions"),
    _k("synth.subject_effect", "float", _SYN.subject_effect, "amplitude of the per-subject texture"),
    _k("synth.noise", "float", _SYN.noise, "amplitude of per-session noise"),
    _k("synth.smoothing", "int", _SYN.smoothing, "half width of the triangular smoothing kernel"),
    _k("synth.atlas_tiles", "int", _SYN.atlas_tiles, "distractor ROI tiles per axis"),
    _k("synth.seed", "int", _SYN.seed),
    _k("arch.n_blocks", "int", 3),
    _k("arch.first_filters", "int", 8, "channels of the first block; doubled per block"),
    _k("arch.max_channels", "int", 128),
    _k("arch.sub_blocks", "int", 1, "conv-BN-LeakyReLU units per block (1..3)"),
    _k("arch.reduction", "str", "maxpool", "maxpool | strided_conv"),
    _k("arch.n_fc_layers", "int", _ARCH.n_fc_layers),
    _k("arch.fc_hidden", "int", _ARCH.fc_hidden, "width of hidden FC layers"),
    _k("arch.dropout_rate", "float", _ARCH.dropout_rate),
    _k("arch.negative_slope", "float", _ARCH.negative_slope),
    _k("arch.pad_odd", "bool", _ARCH.pad_odd, "pad odd extents before halving instead of cropping"),
    _k("train.learning_rate", "float", _TRAIN.learning_rate),
    _k("train.weight_decay", "float", _TRAIN.weight_decay),
    _k("train.batch_size", "int", _TRAIN.batch_size),
    _k("train.normalization", "str", _TRAIN.normalization, "none | minmax"),
    _k("train.patience", "int", _TRAIN.stop.patience),
    _k("train.max_epochs", "int", _TRAIN.stop.max_epochs),
    _k("train.stop_mode", "str", _TRAIN.stop.mode, "absolute | relative"),
    _k("train.tolerance", "float", _TRAIN.stop.tolerance),
    _k("split.n_folds", "int", 5),
    _k("split.n_test_per_class", "int", 0, "held-out test subjects per class"),
    _k("split.seed", "int", 2),
    _k("split.folds", "ints", (), "folds to run; empty = all"),
    _k("search.n_trials", "int", 10),
    _k("search.n_blocks", "ints", _SPACE.n_blocks),
    _k("search.first_filters", "ints", _SPACE.first_filters),
    _k("search.sub_blocks", "ints", _SPACE.sub_blocks),
    _k("search.reduction", "strs", _SPACE.reduction),
    _k("search.n_fc_layers", "ints", _SPACE.n_fc_layers),
    _k("search.dropout_rate", "floats", _SPACE.dropout_rate),
    _k("search.log10_learning_rate", "floats", _SPACE.log10_learning_rate, "uniform range"),
    _k("search.log10_weight_decay", "floats", _SPACE.log10_weight_decay, "uniform range"),
    _k("search.batch_size", "ints", _SPACE.batch_size),
    _k("search.normalization", "strs", _SPACE.normalization),
    _k("mask.train_dir", "str", "", "run directory holding checkpoints/fold<f>_run<r>.ckpt"),
    _k("mask.mu", "float", _MASK.mu, "occlusion value"),
    _k("mask.lambda1", "float", _MASK.lambda1, "sparsity weight"),
    _k("mask.lambda2", "float", _MASK.lambda2, "total-variation weight"),
    _k("mask.beta1", "float", _MASK.beta1),
    _k("mask.beta2", "float", _MASK.beta2),
    _k("mask.learning_rate", "float", _MASK.learning_rate),
    _k("mask.target_class", "int", _MASK.target_class, "0 = CN, 1 = AD"),
    _k("mask.patience", "int", _GROUP.patience),
    _k("mask.max_epochs", "int", _GROUP.max_epochs),
    _k("mask.tolerance", "float", _GROUP.tolerance),
    _k("mask.session_patience", "int", _SESSION.patience),
    _k("mask.session_max_epochs", "int", _SESSION.max_epochs),
    _k("mask.session_tolerance", "float", _SESSION.tolerance),
    _k("mask.session_multiplier", "float", _MASK.session_multiplier, "regularization scale for single-image masks"),
    _k("mask.epsilon", "float", _MASK.epsilon),
    _k("mask.threshold", "float", _MASK.threshold, "values above are set to 1 after optimization"),
    _k("mask.divergence_factor", "float", _MASK.divergence_factor),
    _k("mask.subjects", "str", "validation", "session masks for AD subjects of: train | validation | test | all"),
    _k("mask.max_subjects", "int", 0, "0 = no limit"),
    _k("mask.max_images", "int", 0, "cap on group-mask training images; 0 = no limit"),
    _k("grid.mode", "str", "axes", "axes: vary one weight at a time around mask.*; product: full cross product"),
    _k("grid.lambda1", "floats", (0.1, 0.01, 0.001, 0.0001)),
    _k("grid.lambda2", "floats", (0.1, 0.01, 0.001, 0.0001)),
    _k("grid.beta1", "floats", (0.1, 0.5, 1.0, 2.0)),
    _k("grid.beta2", "floats", (1.0, 2.0, 3.0)),
    _k("grid.fallback_learning_rate", "float", 0.01, "rerun rate for a diverging cell"),
    _k("compare.mask_dir", "str", "", "mask-group or mask-session run directory"),
    _k("compare.grouping", "str", "all", "all | within | between | intra-inter"),
    _k("compare.density_mode", "str", "sum", "sum | mean ROI density"),
    _k("render.volume", "str", "", "volume to display"),
    _k("render.mask", "str", "", "optional mask overlay"),
    _k("render.axis", "int", 1, "slicing axis (1 = coronal)"),
    _k("render.indices", "ints", (), "slice indices; empty = five evenly spaced"),
)

KEY_INDEX = {k.name: k for k in KEYS}
NAMESPACES = tuple(dict.fromkeys(k.name.split(".")[0] for k in KEYS))


def _parse_value(key: Key, text: str):
    text = text.strip()
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if key.kind == "str":
            return text
        items = [t.strip() for t in text.split(",") if t.strip()]
        if key.kind == "ints":
            return tuple(int(t) for t in items)
        if key.kind == "floats":
            return tuple(float(t) for t in items)
        if key.kind == "strs":
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {text!r} as {key.kind}") from None
    raise AssertionError(key.kind)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def defaults() -> dict:
    return {k.name: k.default for k in KEYS}


def parse_assignments(lines, origin: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    out: dict = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in KEY_INDEX:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {name!r}")
        if name in out:
            raise ConfigError(f"{origin}:{lineno}: key {name!r} given twice")
        out[name] = _parse_value(KEY_INDEX[name], value)
    return out


PATH_KEYS = ("data.manifest", "data.atlas", "mask.train_dir", "compare.mask_dir", "render.volume", "render.mask")


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then ``key=value`` overrides.

    Relative ``data.*``, ``mask.train_dir``, ``compare.mask_dir`` and
    ``render.*`` paths in a file are resolved against the file's directory,
    those given as overrides against the working directory. All of them are
    stored absolute so a resolved config can be reused from anywhere.
    """
    cfg = defaults()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        from_file = parse_assignments(path.read_text().splitlines(), str(path))
        for name in PATH_KEYS:
            if from_file.get(name):
                p = Path(from_file[name])
                from_file[name] = str(p if p.is_absolute() else (path.parent / p))
        cfg.update(from_file)
    cfg.update(parse_assignments(overrides, "--set"))
    for name in PATH_KEYS:
        if cfg[name]:
            cfg[name] = str(Path(cfg[name]).resolve())
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{name} = {format_value(cfg[name])}\n" for name in sorted(cfg))


def help_table(namespaces=NAMESPACES) -> str:
    lines = []
    for k in KEYS:
        if k.name.split(".")[0] in namespaces:
            doc = f"  {k.help}" if k.help else ""
            lines.append(f"  {k.name} = {format_value(k.default)}{doc}")
    return "\n".join(lines)


# --- typed views -----------------------------------------------------------


def synthetic_spec(cfg: dict) -> SyntheticCohortSpec:
    fields = {f.name for f in dataclasses.fields(SyntheticCohortSpec)}
    return SyntheticCohortSpec(**{f: cfg[f"synth.{f}"] for f in fields})


def architecture(cfg: dict, input_shape) -> ArchitectureSpec:
    return ArchitectureSpec.from_pattern(
        cfg["arch.n_blocks"],
        tuple(input_shape),
        first_filters=cfg["arch.first_filters"],
        max_channels=cfg["arch.max_channels"],
        sub_blocks=cfg["arch.sub_blocks"],
        reduction=cfg["arch.reduction"],
        n_fc_layers=cfg["arch.n_fc_layers"],
        fc_hidden=cfg["arch.fc_hidden"],
        dropout_rate=cfg["arch.dropout_rate"],
        negative_slope=cfg["arch.negative_slope"],
        pad_odd=cfg["arch.pad_odd"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["train.learning_rate"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        normalization=cfg["train.normalization"],
        stop=EarlyStopPolicy(cfg["train.patience"], cfg["train.max_epochs"], cfg["train.stop_mode"], cfg["train.tolerance"]),
    )


def search_space(cfg: dict) -> SearchSpace:
    return SearchSpace(**{f.name: cfg[f"search.{f.name}"] for f in dataclasses.fields(SearchSpace)})


def mask_config(cfg: dict) -> MaskOptConfig:
    return MaskOptConfig(
        mu=cfg["mask.mu"],
        lambda1=cfg["mask.lambda1"],
        lambda2=cfg["mask.lambda2"],
        beta1=cfg["mask.beta1"],
        beta2=cfg["mask.beta2"],
        learning_rate=cfg["mask.learning_rate"],
        target_class=cfg["mask.target_class"],
        stop=EarlyStopPolicy(cfg["mask.patience"], cfg["mask.max_epochs"], "relative", cfg["mask.tolerance"]),
        session_stop=EarlyStopPolicy(
            cfg["mask.session_patience"], cfg["mask.session_max_epochs"], "relative", cfg["mask.session_tolerance"]
        ),
        session_multiplier=cfg["mask.session_multiplier"],
        epsilon=cfg["mask.epsilon"],
        threshold=cfg["mask.threshold"],
        divergence_factor=cfg["mask.divergence_factor"],
    )
