"""Feature extractor with multi-tap latent, label predictor and domain classifier.

The feature extractor is a stack of conv blocks (conv 3x3 -> leaky ReLU ->
2x2 max pool).  After every pool the flattened map is projected by a dense
"tap" to ``tap_width`` units; the flattened last pool also feeds a trunk
linear layer that gets a tap of its own.  All taps are concatenated into the
latent vector.  Both heads are a hidden linear layer followed by an output
linear layer and log-softmax; the domain head sees the latent through
gradient reversal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DimensionError, ShapeMismatchError
from .rng import stream


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 32
    conv_channels: tuple[int, ...] = (8, 16, 32)
    tap_width: int = 16
    trunk_width: int = 64
    hidden_width: int = 32
    num_classes: int = 7
    num_domains: int = 4
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        problems = []
        if not self.conv_channels:
            problems.append("at least one conv block is required")
        if any(c < 1 for c in self.conv_channels):
            problems.append(f"conv_channels must be positive, got {self.conv_channels}")
        for name in ("tap_width", "trunk_width", "hidden_width"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.num_classes < 2:
            problems.append("num_classes must be at least 2")
        if self.num_domains < 2:
            problems.append("num_domains must be at least 2")
        if not 0 < self.leaky_slope < 1:
            problems.append("leaky_slope must lie in (0, 1)")
        scale = 2 ** len(self.conv_channels)
        if self.input_size < scale or self.input_size % scale:
            problems.append(f"input_size {self.input_size} must be a positive multiple "
                            f"of 2**conv_blocks = {scale}")
        elif self.input_size * 2 // scale < 3:
            problems.append(f"input_size {self.input_size} leaves the last conv block a "
                            f"{self.input_size * 2 // scale}px map; 3x3 is the minimum")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def conv_blocks(self) -> int:
        return len(self.conv_channels)

    @property
    def latent_width(self) -> int:
        return (self.conv_blocks + 1) * self.tap_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


ModelParams = dict[str, np.ndarray]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for ``config``."""
    shapes: dict[str, tuple[int, ...]] = {}
    d = config.tap_width
    in_ch, side = 1, config.input_size
    for i, ch in enumerate(config.conv_channels):
        shapes[f"features.conv{i}.weight"] = (ch, in_ch, 3, 3)
        shapes[f"features.conv{i}.bias"] = (ch,)
        in_ch, side = ch, side // 2
        shapes[f"features.tap{i}.weight"] = (ch * side * side, d)
        shapes[f"features.tap{i}.bias"] = (d,)
    flat = in_ch * side * side
    shapes["features.trunk.weight"] = (flat, config.trunk_width)
    shapes["features.trunk.bias"] = (config.trunk_width,)
    c = config.conv_blocks
    shapes[f"features.tap{c}.weight"] = (config.trunk_width, d)
    shapes[f"features.tap{c}.bias"] = (d,)
    for head, n_out in (("clf", config.num_classes), ("dmn", config.num_domains)):
        shapes[f"{head}.hidden.weight"] = (config.latent_width, config.hidden_width)
        shapes[f"{head}.hidden.bias"] = (config.hidden_width,)
        shapes[f"{head}.out.weight"] = (config.hidden_width, n_out)
        shapes[f"{head}.out.bias"] = (n_out,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = stream(seed, "init")
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            fan_in, fan_out = shape[1] * 9, shape[0] * 9
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = param_shapes(config)
    diffs = []
    for name in sorted(set(expected) | set(params)):
        got = tuple(params[name].shape) if name in params else None
        want = expected.get(name)
        if got != want:
            diffs.append((name, got, want))
    if diffs:
        raise ShapeMismatchError(diffs)


@dataclass
class ForwardOutput:
    latent: Tensor
    clf_logprobs: Tensor
    dmn_logprobs: Tensor
    leaves: dict[str, Tensor] = field(default_factory=dict, repr=False)


def _head(x: Tensor, p: dict, prefix: str, slope: float) -> Tensor:
    h = ad.leaky_relu(ad.linear(x, p[f"{prefix}.hidden.weight"], p[f"{prefix}.hidden.bias"]), slope)
    return ad.log_softmax(ad.linear(h, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"]))


def forward(params: ModelParams, images, config: ModelConfig, lambda_active: bool = True,
            tape: Tape | None = None, requires_grad: bool = True,
            reverse: bool = True) -> tuple[ForwardOutput, Tape | None]:
    """Run the full network on ``images`` of shape ``(b, 1, s, s)``.

    With ``requires_grad`` every parameter becomes a leaf on ``tape`` (a new
    tape when none is given).  When ``lambda_active`` is false the domain
    head still runs but reads a detached copy of the latent, so no domain
    gradient reaches the feature extractor.  ``reverse=False`` swaps the
    gradient reversal for the identity; it exists for diagnostics.
    """
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    s = config.input_size
    if images.ndim != 4 or images.shape[1:] != (1, s, s):
        raise DimensionError(f"expected images of shape (b, 1, {s}, {s}), got {images.shape}")

    if requires_grad:
        tape = Tape() if tape is None else tape
        p = {name: tape.leaf(arr, name) for name, arr in params.items()}
    else:
        tape = None
        p = {name: Tensor(arr) for name, arr in params.items()}

    slope = config.leaky_slope
    x = Tensor(images)
    taps = []
    for i in range(config.conv_blocks):
        x = ad.leaky_relu(ad.conv2d(x, p[f"features.conv{i}.weight"], p[f"features.conv{i}.bias"]), slope)
        x = ad.maxpool2d(x)
        flat = ad.flatten(x)
        taps.append(ad.leaky_relu(ad.linear(flat, p[f"features.tap{i}.weight"], p[f"features.tap{i}.bias"]), slope))
    trunk = ad.leaky_relu(ad.linear(flat, p["features.trunk.weight"], p["features.trunk.bias"]), slope)
    c = config.conv_blocks
    taps.append(ad.leaky_relu(ad.linear(trunk, p[f"features.tap{c}.weight"], p[f"features.tap{c}.bias"]), slope))
    latent = ad.concat(taps)

    clf = _head(latent, p, "clf", slope)
    if not lambda_active:
        dmn_in = ad.detach(latent)
    elif reverse:
        dmn_in = ad.grad_reverse(latent)
    else:
        dmn_in = latent
    dmn = _head(dmn_in, p, "dmn", slope)
    return ForwardOutput(latent, clf, dmn, p), tape


def predict(logprobs) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index."""
    data = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    return np.argmax(data, axis=1)


def feature_params(params: ModelParams) -> list[str]:
    return [n for n in params if n.startswith("features.")]


def head_params(params: ModelParams, head: str) -> list[str]:
    return [n for n in params if n.startswith(head + ".")]
