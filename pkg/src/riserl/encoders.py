"""Learnable and fixed observation encoders, the upscaler, and stream combination."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, UsageError
from .nnsub import Conv2d, Dense, ParamGroup


class FixedKind(str, enum.Enum):
    DOWNSAMPLE = "downsample"
    RANDOM_CONV = "random_conv"
    FROZEN_MAIN = "frozen_main"
    EMA_MAIN = "ema_main"


class CombineMode(str, enum.Enum):
    UPSCALE_MULTIPLY = "upscale_multiply"
    UPSCALE_ADD = "upscale_add"
    CONCATENATE = "concatenate"
    EARLY_COMBINE = "early_combine"


@dataclass
class FixedEncoderSpec:
    kind: FixedKind = FixedKind.RANDOM_CONV
    embed_dim: int = 64
    downsample_hw: tuple[int, int] = (8, 8)
    seed: int = 1234
    ema_alpha: float = 0.9997

    def __post_init__(self):
        self.kind = FixedKind(self.kind)
        self.downsample_hw = tuple(self.downsample_hw)
        if self.kind is FixedKind.DOWNSAMPLE:
            h, w = self.downsample_hw
            if h * w != self.embed_dim:
                raise ConfigError(f"downsample {h}x{w} gives width {h * w}, embed_dim is {self.embed_dim}")
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError("ema_alpha must lie in (0, 1)")


@dataclass
class LearnableEncoderSpec:
    # (out_channels, kernel, stride) per conv layer
    convs: list[tuple[int, int, int]] = field(default_factory=lambda: [(16, 4, 2), (32, 3, 2)])
    feature_dim: int = 128
    framestack: int = 2


def he_init(layers, generator=None) -> None:
    """Normal weights with variance gain/fan_in and zero biases, for (layer, gain) pairs.

    The fan-in uniform default gives features around 0.1 in which small image
    details (a one-frame cue block) barely register.
    """
    with torch.no_grad():
        for layer, gain in layers:
            fan_in = layer.weight[0].numel()
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator) * (gain / fan_in) ** 0.5)
            layer.bias.zero_()


class LearnableEncoder(ParamGroup):
    """Conv stack -> flatten -> dense -> ReLU, giving ``feature_dim`` features."""

    def __init__(self, spec: LearnableEncoderSpec, obs_hw: tuple[int, int], generator=None):
        super().__init__(trainable=True)
        self.spec = spec
        self.obs_hw = tuple(obs_hw)
        layers = []
        c, (h, w) = spec.framestack, self.obs_hw
        for i, (co, k, s) in enumerate(spec.convs):
            conv = Conv2d(c, co, k, s, generator=generator, name=f"phi.conv{i}")
            h, w = conv.output_hw(h, w)
            layers.append(conv)
            c = co
        self.convs = nn.ModuleList(layers)
        self.flat_dim = c * h * w
        self.fc = Dense(self.flat_dim, spec.feature_dim, generator=generator, name="phi.fc")
        he_init([(layer, 2.0) for layer in (*self.convs, self.fc)], generator)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.spec.framestack or tuple(x.shape[2:]) != self.obs_hw:
            raise ConfigError(f"phi: expected [B,{self.spec.framestack},{self.obs_hw[0]},{self.obs_hw[1]}], "
                              f"got {tuple(x.shape)}")
        for conv in self.convs:
            x = F.relu(conv(x))
        return F.relu(self.fc(x.flatten(1)))


class FixedEncoder(ParamGroup):
    """Non-learnable per-frame embedding. Input [B, H, W] single frames, output [B, d]."""

    kind: FixedKind

    def __init__(self, spec: FixedEncoderSpec, obs_hw: tuple[int, int]):
        super().__init__(trainable=False)
        self.spec = spec
        self.obs_hw = tuple(obs_hw)

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    def _check(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() == 2:
            frames = frames.unsqueeze(0)
        if frames.dim() != 3 or tuple(frames.shape[1:]) != self.obs_hw:
            raise ConfigError(f"fixed encoder: expected single frames [B,{self.obs_hw[0]},{self.obs_hw[1]}], "
                              f"got {tuple(frames.shape)}")
        return frames

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        single = frames.dim() == 2
        frames = self._check(frames)
        with torch.no_grad():
            # one frame at a time: batched kernels may reduce in a batch-dependent
            # order, and a cached embedding must equal its recomputation bit for bit
            out = torch.cat([self.embed(frames[i:i + 1]) for i in range(frames.shape[0])]) if len(frames) \
                else self.embed(frames)
        return out[0] if single else out


class DownsampleEncoder(FixedEncoder):
    kind = FixedKind.DOWNSAMPLE

    def embed(self, frames):
        return F.adaptive_avg_pool2d(frames.unsqueeze(1), self.spec.downsample_hw).flatten(1)


class RandomConvEncoder(FixedEncoder):
    """A seeded random CNN standing in for a pretrained vision model."""

    kind = FixedKind.RANDOM_CONV

    def __init__(self, spec, obs_hw):
        super().__init__(spec, obs_hw)
        g = torch.Generator().manual_seed(spec.seed)
        self.conv0 = Conv2d(1, 8, 4, 2, generator=g, name="fixed.conv0")
        h, w = self.conv0.output_hw(*self.obs_hw)
        self.conv1 = Conv2d(8, 16, 3, 2, generator=g, name="fixed.conv1")
        h, w = self.conv1.output_hw(h, w)
        self.fc = Dense(16 * h * w, spec.embed_dim, generator=g, name="fixed.fc")
        he_init(((self.conv0, 2.0), (self.conv1, 2.0), (self.fc, 1.0)), g)
        self.freeze()

    def embed(self, frames):
        x = F.relu(self.conv0(frames.unsqueeze(1)))
        x = F.relu(self.conv1(x))
        return torch.tanh(self.fc(x.flatten(1)))


def _random_projection(d_in: int, d_out: int, seed: int) -> Dense:
    g = torch.Generator().manual_seed(seed)
    proj = Dense(d_in, d_out, bias=False, name="fixed.down")
    with torch.no_grad():
        proj.weight.copy_(torch.randn(d_out, d_in, generator=g) / d_in ** 0.5)
    proj.weight.requires_grad_(False)
    return proj


class MainEncoderView(FixedEncoder):
    """Embeds with the online learnable encoder, read without gradient.

    The single frame is repeated across the framestack channels, then a fixed
    random down-projection maps the features to ``embed_dim``. Embeddings
    stored earlier go stale as the online encoder trains.
    """

    kind = FixedKind.FROZEN_MAIN

    def __init__(self, spec, obs_hw, main: LearnableEncoder):
        super().__init__(spec, obs_hw)
        # plain attribute so the online encoder is not registered as our parameter
        object.__setattr__(self, "_main", main)
        self.down = _random_projection(main.feature_dim, spec.embed_dim, spec.seed)
        self.freeze()

    @property
    def source(self) -> LearnableEncoder:
        return self._main

    def embed(self, frames):
        stack = frames.unsqueeze(1).expand(-1, self.source.spec.framestack, -1, -1)
        return self.down(self.source(stack))


class EmaEncoder(MainEncoderView):
    """Exponential moving average copy of the online encoder."""

    kind = FixedKind.EMA_MAIN

    def __init__(self, spec, obs_hw, main: LearnableEncoder):
        super().__init__(spec, obs_hw, main)
        self.ema = copy.deepcopy(main)
        self.ema.freeze()
        object.__setattr__(self, "_online", main)

    @property
    def source(self) -> LearnableEncoder:
        return self.ema

    def update(self) -> None:
        ema_update(self.ema, self._online, self.spec.ema_alpha)


def make_fixed_encoder(spec: FixedEncoderSpec, obs_hw, main: LearnableEncoder | None = None) -> FixedEncoder:
    if spec.kind is FixedKind.DOWNSAMPLE:
        return DownsampleEncoder(spec, obs_hw).freeze()
    if spec.kind is FixedKind.RANDOM_CONV:
        return RandomConvEncoder(spec, obs_hw)
    if main is None:
        raise ConfigError(f"{spec.kind.value} needs the online learnable encoder")
    if spec.kind is FixedKind.FROZEN_MAIN:
        return MainEncoderView(spec, obs_hw, main)
    return EmaEncoder(spec, obs_hw, main)


def encode_fixed(encoder: FixedEncoder, frame: torch.Tensor) -> torch.Tensor:
    """Embedding of one most-recent frame, [H,W] or [1,H,W] -> [d]. Batches go through ``encoder``."""
    if frame.dim() == 3 and frame.shape[0] == 1:
        frame = frame[0]
    if frame.dim() != 2:
        raise ConfigError(f"encode_fixed takes a single frame, got {tuple(frame.shape)}")
    return encoder(frame)


def ema_update(ema: nn.Module, online: nn.Module, alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    e_params = dict(ema.named_parameters())
    o_params = dict(online.named_parameters())
    if e_params.keys() != o_params.keys():
        raise ConfigError("ema/online parameter names differ")
    with torch.no_grad():
        for name, e in e_params.items():
            o = o_params[name]
            if e.shape != o.shape:
                raise ConfigError(f"ema shape mismatch at {name}: {tuple(e.shape)} vs {tuple(o.shape)}")
            e.mul_(alpha).add_(o, alpha=1.0 - alpha)


class Upscaler(ParamGroup):
    """Linear map from the LSTM width to the learnable-feature width."""

    def __init__(self, hidden: int, feature_dim: int, generator=None):
        super().__init__(trainable=True)
        self.proj = Dense(hidden, feature_dim, generator=generator, name="omega")

    def forward(self, x):
        return self.proj(x)


def head_input_width(mode: CombineMode, hidden: int, feature_dim: int) -> int:
    return feature_dim + hidden if CombineMode(mode) is CombineMode.CONCATENATE else feature_dim


def combine(lstm_out: torch.Tensor, z: torch.Tensor, omega: Upscaler | None, mode: CombineMode,
            add_sigmoid: bool = True) -> torch.Tensor:
    """Merge the recurrent stream into the learnable features."""
    mode = CombineMode(mode)
    if mode is CombineMode.CONCATENATE:
        return torch.cat([lstm_out, z], dim=-1)
    if omega is None:
        raise ConfigError(f"{mode.value} needs an upscaler")
    up = omega(lstm_out)
    if up.shape[-1] != z.shape[-1]:
        raise ConfigError(f"upscaled width {up.shape[-1]} != feature width {z.shape[-1]}")
    if mode is CombineMode.UPSCALE_ADD:
        return (torch.sigmoid(up) if add_sigmoid else up) + z
    return torch.sigmoid(up) * z


def early_combine_input(e: torch.Tensor, z: torch.Tensor, down: Dense, mode: CombineMode = CombineMode.EARLY_COMBINE):
    """sigmoid(down(z) * e): the LSTM input used by the early-combine variant."""
    if CombineMode(mode) is not CombineMode.EARLY_COMBINE:
        raise UsageError("early_combine_input is only valid in early_combine mode")
    return torch.sigmoid(down(z) * e)
