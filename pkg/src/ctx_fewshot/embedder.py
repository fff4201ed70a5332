"""Small plain convnet producing spatial feature maps.

Four stages of two conv-BN-ReLU blocks. The first conv of every stage
downsamples by 2, except the final stage, which either downsamples (low
resolution grid, input/16) or keeps stride 1 and dilates both of its convs
by 2 (high resolution grid, input/8).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_MODES = ("train-ema", "test-ema", "test-support-stats")


@dataclass
class EmbedderConfig:
    input_size: int = 32
    in_channels: int = 1
    channels: tuple = (32, 64, 128, 128)
    final_stage_stride: int = 1
    final_stage_dilation: int = 2
    feature_dim: int = 128
    bn_ema_decay: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self):
        if (self.final_stage_stride, self.final_stage_dilation) not in ((1, 2), (2, 1)):
            raise ValueError("final stage must be stride 1 with dilation 2, or stride 2 with dilation 1")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.channels[-1] != self.feature_dim:
            raise ValueError(f"last stage width {self.channels[-1]} must equal feature_dim {self.feature_dim}")
        if not 0.0 < self.bn_ema_decay < 1.0:
            raise ValueError("bn_ema_decay must lie in (0, 1)")
        if self.input_size % self.total_stride:
            raise ValueError(f"input_size {self.input_size} must be divisible by {self.total_stride}")

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.channels) - 1) * self.final_stage_stride

    @property
    def grid_size(self) -> int:
        return self.input_size // self.total_stride


@dataclass
class BnState:
    """Running statistics per BN layer, keyed by layer name."""
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)

    def copy(self) -> "BnState":
        return BnState({k: v.copy() for k, v in self.mean.items()},
                       {k: v.copy() for k, v in self.var.items()})


class Embedder:
    def __init__(self, config: EmbedderConfig, rng=None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: dict[str, Tensor] = {}
        self.bn = BnState()
        self.layers = []
        cin = config.in_channels
        last = len(config.channels) - 1
        for s, cout in enumerate(config.channels):
            for b in range(2):
                name = f"s{s}b{b}"
                stride = (config.final_stage_stride if s == last else 2) if b == 0 else 1
                dilation = config.final_stage_dilation if s == last else 1
                fan_in = 9 * cin
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, cin, cout))
                self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
                self.params[f"{name}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
                self.params[f"{name}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
                self.bn.mean[name] = np.zeros(cout, dtype=np.float32)
                self.bn.var[name] = np.ones(cout, dtype=np.float32)
                self.layers.append((name, stride, dilation))
                cin = cout

    def embed(self, images, bn_mode: str = "test-ema", stats_rows: int | None = None) -> Tensor:
        """Map an (N, H, W, C) image batch to (N, H', W', D) feature maps.

        ``stats_rows`` restricts batch statistics (train-ema and
        test-support-stats) to the first rows, e.g. the support images of an
        episode batched together with its queries.
        """
        if bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn_mode {bn_mode!r}; expected one of {BN_MODES}")
        x = T.as_tensor(images)
        cfg = self.config
        if x.ndim != 4 or x.shape[0] == 0:
            raise T.ShapeError(f"embed: expected a nonempty NHWC batch, got {x.shape}")
        if x.shape[3] != cfg.in_channels:
            raise T.ShapeError(f"embed: expected {cfg.in_channels} channels, got {x.shape}")
        h, w = x.shape[1:3]
        if h % cfg.total_stride or w % cfg.total_stride:
            raise ValueError(f"embed: image size {h}x{w} must be divisible by {cfg.total_stride}")
        decay = cfg.bn_ema_decay
        for name, stride, dilation in self.layers:
            x = T.conv2d(x, self.params[f"{name}.w"], stride=stride, dilation=dilation,
                         padding=dilation)
            running = (self.bn.mean[name], self.bn.var[name]) if bn_mode == "test-ema" else None
            x, (mu, var) = T.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                                        running=running, eps=cfg.bn_eps, stats_rows=stats_rows)
            if bn_mode == "train-ema":
                self.bn.mean[name] = (decay * self.bn.mean[name] + (1 - decay) * mu).astype(np.float32)
                self.bn.var[name] = (decay * self.bn.var[name] + (1 - decay) * var).astype(np.float32)
            x = T.relu(x)
        return x


def global_pool(feature_maps: Tensor) -> Tensor:
    """Average a batch of (H', W', D) maps, or a single map, over positions."""
    fm = T.as_tensor(feature_maps)
    if fm.ndim == 3:
        return T.mean(fm, axis=(0, 1))
    return T.global_avg_pool(fm)
