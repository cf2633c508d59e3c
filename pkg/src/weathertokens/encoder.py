"""CNN spatial encoder: one hourly weather grid -> one 128-d token."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

TOKEN_DIM = 128
CONV_FILTERS = (16, 32)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 2
    kernel_size: int = 3
    conv_filters: tuple[int, int] = CONV_FILTERS
    token_dim: int = TOKEN_DIM

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if tuple(self.conv_filters) != CONV_FILTERS:
            raise ConfigError(f"conv_filters is fixed at {list(CONV_FILTERS)}")
        if self.token_dim != TOKEN_DIM:
            raise ConfigError(f"token_dim is fixed at {TOKEN_DIM}")

    @property
    def padding(self) -> int:
        return self.kernel_size // 2


def encoder_parameter_count(config: EncoderConfig) -> int:
    c, k = config.in_channels, config.kernel_size
    f1, f2 = config.conv_filters
    conv1 = f1 * (c * k * k + 1)
    bn1 = 2 * f1
    conv2 = f2 * (f1 * k * k + 1)
    bn2 = 2 * f2
    fc = f2 * config.token_dim + config.token_dim
    return conv1 + bn1 + conv2 + bn2 + fc


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SpatialEncoder:
    """conv(16) -> BN -> ReLU -> conv(32) -> BN -> ReLU -> global mean -> linear(32 -> 128).

    Both convolutions use stride 1 and "same" padding; there is no spatial
    downsampling before the global pooling, so any H, W >= kernel_size works.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(0)
        c, k = config.in_channels, config.kernel_size
        f1, f2 = config.conv_filters
        d = config.token_dim
        self.params: dict[str, Tensor] = {
            "conv1.weight": Tensor(kaiming_uniform(rng, (f1, c, k, k), c * k * k), requires_grad=True),
            "conv1.bias": Tensor(np.zeros(f1), requires_grad=True),
            "bn1.gamma": Tensor(np.ones(f1), requires_grad=True),
            "bn1.beta": Tensor(np.zeros(f1), requires_grad=True),
            "conv2.weight": Tensor(kaiming_uniform(rng, (f2, f1, k, k), f1 * k * k), requires_grad=True),
            "conv2.bias": Tensor(np.zeros(f2), requires_grad=True),
            "bn2.gamma": Tensor(np.ones(f2), requires_grad=True),
            "bn2.beta": Tensor(np.zeros(f2), requires_grad=True),
            "fc.weight": Tensor(kaiming_uniform(rng, (d, f2), f2), requires_grad=True),
            "fc.bias": Tensor(np.zeros(d), requires_grad=True),
        }
        self.bn1 = T.RunningStats(f1)
        self.bn2 = T.RunningStats(f2)

    def buffers(self) -> dict[str, T.RunningStats]:
        return {"bn1": self.bn1, "bn2": self.bn2}

    def _check(self, x: Tensor) -> None:
        c, k = self.config.in_channels, self.config.kernel_size
        if x.shape[1] != c:
            raise ConfigError(f"encoder expects {c} channels, got {x.shape[1]}")
        if x.shape[2] < k or x.shape[3] < k:
            raise T.DimensionError(f"spatial extent {x.shape[2]}x{x.shape[3]} smaller than kernel {k}")

    def __call__(self, maps: Tensor, training: bool = False) -> Tensor:
        """Encode an N x C x H x W batch of maps into N x 128 tokens."""
        if maps.ndim != 4:
            raise T.DimensionError(f"encoder expects N x C x H x W, got {maps.shape}")
        self._check(maps)
        p, pad = self.params, self.config.padding
        h = T.conv2d(maps, p["conv1.weight"], p["conv1.bias"], stride=1, padding=pad)
        h = T.relu(T.batch_norm2d(h, p["bn1.gamma"], p["bn1.beta"], self.bn1, training))
        h = T.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=1, padding=pad)
        h = T.relu(T.batch_norm2d(h, p["bn2.gamma"], p["bn2.beta"], self.bn2, training))
        h = T.adaptive_avg_pool2d(h)
        h = T.reshape(h, (h.shape[0], h.shape[1]))
        return T.linear(h, p["fc.weight"], p["fc.bias"])

    def encode_map(self, field, training: bool = False) -> np.ndarray:
        """One C x H x W grid -> 128-d token."""
        field = T.as_tensor(field)
        if field.ndim != 3:
            raise T.DimensionError(f"encode_map expects C x H x W, got {field.shape}")
        with T.no_grad():
            out = self(T.reshape(field, (1, *field.shape)), training=training)
        return out.data[0]

    def encode_sequence(self, fields, training: bool = False) -> np.ndarray:
        """T x C x H x W grids -> T x 128 tokens, each hour encoded independently."""
        fields = T.as_tensor(fields)
        if fields.ndim != 4 or fields.shape[0] < 1:
            raise T.DimensionError(f"encode_sequence expects T x C x H x W with T >= 1, got {fields.shape}")
        with T.no_grad():
            return self(fields, training=training).data
