"""Temporal transformer over weather tokens and the hour-by-hour prediction head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, SpatialEncoder, encoder_parameter_count
from .errors import ConfigError
from .tensor import Tensor

HORIZON = 45


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    horizon: int = HORIZON
    use_positional_encoding: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if (self.d_model, self.n_blocks, self.n_heads, self.ffn_dim) != (128, 2, 4, 256):
            raise ConfigError("transformer dimensions are fixed at d_model=128, 2 blocks, 4 heads, ffn 256")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, base 10000."""
    if d_model % 2:
        raise ConfigError("positional encoding needs an even d_model")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def block_parameter_count(cfg: TransformerConfig) -> int:
    d, f = cfg.d_model, cfg.ffn_dim
    attention = 4 * (d * d + d)
    ffn = (d * f + f) + (f * d + d)
    norms = 2 * (2 * d)
    return attention + ffn + norms


def model_parameter_count(enc: EncoderConfig, tr: TransformerConfig) -> int:
    head = tr.d_model + 1
    return encoder_parameter_count(enc) + tr.n_blocks * block_parameter_count(tr) + head


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class TemporalTransformer:
    """Post-norm encoder stack with full (non-causal) multi-head self-attention."""

    def __init__(self, config: TransformerConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(1)
        d, f = config.d_model, config.ffn_dim
        self.params: dict[str, Tensor] = {}
        for b in range(config.n_blocks):
            pre = f"block{b}."
            for name in ("q", "k", "v", "o"):
                self.params[pre + f"attn.{name}.weight"] = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
                self.params[pre + f"attn.{name}.bias"] = Tensor(np.zeros(d), requires_grad=True)
            self.params[pre + "norm1.gamma"] = Tensor(np.ones(d), requires_grad=True)
            self.params[pre + "norm1.beta"] = Tensor(np.zeros(d), requires_grad=True)
            self.params[pre + "ffn1.weight"] = Tensor(xavier_uniform(rng, f, d), requires_grad=True)
            self.params[pre + "ffn1.bias"] = Tensor(np.zeros(f), requires_grad=True)
            self.params[pre + "ffn2.weight"] = Tensor(xavier_uniform(rng, d, f), requires_grad=True)
            self.params[pre + "ffn2.bias"] = Tensor(np.zeros(d), requires_grad=True)
            self.params[pre + "norm2.gamma"] = Tensor(np.ones(d), requires_grad=True)
            self.params[pre + "norm2.beta"] = Tensor(np.zeros(d), requires_grad=True)
        self.last_attention: list[np.ndarray] = []

    def _attention(self, x: Tensor, pre: str) -> Tensor:
        p = self.params
        b, t, d = x.shape
        h, dh = self.config.n_heads, self.config.head_dim

        def heads(name: str) -> Tensor:
            y = T.linear(x, p[pre + f"attn.{name}.weight"], p[pre + f"attn.{name}.bias"])
            return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = T.softmax(scores)
        self.last_attention.append(weights.data)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
        return T.linear(ctx, p[pre + "attn.o.weight"], p[pre + "attn.o.bias"])

    def __call__(self, tokens: Tensor) -> Tensor:
        """B x T x d_model tokens -> B x T x d_model embeddings."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.d_model:
            raise T.DimensionError(f"transformer expects B x T x {self.config.d_model}, got {tokens.shape}")
        p = self.params
        b, t, d = tokens.shape
        x = tokens
        if self.config.use_positional_encoding:
            pe = positional_encoding(t, d).astype(tokens.dtype)
            x = T.add(x, Tensor(np.broadcast_to(pe, (b, t, d)), dtype=tokens.dtype))
        self.last_attention = []
        for blk in range(self.config.n_blocks):
            pre = f"block{blk}."
            x = T.layer_norm(T.add(x, self._attention(x, pre)), p[pre + "norm1.gamma"], p[pre + "norm1.beta"])
            hidden = T.relu(T.linear(x, p[pre + "ffn1.weight"], p[pre + "ffn1.bias"]))
            x = T.layer_norm(
                T.add(x, T.linear(hidden, p[pre + "ffn2.weight"], p[pre + "ffn2.bias"])),
                p[pre + "norm2.gamma"], p[pre + "norm2.beta"],
            )
        return x


def transformer_forward(tokens, transformer: TemporalTransformer) -> np.ndarray:
    """T x 128 token matrix -> T x 128 embeddings (no gradient tracking)."""
    tokens = T.as_tensor(tokens)
    if tokens.ndim != 2:
        raise T.DimensionError(f"expected T x {transformer.config.d_model}, got {tokens.shape}")
    with T.no_grad():
        return transformer(T.reshape(tokens, (1, *tokens.shape))).data[0]


class PredictionHead:
    """Per-position affine map d_model -> 1."""

    def __init__(self, d_model: int = 128, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(2)
        self.params: dict[str, Tensor] = {
            "weight": Tensor(xavier_uniform(rng, 1, d_model), requires_grad=True),
            "bias": Tensor(np.zeros(1), requires_grad=True),
        }

    def __call__(self, embeddings: Tensor) -> Tensor:
        out = T.linear(embeddings, self.params["weight"], self.params["bias"])
        return T.reshape(out, out.shape[:-1])


def predict_head(embeddings, head: PredictionHead, training: bool = False) -> np.ndarray:
    """T x 128 embeddings -> length-T series; clamped to [0, 1] unless training."""
    emb = T.as_tensor(embeddings)
    with T.no_grad():
        raw = head(emb).data
    return raw if training else np.clip(raw, 0.0, 1.0)


class ForecastModel:
    """Spatial encoder + temporal transformer + linear head.

    ``forward`` maps a B x T x C x H x W weather batch to B x T raw
    capacity fractions; ``predict`` is the inference path with the clamp.
    """

    def __init__(self, enc: EncoderConfig, tr: TransformerConfig, seed: int = 0):
        self.enc_config = enc
        self.tr_config = tr
        enc_rng, tr_rng, head_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        self.encoder = SpatialEncoder(enc, enc_rng)
        self.transformer = TemporalTransformer(tr, tr_rng)
        self.head = PredictionHead(tr.d_model, head_rng)

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for prefix, part in (("encoder.", self.encoder), ("transformer.", self.transformer), ("head.", self.head)):
            named.update({prefix + k: v for k, v in part.params.items()})
        return named

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, stats in self.encoder.buffers().items():
            out[f"encoder.{name}.running_mean"] = stats.mean
            out[f"encoder.{name}.running_var"] = stats.var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, stats in self.encoder.buffers().items():
            stats.mean = np.array(buffers[f"encoder.{name}.running_mean"], dtype=stats.mean.dtype)
            stats.var = np.array(buffers[f"encoder.{name}.running_var"], dtype=stats.var.dtype)

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters().values()]))

    def forward(self, weather: Tensor, training: bool = False) -> Tensor:
        if weather.ndim != 5:
            raise T.DimensionError(f"model expects B x T x C x H x W, got {weather.shape}")
        b, t, c, h, w = weather.shape
        tokens = self.encoder(T.reshape(weather, (b * t, c, h, w)), training=training)
        emb = self.transformer(T.reshape(tokens, (b, t, tokens.shape[-1])))
        return self.head(emb)

    __call__ = forward

    def predict(self, weather: np.ndarray) -> np.ndarray:
        """Clamped [0, 1] forecasts for a T x C x H x W sequence or a B x T x C x H x W batch."""
        arr = np.asarray(weather)
        single = arr.ndim == 4
        if single:
            arr = arr[None]
        with T.no_grad():
            raw = self.forward(Tensor(arr), training=False).data
        out = np.clip(raw, 0.0, 1.0)
        return out[0] if single else out
