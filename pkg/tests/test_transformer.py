import math

import numpy as np
import pytest

from weathertokens import tensor as T
from weathertokens.encoder import EncoderConfig
from weathertokens.errors import ConfigError
from weathertokens.transformer import (
    ForecastModel,
    PredictionHead,
    TemporalTransformer,
    TransformerConfig,
    block_parameter_count,
    model_parameter_count,
    positional_encoding,
    predict_head,
    transformer_forward,
)


def test_positional_encoding_values():
    pe = positional_encoding(45, 128)
    assert pe.shape == (45, 128)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(0.8414709848, abs=1e-10)
    assert np.abs(pe).max() <= 1.0
    # direct evaluation of the formula at an arbitrary entry
    assert pe[17, 2 * 9 + 1] == pytest.approx(math.cos(17 / 10000 ** (18 / 128)))


def test_positional_encoding_odd_dimension():
    with pytest.raises(ConfigError):
        positional_encoding(4, 7)


def test_config_is_fixed():
    with pytest.raises(ConfigError):
        TransformerConfig(n_heads=3)
    with pytest.raises(ConfigError):
        TransformerConfig(horizon=0)
    assert TransformerConfig().head_dim == 32


def test_parameter_counts():
    assert block_parameter_count(TransformerConfig()) == 132_480
    wind = model_parameter_count(EncoderConfig(in_channels=2), TransformerConfig())
    solar = model_parameter_count(EncoderConfig(in_channels=3), TransformerConfig())
    assert wind == 9264 + 2 * 132_480 + 129 == 274_353
    assert solar == 274_497
    assert ForecastModel(EncoderConfig(), TransformerConfig()).num_parameters() == wind
    assert ForecastModel(EncoderConfig(in_channels=3), TransformerConfig()).num_parameters() == solar


@pytest.mark.parametrize("t", [1, 45, 64])
def test_forward_shape(t):
    tr = TemporalTransformer(TransformerConfig())
    out = transformer_forward(np.random.default_rng(0).standard_normal((t, 128)), tr)
    assert out.shape == (t, 128)


def test_dimension_mismatch():
    tr = TemporalTransformer(TransformerConfig())
    with pytest.raises(T.DimensionError):
        transformer_forward(np.zeros((5, 64)), tr)


def _perm_case(use_pe):
    rng = np.random.default_rng(5)
    with T.precision("64"):
        tr = TemporalTransformer(TransformerConfig(use_positional_encoding=use_pe), rng)
        tokens = rng.standard_normal((20, 128))
        perm = rng.permutation(20)
        return transformer_forward(tokens, tr)[perm], transformer_forward(tokens[perm], tr)


def test_permutation_equivariance_without_pe():
    a, b = _perm_case(False)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_permutation_breaks_with_pe():
    a, b = _perm_case(True)
    assert np.abs(a - b).max() > 1e-3


def test_attention_rows_sum_to_one():
    tr = TemporalTransformer(TransformerConfig())
    transformer_forward(np.random.default_rng(1).standard_normal((45, 128)) * 3, tr)
    assert len(tr.last_attention) == 2
    for w in tr.last_attention:
        assert w.shape == (1, 4, 45, 45)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_head_examples():
    head = PredictionHead(128)
    head.params["bias"].data[:] = 0.37
    out = predict_head(np.zeros((45, 128)), head)
    assert out.shape == (45,)
    np.testing.assert_allclose(out, 0.37, atol=1e-7)
    head.params["bias"].data[:] = -0.2
    assert (predict_head(np.zeros((3, 128)), head) == 0.0).all()
    np.testing.assert_allclose(predict_head(np.zeros((3, 128)), head, training=True), -0.2, atol=1e-7)


def test_model_shape_contract_and_clamp():
    model = ForecastModel(EncoderConfig(), TransformerConfig(), seed=3)
    rng = np.random.default_rng(0)
    for t, h, w in [(45, 16, 16), (4, 8, 12), (1, 3, 3)]:
        out = model.predict(rng.standard_normal((t, 2, h, w)).astype(np.float32))
        assert out.shape == (t,)
        assert ((out >= 0) & (out <= 1)).all()
    batch = model.predict(rng.standard_normal((2, 5, 2, 8, 8)).astype(np.float32))
    assert batch.shape == (2, 5)


def test_seeded_initialisation_is_reproducible():
    a = ForecastModel(EncoderConfig(), TransformerConfig(), seed=11).parameters()
    b = ForecastModel(EncoderConfig(), TransformerConfig(), seed=11).parameters()
    c = ForecastModel(EncoderConfig(), TransformerConfig(), seed=12).parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["transformer.block0.attn.q.weight"].data, c["transformer.block0.attn.q.weight"].data)


def end_to_end_gradient_error(seed=0, entries=12):
    """Max relative FD error over sampled entries of every model parameter (64-bit)."""
    rng = np.random.default_rng(seed)
    with T.precision("64"):
        model = ForecastModel(EncoderConfig(in_channels=2), TransformerConfig(horizon=4), seed=seed)
        weather = T.Tensor(rng.standard_normal((1, 4, 2, 8, 8)))
        target = rng.uniform(0, 1, size=(1, 4))
        params = list(model.parameters().values())
        return T.check_gradients(lambda: T.mse_loss(model.forward(weather, training=True), target),
                                 params, eps=1e-3, max_entries=entries, rng=rng, skip_kinks=True)


@pytest.mark.parametrize("seed", [0, 1])
def test_end_to_end_gradients(seed):
    assert end_to_end_gradient_error(seed) < 1e-3
