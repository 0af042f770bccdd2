import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import elbo_gradient_trial, rel_error
from semoran.codec import (
    Channel,
    CodecPair,
    IdentityCodec,
    QuantizerCodec,
    TrainingDiverged,
    VaeConfig,
    VaeModel,
    awgn_channel,
    decode,
    elbo_grads,
    elbo_loss,
    encode,
    fit_vae,
    load_vae,
    quantizer_codec,
    remaining_ratio,
    reparameterize,
    save_vae,
    train_codec_pair,
)
from semoran.csi import HALF_FEATURES, N_FEATURES, Scene, derive_seed, generate_dataset
from semoran.nn import ShapeError, finite_difference_grad

TINY = VaeConfig(bottleneck=3, hidden_widths=(8,), bottleneck_hidden=False, epochs=3, batch_size=4)


def _model(dim=6, kind="amplitude", cfg=TINY, seed=0):
    return VaeModel.init(dim, kind, cfg, np.random.default_rng(seed))


def test_kl_closed_forms():
    assert elbo_loss([1.0], [1.0], [0.0], [0.0]).total == 0.0
    assert elbo_loss([0.0], [0.0], [1.0], [0.0]).kl == 0.5
    assert elbo_loss([2.0, 3.0], [2.0, 3.0], [0.3], [0.1]).reconstruction == 0.0


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 4, elements=st.floats(-5, 5)),
    arrays(np.float64, 4, elements=st.floats(-5, 5)),
)
def test_kl_nonnegative(mu, logvar):
    assert elbo_loss([0.0], [0.0], mu, logvar).kl >= -1e-12


def test_elbo_rejects_nonfinite_and_bad_shapes():
    with pytest.raises(FloatingPointError):
        elbo_loss([np.nan], [0.0], [0.0], [0.0])
    with pytest.raises(ShapeError):
        elbo_loss([0.0, 1.0], [0.0], [0.0], [0.0])


def test_elbo_grads_match_finite_differences():
    rng = np.random.default_rng(0)
    x, xh = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    mu, lv = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    g_xh, g_mu, g_lv = elbo_grads(x, xh, mu, lv, beta=0.7)
    assert rel_error(g_xh, finite_difference_grad(lambda a: elbo_loss(x, a, mu, lv, 0.7).total, xh)) < 1e-7
    assert rel_error(g_mu, finite_difference_grad(lambda a: elbo_loss(x, xh, a, lv, 0.7).total, mu)) < 1e-7
    assert rel_error(g_lv, finite_difference_grad(lambda a: elbo_loss(x, xh, mu, a, 0.7).total, lv)) < 1e-7


@pytest.mark.parametrize("seed", range(5))
def test_vae_gradients_match_finite_differences(seed):
    assert elbo_gradient_trial(seed) < 1e-4


def test_encode_modes_and_reparameterization():
    m = _model()
    x = np.random.default_rng(1).random(6).astype(np.float32)
    det = encode(m, x)
    assert np.array_equal(det.z, det.mu)
    a, b = encode(m, x, seed=5), encode(m, x, seed=5)
    assert np.array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.z, reparameterize(a.mu, a.logvar, a.noise))
    np.testing.assert_allclose(a.z, a.mu + np.exp(a.logvar / 2) * a.noise, rtol=1e-6)
    with pytest.raises(ShapeError):
        encode(m, np.zeros(5))
    with pytest.raises(ShapeError):
        decode(m, np.zeros(4))


def test_zero_decoder_outputs_activation_of_bias():
    m = _model()
    for layer in m.decoder.layers:
        layer.weights[...] = 0
    m.decoder.layers[-1].bias[...] = np.arange(6, dtype=np.float32) - 2
    out = m.decoder.forward(np.ones(3, dtype=np.float32))
    np.testing.assert_array_equal(out, np.arange(6) - 2)
    # amplitude decoding clamps the negative entries at zero
    np.testing.assert_array_equal(decode(m, np.ones(3)), [0, 0, 0, 1, 2, 3])


def test_phase_decode_stays_in_range():
    m = _model(kind="phase")
    m.decoder.layers[-1].bias[...] = np.array([4.0, -4.0, np.pi, -np.pi, 0, 10], dtype=np.float32)
    out = decode(m, np.zeros(3)).astype(np.float64)
    assert np.all(out >= -np.pi) and np.all(out < np.pi)


def test_toy_training_halves_reconstruction_loss():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(64, 1)).astype(np.float32)
    cfg = VaeConfig(bottleneck=1, hidden_widths=(8,), bottleneck_hidden=False, epochs=200, batch_size=16, alpha=0.01)
    m = fit_vae(x, "amplitude", cfg)
    hist = [h["reconstruction"] for h in m.training_meta["loss_history"]]
    assert min(hist) <= 0.5 * hist[0]
    totals = [h["total"] for h in m.training_meta["loss_history"]]
    assert totals[m.training_meta["best_epoch"]] == min(totals) <= totals[0]


def test_zero_epochs_and_determinism():
    x = np.random.default_rng(0).random((20, 6)).astype(np.float32)
    init = VaeModel.init(6, "amplitude", TINY, np.random.default_rng(derive_seed(TINY.seed, 0)))
    m0 = fit_vae(x, "amplitude", VaeConfig(**{**TINY.__dict__, "epochs": 0}))
    for a, b in zip(init.encoder.parameters(), m0.encoder.parameters()):
        assert np.array_equal(a, b)
    assert fit_vae(x, "amplitude", TINY).checksum() == fit_vae(x, "amplitude", TINY).checksum()


def test_divergence_is_reported():
    x = np.full((8, 6), 1e30, dtype=np.float32)
    with pytest.raises((TrainingDiverged, FloatingPointError)):
        fit_vae(x, "amplitude", VaeConfig(**{**TINY.__dict__, "alpha": 1e30}))


def test_checkpoint_roundtrip(tmp_path):
    x = np.random.default_rng(0).random((20, 6)).astype(np.float32)
    m = fit_vae(x, "phase", TINY)
    save_vae(m, tmp_path / "m.sem")
    back = load_vae(tmp_path / "m.sem")
    assert back.checksum() == m.checksum()
    assert np.array_equal(decode(back, encode(back, x[0]).z), decode(m, encode(m, x[0]).z))


def test_awgn_channel():
    z = np.random.default_rng(0).standard_normal(10_000)
    assert np.array_equal(awgn_channel(z, None, 1), z)
    a, b = awgn_channel(z, 10.0, 3), awgn_channel(z, 10.0, 3)
    assert np.array_equal(a, b)
    snr = 10 * math.log10(np.mean(z**2) / np.mean((a - z) ** 2))
    assert abs(snr - 10) < 0.5
    ch = Channel(10.0, 7)
    assert not np.array_equal(ch.apply(z, 0), ch.apply(z, 1))


def test_identity_and_quantizer():
    x = np.random.default_rng(0).random(N_FEATURES).astype(np.float32)
    ident = IdentityCodec()
    assert np.array_equal(ident.decode(ident.encode(x)), x)
    assert ident.transmitted_scalars / N_FEATURES == 1.0

    ends = np.array([-1.5, 2.5, -1.5])
    assert np.array_equal(quantizer_codec(ends, 1, -1.5, 2.5), ends)
    v = np.random.default_rng(1).uniform(-3, 7, 5000)
    err = np.abs(quantizer_codec(v, 8, -3, 7) - v)
    # endpoint-inclusive levels are range/255 apart, so the worst rounding error is half of that
    assert err.max() <= 10 / (2 * 255) + 1e-12
    with pytest.raises(ValueError):
        quantizer_codec(v, 0, -3, 7)
    with pytest.raises(ValueError):
        quantizer_codec(v, 17, -3, 7)


def test_quantizer_codec_on_dataset():
    ds = generate_dataset(Scene(), 6, 0)
    q = QuantizerCodec.fit(ds, 8)
    rec = q.decode(q.encode(ds.flat()[0]))
    assert rec.shape == (N_FEATURES,)
    assert q.payload_bytes == N_FEATURES


def test_codec_pair_and_remaining_ratio():
    ds = generate_dataset(Scene(), 12, 0)
    cfg = VaeConfig(bottleneck=270, hidden_widths=(16,), bottleneck_hidden=False, epochs=1)
    pair = train_codec_pair(ds, cfg)
    assert remaining_ratio(pair) == 540 / 13500 == 0.04
    payload = pair.encode(ds.flat()[0])
    assert payload.shape == (540,)
    out = pair.decode(payload)
    assert out.shape == (N_FEATURES,)
    assert np.all(out[:HALF_FEATURES] >= 0)
    batch = pair.reconstruct_batch(ds.flat()[:3])
    np.testing.assert_allclose(batch[0], out, rtol=1e-4, atol=1e-4)
    with pytest.raises(ValueError):
        CodecPair(pair.phase_model, pair.amplitude_model)


def test_trained_codec_beats_mean_predictor_on_held_out():
    ds = generate_dataset(Scene(), 300, 4)
    amp = ds.amplitude()
    train, test = amp[:240], amp[240:]
    cfg = VaeConfig(bottleneck=25, hidden_widths=(64,), bottleneck_hidden=False, epochs=15)
    m = fit_vae(train, "amplitude", cfg, channels=3)
    rec = decode(m, encode(m, test).z)
    mse = float(np.mean((rec - test) ** 2))
    baseline = float(np.mean((test - train.mean(axis=0)) ** 2))
    assert mse < baseline
