"""Variational semantic codec for CSI halves, baseline codecs and the AWGN latent channel."""

from __future__ import annotations

import copy
import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import numpy as np

from . import container
from .csi import HALF_FEATURES, N_ANTENNAS, N_FEATURES, Dataset, derive_seed, phase_to_float32
from .nn import AdamaxHyper, AdamaxState, DenseStack, GradientTape, ShapeError, adamax_update_, backward, flatten_grads

KINDS = ("amplitude", "phase")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class ElboLoss:
    reconstruction: float
    kl: float
    total: float


def _kl_terms(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    return 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar)


def elbo_loss(x, x_hat, mu, logvar, beta: float = 1.0) -> ElboLoss:
    """Mean squared reconstruction error plus ``beta`` times the Gaussian KL.

    For a batch (2-D inputs) the KL is summed over latent dimensions and
    averaged over rows.
    """
    x, x_hat, mu, logvar = (np.asarray(a, dtype=np.float64) for a in (x, x_hat, mu, logvar))
    if x.shape != x_hat.shape or mu.shape != logvar.shape or (x.ndim == 2 and mu.shape[0] != x.shape[0]):
        raise ShapeError(f"inconsistent shapes: x {x.shape}, x_hat {x_hat.shape}, mu {mu.shape}, logvar {logvar.shape}")
    for name, a in (("x", x), ("x_hat", x_hat), ("mu", mu), ("logvar", logvar)):
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {name}")
    recon = float(np.mean((x_hat - x) ** 2))
    rows = mu.shape[0] if mu.ndim == 2 else 1
    kl = float(_kl_terms(mu, logvar).sum() / rows)
    return ElboLoss(recon, kl, recon + beta * kl)


def elbo_grads(x, x_hat, mu, logvar, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``elbo_loss(...).total`` w.r.t. ``x_hat``, ``mu`` and ``logvar``."""
    rows = mu.shape[0] if mu.ndim == 2 else 1
    d_xhat = 2.0 * (x_hat - x) / x.size
    d_mu = beta * mu / rows
    d_logvar = beta * 0.5 * (np.exp(logvar) - 1.0) / rows
    return d_xhat, d_mu, d_logvar


@dataclass
class VaeConfig:
    bottleneck: int = 270
    hidden_widths: tuple[int, ...] = (1024, 512)
    # adds a third hidden layer of width max(64, 2*bottleneck)
    bottleneck_hidden: bool = True
    epochs: int = 50
    batch_size: int = 64
    beta: float = 1.0
    # divides the KL by input_dim so it is on the per-element scale of the MSE
    kl_per_element: bool = True
    activation: str = "relu"
    alpha: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def widths(self) -> tuple[int, ...]:
        extra = (max(64, 2 * self.bottleneck),) if self.bottleneck_hidden else ()
        return tuple(self.hidden_widths) + extra

    def hyper(self) -> AdamaxHyper:
        return AdamaxHyper(self.alpha, self.beta1, self.beta2, self.epsilon)


@dataclass(frozen=True)
class LatentEmbedding:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    noise: np.ndarray | None = None

    @property
    def transmitted_scalars(self) -> int:
        return int(self.z.size)


@dataclass
class VaeModel:
    encoder: DenseStack
    decoder: DenseStack
    bottleneck: int
    input_dim: int
    data_kind: str
    # encoder and decoder see (x - offset) / scale
    norm_offset: np.ndarray
    norm_scale: np.ndarray
    version: int = 1
    training_meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.data_kind not in KINDS:
            raise ValueError(f"data_kind must be one of {KINDS}")
        if self.encoder.out_features != 2 * self.bottleneck or self.encoder.in_features != self.input_dim:
            raise ShapeError("encoder must map input_dim -> 2*bottleneck")
        if self.decoder.in_features != self.bottleneck or self.decoder.out_features != self.input_dim:
            raise ShapeError("decoder must map bottleneck -> input_dim")

    @classmethod
    def init(
        cls,
        input_dim: int,
        kind: str,
        config: VaeConfig,
        rng: np.random.Generator,
        norm_offset: np.ndarray | None = None,
        norm_scale: np.ndarray | None = None,
    ) -> "VaeModel":
        hidden = config.widths()
        b = config.bottleneck
        enc = DenseStack.build((input_dim, *hidden, 2 * b), rng, config.activation)
        dec = DenseStack.build((b, *reversed(hidden), input_dim), rng, config.activation)
        if norm_offset is None:
            norm_offset = np.zeros(input_dim, dtype=np.float32)
        if norm_scale is None:
            norm_scale = np.ones(input_dim, dtype=np.float32)
        return cls(enc, dec, b, input_dim, kind, norm_offset, norm_scale)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.norm_offset) / self.norm_scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.norm_scale + self.norm_offset

    def copy(self) -> "VaeModel":
        return VaeModel(
            self.encoder.copy(),
            self.decoder.copy(),
            self.bottleneck,
            self.input_dim,
            self.data_kind,
            self.norm_offset.copy(),
            self.norm_scale.copy(),
            self.version,
            copy.deepcopy(self.training_meta),
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.encoder.named_arrays("encoder")
        out.update(self.decoder.named_arrays("decoder"))
        out["norm.offset"] = self.norm_offset
        out["norm.scale"] = self.norm_scale
        return out

    def checksum(self) -> str:
        return hashlib.sha256(container.encode(self.named_arrays(), self._meta())).hexdigest()

    def _meta(self) -> dict[str, Any]:
        return {
            "type": "vae",
            "bottleneck": self.bottleneck,
            "input_dim": self.input_dim,
            "kind": self.data_kind,
            "version": self.version,
            "seed": self.training_meta.get("seed"),
            "encoder_activations": self.encoder.activations,
            "decoder_activations": self.decoder.activations,
            "training_meta": self.training_meta,
        }


def _split_head(h: np.ndarray, b: int) -> tuple[np.ndarray, np.ndarray]:
    return h[..., :b], h[..., b:]


def _finish_decode(model: VaeModel, out: np.ndarray) -> np.ndarray:
    x = model.denormalize(out)
    if model.data_kind == "phase":
        return phase_to_float32(x)
    return np.maximum(x, 0).astype(np.float32, copy=False)


def encode(model: VaeModel, x_half: np.ndarray, seed: int | None = None) -> LatentEmbedding:
    """Encode one half-sample. ``seed=None`` is inference mode (``z = mu``)."""
    x_half = np.asarray(x_half)
    if x_half.shape[-1] != model.input_dim:
        raise ShapeError(f"expected input width {model.input_dim}, got {x_half.shape[-1]}")
    h = model.encoder.forward(model.normalize(x_half).astype(model.norm_scale.dtype, copy=False))
    mu, logvar = _split_head(h, model.bottleneck)
    if seed is None:
        return LatentEmbedding(mu, logvar, mu)
    noise = np.random.default_rng(seed).standard_normal(mu.shape).astype(mu.dtype)
    return LatentEmbedding(mu, logvar, reparameterize(mu, logvar, noise), noise)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return mu + np.exp(logvar / 2) * noise


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] != model.bottleneck:
        raise ShapeError(f"expected latent width {model.bottleneck}, got {z.shape[-1]}")
    return _finish_decode(model, model.decoder.forward(z.astype(model.norm_scale.dtype, copy=False)))


def reconstruct(model: VaeModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Deterministic ``decode(encode(x))`` over the rows of ``x``."""
    out = np.empty(x.shape, dtype=np.float32)
    for i in range(0, len(x), batch_size):
        out[i : i + batch_size] = decode(model, encode(model, x[i : i + batch_size]).z)
    return out


def vae_loss_and_grads(
    model: VaeModel, x_norm: np.ndarray, noise: np.ndarray, beta: float
) -> tuple[ElboLoss, list[np.ndarray]]:
    """ELBO on normalized inputs and its gradients for every encoder then decoder parameter."""
    b = model.bottleneck
    enc_tape, dec_tape = GradientTape(), GradientTape()
    h = model.encoder.forward(x_norm, enc_tape)
    mu, logvar = _split_head(h, b)
    std = np.exp(logvar / 2)
    z = mu + std * noise
    x_hat = model.decoder.forward(z, dec_tape)
    loss = elbo_loss(x_norm, x_hat, mu, logvar, beta)
    d_xhat, d_mu, d_logvar = elbo_grads(x_norm, x_hat, mu, logvar, beta)
    dec_grads, dz = backward(dec_tape, d_xhat.astype(x_hat.dtype, copy=False))
    d_h = np.concatenate([d_mu + dz, d_logvar + dz * noise * std * 0.5], axis=-1)
    enc_grads, _ = backward(enc_tape, d_h.astype(h.dtype, copy=False), input_grad=False)
    return loss, flatten_grads(enc_grads) + flatten_grads(dec_grads)


def channel_minmax(x: np.ndarray, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel min-max normalization vectors for rows laid out channel-major."""
    n, d = x.shape
    blocks = x.reshape(n, channels, d // channels)
    lo = blocks.min(axis=(0, 2))
    hi = blocks.max(axis=(0, 2))
    span = np.where(hi > lo, hi - lo, 1.0)
    offset = np.repeat(lo, d // channels).astype(np.float32)
    scale = np.repeat(span, d // channels).astype(np.float32)
    return offset, scale


def fit_vae(x: np.ndarray, kind: str, config: VaeConfig, channels: int = 1) -> VaeModel:
    """Train a VAE on the rows of ``x`` with Adamax; returns the best epoch's parameters."""
    if len(x) == 0:
        raise ValueError("training set is empty")
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(derive_seed(config.seed, 0))
    if kind == "amplitude":
        offset, scale = channel_minmax(x, channels)
    else:
        offset, scale = None, None
    model = VaeModel.init(x.shape[1], kind, config, rng, offset, scale)
    model.training_meta = {
        "seed": int(config.seed),
        "epochs": int(config.epochs),
        "batch_size": int(config.batch_size),
        "beta": config.beta,
        "kl_per_element": config.kl_per_element,
        "hidden_widths": list(config.widths()),
        "loss_history": [],
        "best_epoch": None,
    }
    if config.epochs == 0:
        return model

    beta = config.beta / x.shape[1] if config.kl_per_element else config.beta
    xn = model.normalize(x).astype(np.float32)
    params = model.encoder.parameters() + model.decoder.parameters()
    state = AdamaxState.zeros_like(params, config.hyper())
    history: list[dict[str, float]] = []
    best = (math.inf, -1, None)
    for epoch in range(config.epochs):
        erng = np.random.default_rng(derive_seed(config.seed, 1, epoch))
        order = erng.permutation(len(xn))
        sums = np.zeros(3)
        batches = 0
        for i in range(0, len(order), config.batch_size):
            xb = xn[order[i : i + config.batch_size]]
            noise = erng.standard_normal((len(xb), model.bottleneck)).astype(np.float32)
            loss, grads = vae_loss_and_grads(model, xb, noise, beta)
            if not math.isfinite(loss.total):
                raise TrainingDiverged(f"{kind} VAE loss became non-finite at epoch {epoch}, batch {batches}")
            adamax_update_(params, grads, state)
            sums += (loss.reconstruction, loss.kl, loss.total)
            batches += 1
        rec, kl, total = sums / batches
        history.append({"reconstruction": rec, "kl": kl, "total": total})
        if total < best[0]:
            best = (total, epoch, [p.copy() for p in params])
    for p, saved in zip(params, best[2]):
        p[...] = saved
    model.training_meta["loss_history"] = history
    model.training_meta["best_epoch"] = best[1]
    return model


def train_vae(train: Dataset, kind: str, config: VaeConfig) -> VaeModel:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    x = train.amplitude() if kind == "amplitude" else train.phase()
    return fit_vae(x, kind, config, channels=N_ANTENNAS)


def save_vae(model: VaeModel, path: str | os.PathLike) -> None:
    container.write(path, model.named_arrays(), model._meta())


def vae_from_container(arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> VaeModel:
    if meta.get("type") != "vae":
        raise container.CorruptError("checkpoint does not hold a VAE")
    try:
        enc = DenseStack.from_named_arrays(arrays, "encoder", meta["encoder_activations"])
        dec = DenseStack.from_named_arrays(arrays, "decoder", meta["decoder_activations"])
        return VaeModel(
            enc,
            dec,
            int(meta["bottleneck"]),
            int(meta["input_dim"]),
            meta["kind"],
            arrays["norm.offset"],
            arrays["norm.scale"],
            int(meta["version"]),
            meta.get("training_meta", {}),
        )
    except (KeyError, ValueError) as exc:
        raise container.CorruptError(f"VAE checkpoint entries are inconsistent: {exc}") from None


def load_vae(path: str | os.PathLike) -> VaeModel:
    return vae_from_container(*container.read(path))


def awgn_channel(z: np.ndarray, snr_db: float | None, seed: int) -> np.ndarray:
    """Add Gaussian noise at the given SNR (signal power measured over the vector). ``None`` is OFF."""
    z = np.asarray(z)
    if snr_db is None:
        return z.copy()
    zf = z.astype(np.float64)
    power = float(np.mean(zf * zf))
    noise_var = power / 10 ** (snr_db / 10)
    noise = np.random.default_rng(seed).standard_normal(z.shape) * math.sqrt(noise_var)
    return (zf + noise).astype(z.dtype)


@dataclass(frozen=True)
class Channel:
    snr_db: float | None = None
    seed: int = 0

    def apply(self, payload: np.ndarray, index: int) -> np.ndarray:
        return awgn_channel(payload, self.snr_db, derive_seed(self.seed, index))


class Codec(Protocol):
    name: str

    @property
    def transmitted_scalars(self) -> int: ...

    @property
    def payload_bytes(self) -> int: ...

    def versions(self) -> dict[str, int]: ...

    def encode(self, features: np.ndarray) -> np.ndarray: ...

    def decode(self, payload: np.ndarray) -> np.ndarray: ...


class IdentityCodec:
    name = "identity"
    transmitted_scalars = N_FEATURES
    payload_bytes = 4 * N_FEATURES

    def versions(self) -> dict[str, int]:
        return {"identity": 0}

    def encode(self, features: np.ndarray) -> np.ndarray:
        if features.shape != (N_FEATURES,):
            raise ShapeError(f"expected {N_FEATURES} features, got {features.shape}")
        return features.copy()

    def decode(self, payload: np.ndarray) -> np.ndarray:
        return payload.copy()


def identity_codec(x: np.ndarray) -> np.ndarray:
    return np.array(x, copy=True)


def quantizer_codec(x: np.ndarray, bits: int, lo, hi) -> np.ndarray:
    """Round each scalar to the nearest of ``2**bits`` uniform levels spanning ``[lo, hi]``."""
    levels = quantize(x, bits, lo, hi)
    return dequantize(levels, bits, lo, hi)


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1, 16], got {bits}")


def quantize(x: np.ndarray, bits: int, lo, hi) -> np.ndarray:
    _check_bits(bits)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    top = 2**bits - 1
    span = np.where(hi > lo, hi - lo, 1.0)
    t = (np.clip(np.asarray(x, dtype=np.float64), lo, hi) - lo) / span
    return np.rint(t * top)


def dequantize(levels: np.ndarray, bits: int, lo, hi) -> np.ndarray:
    _check_bits(bits)
    t = np.asarray(levels, dtype=np.float64) / (2**bits - 1)
    # written so that t=0 and t=1 reproduce lo and hi exactly
    return np.asarray(lo, dtype=np.float64) * (1 - t) + np.asarray(hi, dtype=np.float64) * t


class QuantizerCodec:
    """Uniform scalar quantizer with per-channel ranges taken from training data."""

    def __init__(self, bits: int, lo: np.ndarray, hi: np.ndarray):
        _check_bits(bits)
        self.bits = bits
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.name = f"quantizer{bits}"

    @classmethod
    def fit(cls, train: Dataset, bits: int) -> "QuantizerCodec":
        f = train.features
        per = f.shape[2] * f.shape[3]
        lo = np.repeat(f.min(axis=(0, 2, 3)).astype(np.float64), per)
        hi = np.repeat(f.max(axis=(0, 2, 3)).astype(np.float64), per)
        return cls(bits, lo, hi)

    @property
    def transmitted_scalars(self) -> int:
        return N_FEATURES

    @property
    def payload_bytes(self) -> int:
        return math.ceil(N_FEATURES * self.bits / 8)

    def versions(self) -> dict[str, int]:
        return {self.name: 0}

    def encode(self, features: np.ndarray) -> np.ndarray:
        return quantize(features, self.bits, self.lo, self.hi).astype(np.float32)

    def decode(self, payload: np.ndarray) -> np.ndarray:
        return dequantize(payload, self.bits, self.lo, self.hi).astype(np.float32)


@dataclass
class CodecPair:
    """One VAE per CSI half; the payload is ``z_amplitude ++ z_phase``."""

    amplitude_model: VaeModel
    phase_model: VaeModel
    amplitude_id: str = "codec_amplitude"
    phase_id: str = "codec_phase"

    def __post_init__(self) -> None:
        if self.amplitude_model.data_kind != "amplitude" or self.phase_model.data_kind != "phase":
            raise ValueError("CodecPair needs an amplitude model and a phase model")
        if self.amplitude_model.bottleneck != self.phase_model.bottleneck:
            raise ValueError("both models of a CodecPair share one bottleneck")

    @property
    def name(self) -> str:
        return f"vae{self.bottleneck}"

    @property
    def bottleneck(self) -> int:
        return self.amplitude_model.bottleneck

    @property
    def transmitted_scalars(self) -> int:
        return 2 * self.bottleneck

    @property
    def payload_bytes(self) -> int:
        return 4 * self.transmitted_scalars

    def versions(self) -> dict[str, int]:
        return {self.amplitude_id: self.amplitude_model.version, self.phase_id: self.phase_model.version}

    def encode(self, features: np.ndarray) -> np.ndarray:
        if features.shape != (N_FEATURES,):
            raise ShapeError(f"expected {N_FEATURES} features, got {features.shape}")
        za = encode(self.amplitude_model, features[:HALF_FEATURES]).z
        zp = encode(self.phase_model, features[HALF_FEATURES:]).z
        return np.concatenate([za, zp])

    def decode(self, payload: np.ndarray) -> np.ndarray:
        b = self.bottleneck
        if payload.shape != (2 * b,):
            raise ShapeError(f"expected payload of {2 * b} scalars, got {payload.shape}")
        return np.concatenate([decode(self.amplitude_model, payload[:b]), decode(self.phase_model, payload[b:])])

    def reconstruct_batch(self, flat: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [
                reconstruct(self.amplitude_model, flat[:, :HALF_FEATURES]),
                reconstruct(self.phase_model, flat[:, HALF_FEATURES:]),
            ],
            axis=1,
        )


def remaining_ratio(pair) -> float:
    """Transmitted scalars over the 13,500 raw feature scalars."""
    return pair.transmitted_scalars / N_FEATURES


def train_codec_pair(train: Dataset, config: VaeConfig) -> CodecPair:
    amp = train_vae(train, "amplitude", config)
    ph = train_vae(train, "phase", replace(config, seed=derive_seed(config.seed, 7)))
    return CodecPair(amp, ph)
