"""Position regression from CSI, a k-NN fingerprint oracle, and error/CDF reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import container
from .codec import Channel, TrainingDiverged
from .csi import N_FEATURES, Dataset, derive_seed
from .nn import AdamaxHyper, AdamaxState, DenseStack, GradientTape, ShapeError, adamax_update_, backward, flatten_grads


@dataclass
class LocalizerConfig:
    hidden_widths: tuple[int, ...] = (256, 64)
    activation: str = "relu"
    epochs: int = 50
    batch_size: int = 64
    alpha: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0


@dataclass
class LocalizerModel:
    stack: DenseStack
    feat_mean: np.ndarray
    feat_std: np.ndarray
    label_mean: np.ndarray
    label_std: np.ndarray
    room: tuple[float, float]
    training_meta: dict[str, Any] = field(default_factory=dict)
    version: int = 1

    def predict(self, features: np.ndarray) -> tuple[float, float]:
        return predict(self, features)

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        # one row at a time keeps results bit-identical to single predictions
        return np.array([predict(self, row) for row in features], dtype=np.float64).reshape(-1, 2)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.stack.named_arrays("stack")
        out.update(
            {
                "norm.feat_mean": self.feat_mean,
                "norm.feat_std": self.feat_std,
                "norm.label_mean": self.label_mean,
                "norm.label_std": self.label_std,
            }
        )
        return out

    def meta(self) -> dict[str, Any]:
        return {
            "type": "localizer",
            "activations": self.stack.activations,
            "room": list(self.room),
            "version": self.version,
            "training_meta": self.training_meta,
        }


def _standardize_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0, dtype=np.float64)
    std = x.std(axis=0, dtype=np.float64)
    std = np.where(std > 1e-8, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def train_localizer(
    train: Dataset, config: LocalizerConfig, features: np.ndarray | None = None
) -> LocalizerModel:
    """Fit the regressor; ``features`` replaces ``train``'s raw CSI (e.g. reconstructions)."""
    x = train.flat() if features is None else np.asarray(features, dtype=np.float32)
    y = train.labels.astype(np.float32)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if x.shape != (len(y), N_FEATURES):
        raise ShapeError(f"features must be [{len(y)}, {N_FEATURES}], got {x.shape}")
    rng = np.random.default_rng(derive_seed(config.seed, 0))
    fm, fs = _standardize_stats(x)
    lm, ls = _standardize_stats(y)
    stack = DenseStack.build((N_FEATURES, *config.hidden_widths, 2), rng, config.activation)
    model = LocalizerModel(
        stack,
        fm,
        fs,
        lm,
        ls,
        (train.scene.width, train.scene.length),
        {"seed": int(config.seed), "epochs": config.epochs, "batch_size": config.batch_size, "loss_history": []},
    )
    if config.epochs == 0:
        return model

    xn = ((x - fm) / fs).astype(np.float32)
    yn = ((y - lm) / ls).astype(np.float32)
    params = stack.parameters()
    state = AdamaxState.zeros_like(params, AdamaxHyper(config.alpha, config.beta1, config.beta2, config.epsilon))
    history = []
    best = (math.inf, -1, None)
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(config.seed, 1, epoch)).permutation(len(xn))
        total, batches = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            tape = GradientTape()
            out = stack.forward(xn[idx], tape)
            diff = out - yn[idx]
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"localizer loss became non-finite at epoch {epoch}, batch {batches}")
            grads, _ = backward(tape, (2.0 / diff.size) * diff, input_grad=False)
            adamax_update_(params, flatten_grads(grads), state)
            total += loss
            batches += 1
        history.append(total / batches)
        if history[-1] < best[0]:
            best = (history[-1], epoch, [p.copy() for p in params])
    for p, saved in zip(params, best[2]):
        p[...] = saved
    model.training_meta["loss_history"] = history
    model.training_meta["best_epoch"] = best[1]
    return model


def predict(model: LocalizerModel, features: np.ndarray) -> tuple[float, float]:
    features = np.asarray(features)
    if features.shape != (N_FEATURES,):
        raise ShapeError(f"expected {N_FEATURES} features, got {features.shape}")
    xn = ((features - model.feat_mean) / model.feat_std).astype(np.float32)
    out = model.stack.forward(xn).astype(np.float64) * model.label_std + model.label_mean
    w, length = model.room
    return float(np.clip(out[0], 0.0, w)), float(np.clip(out[1], 0.0, length))


def save_localizer(model: LocalizerModel, path: str | os.PathLike) -> None:
    container.write(path, model.named_arrays(), model.meta())


def localizer_from_container(arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> LocalizerModel:
    if meta.get("type") != "localizer":
        raise container.CorruptError("checkpoint does not hold a localizer")
    try:
        return LocalizerModel(
            DenseStack.from_named_arrays(arrays, "stack", meta["activations"]),
            arrays["norm.feat_mean"],
            arrays["norm.feat_std"],
            arrays["norm.label_mean"],
            arrays["norm.label_std"],
            tuple(meta["room"]),
            meta.get("training_meta", {}),
            int(meta.get("version", 1)),
        )
    except (KeyError, ValueError) as exc:
        raise container.CorruptError(f"localizer checkpoint entries are inconsistent: {exc}") from None


def load_localizer(path: str | os.PathLike) -> LocalizerModel:
    return localizer_from_container(*container.read(path))


def knn_localize(train: Dataset, query: np.ndarray, k: int = 5) -> tuple[float, float]:
    """Mean label of the ``k`` nearest training samples; ties go to the lower index."""
    n = len(train)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    flat = train.flat()
    d = np.empty(n)
    for i in range(0, n, 1024):
        diff = flat[i : i + 1024].astype(np.float64) - q
        d[i : i + 1024] = np.einsum("ij,ij->i", diff, diff)
    nearest = np.argsort(d, kind="stable")[:k]
    lab = train.labels[nearest].astype(np.float64).mean(axis=0)
    return float(lab[0]), float(lab[1])


class KnnOracle:
    """Batched k-NN over a fixed training set (squared distances via one GEMM per chunk)."""

    def __init__(self, train: Dataset, k: int = 5):
        if not 1 <= k <= len(train):
            raise ValueError(f"k must lie in [1, {len(train)}], got {k}")
        self.train = train
        self.k = k
        self._flat = train.flat()
        self._norms = np.einsum("ij,ij->i", self._flat, self._flat, dtype=np.float64)

    def predict(self, features: np.ndarray) -> tuple[float, float]:
        return knn_localize(self.train, features, self.k)

    def predict_batch(self, features: np.ndarray, chunk: int = 256) -> np.ndarray:
        out = np.empty((len(features), 2))
        labels = self.train.labels.astype(np.float64)
        for i in range(0, len(features), chunk):
            q = np.asarray(features[i : i + chunk], dtype=np.float32)
            qn = np.einsum("ij,ij->i", q, q, dtype=np.float64)
            d = self._norms[None, :] - 2.0 * (q @ self._flat.T).astype(np.float64) + qn[:, None]
            nearest = np.argsort(d, axis=1, kind="stable")[:, : self.k]
            out[i : i + chunk] = labels[nearest].mean(axis=1)
        return out


@dataclass
class ErrorReport:
    errors: np.ndarray
    predictions: np.ndarray | None = None
    truth: np.ndarray | None = None
    name: str = "report"

    def __post_init__(self) -> None:
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if self.errors.size == 0:
            raise ValueError("an error report needs at least one sample")

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.errors, q))

    @property
    def p50(self) -> float:
        return self.percentile(50)

    @property
    def p90(self) -> float:
        return self.percentile(90)

    @property
    def cdf(self) -> list[tuple[float, float]]:
        e = np.sort(self.errors)
        n = len(e)
        return [(float(v), (i + 1) / n) for i, v in enumerate(e)]

    def cdf_at(self, value: float) -> float:
        return float(np.count_nonzero(self.errors <= value) / len(self.errors))

    def summary(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "n": int(len(self.errors)),
            "mean_error_m": self.mean,
            "p50_m": self.p50,
            "p90_m": self.p90,
        }

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "true_x", "true_y", "pred_x", "pred_y", "error_m"])
        for i, err in enumerate(self.errors):
            t = self.truth[i] if self.truth is not None else (math.nan, math.nan)
            p = self.predictions[i] if self.predictions is not None else (math.nan, math.nan)
            w.writerow([i, repr(float(t[0])), repr(float(t[1])), repr(float(p[0])), repr(float(p[1])), repr(float(err))])
        return buf.getvalue()

    def cdf_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["error_m", "fraction"])
        for v, frac in self.cdf:
            w.writerow([repr(v), repr(frac)])
        return buf.getvalue()

    def summary_jsonl(self) -> str:
        return json.dumps(self.summary(), sort_keys=True) + "\n"

    @classmethod
    def from_per_sample_csv(cls, text: str, name: str = "report") -> "ErrorReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        truth = np.array([[float(r["true_x"]), float(r["true_y"])] for r in rows])
        pred = np.array([[float(r["pred_x"]), float(r["pred_y"])] for r in rows])
        return cls(np.array([float(r["error_m"]) for r in rows]), pred, truth, name)


def error_report(predictions: np.ndarray, truth: np.ndarray, name: str = "report") -> ErrorReport:
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    errors = np.sqrt(((predictions - truth) ** 2).sum(axis=1))
    return ErrorReport(errors, predictions, truth, name)


class Predictor(Protocol):
    def predict(self, features: np.ndarray) -> tuple[float, float]: ...


def pipeline_features(test: Dataset, codec=None, channel: Channel | None = None) -> np.ndarray:
    """Features as seen by the localizer: raw, or encode -> channel -> decode per sample."""
    flat = test.flat()
    if codec is None:
        if channel is None or channel.snr_db is None:
            return flat
        return np.stack([channel.apply(row, i) for i, row in enumerate(flat)])
    out = np.empty(flat.shape, dtype=np.float32)
    for i, row in enumerate(flat):
        payload = codec.encode(row)
        if channel is not None:
            payload = channel.apply(payload, i)
        out[i] = codec.decode(payload)
    return out


def evaluate(
    model: Predictor,
    test: Dataset,
    codec=None,
    channel: Channel | None = None,
    name: str = "report",
) -> ErrorReport:
    if len(test) == 0:
        raise ValueError("test set is empty")
    feats = pipeline_features(test, codec, channel)
    if hasattr(model, "predict_batch"):
        pred = model.predict_batch(feats)
    else:
        pred = np.array([model.predict(row) for row in feats], dtype=np.float64)
    return error_report(pred, test.labels, name)


def report_from_errors(errors: Sequence[float], name: str = "report") -> ErrorReport:
    return ErrorReport(np.asarray(errors, dtype=np.float64), name=name)
