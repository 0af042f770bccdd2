"""Dense layer stacks with hand-written backprop and the Adamax optimizer.

Arrays are plain numpy arrays. Training runs in float32; gradient checks
run the same code in float64 (cast the stack with :meth:`DenseStack.astype`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if name == "identity":
        return upstream
    if name == "relu":
        return upstream * (z > 0)
    if name == "tanh":
        return upstream * (1 - a * a)
    raise ValueError(f"unknown activation {name!r}")


_ALIGN = 64


def aligned(a: np.ndarray) -> np.ndarray:
    """C-contiguous array whose data starts on a 64-byte boundary.

    OpenBLAS picks its kernel path partly from operand addresses, so two
    bit-identical weight arrays at different offsets can produce results that
    differ in the last bit. Pinning parameter storage to one alignment keeps
    a reloaded checkpoint numerically identical to the model that was saved.
    """
    if a.flags.c_contiguous and a.ctypes.data % _ALIGN == 0 and a.flags.writeable:
        return a
    buf = np.empty(a.nbytes + _ALIGN, dtype=np.uint8)
    start = (-buf.ctypes.data) % _ALIGN
    out = buf[start : start + a.nbytes].view(a.dtype).reshape(a.shape)
    out[...] = a
    return out


@dataclass
class DenseLayer:
    """y = activation(W x + b) with W stored as [out, in]."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        self.weights = aligned(self.weights)
        self.bias = aligned(self.bias)

    @classmethod
    def init(
        cls,
        in_features: int,
        out_features: int,
        activation: str,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "DenseLayer":
        # Glorot-uniform weights, zero bias
        limit = math.sqrt(6.0 / (in_features + out_features))
        w = rng.uniform(-limit, limit, size=(out_features, in_features)).astype(dtype)
        return cls(w, np.zeros(out_features, dtype=dtype), activation)

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.bias.astype(dtype), self.activation)


def _linear(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != layer.in_features:
        raise ShapeError(
            f"input width {x.shape[-1]} does not match layer input width {layer.in_features}"
        )
    if x.ndim == 1:
        # route single vectors through the same GEMM path as batches of one
        return (x[None, :] @ layer.weights.T + layer.bias)[0]
    return x @ layer.weights.T + layer.bias


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Apply one layer to a vector ``[in]`` or a batch ``[n, in]``."""
    return _activate(layer.activation, _linear(layer, x))


@dataclass
class GradientTape:
    """Forward values of one pass through a layer stack, consumed by :func:`backward`."""

    layers: list[DenseLayer] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False

    def record(self, layer: DenseLayer, x: np.ndarray, z: np.ndarray, a: np.ndarray) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        self.layers.append(layer)
        self.inputs.append(x)
        self.preacts.append(z)
        self.outputs.append(a)


def forward(layers: Sequence[DenseLayer], x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
    for layer in layers:
        z = _linear(layer, x)
        a = _activate(layer.activation, z)
        if tape is not None:
            tape.record(layer, x, z, a)
        x = a
    return x


def backward(
    tape: GradientTape, loss_grad: np.ndarray, input_grad: bool = True
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray | None]:
    """Backpropagate ``dL/d(output)`` through the recorded pass.

    Returns ``([(dW, db) per layer], dL/d(input))``; the input gradient is
    ``None`` when ``input_grad`` is false. A tape supports exactly one
    backward pass.
    """
    if not tape.layers:
        raise TapeError("backward called without a recorded forward pass")
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass")
    tape.consumed = True

    if loss_grad.shape != tape.outputs[-1].shape:
        raise ShapeError(
            f"loss gradient shape {loss_grad.shape} != output shape {tape.outputs[-1].shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    upstream = loss_grad
    upstream_needed = len(tape.layers)
    for layer, x, z, a in zip(
        reversed(tape.layers), reversed(tape.inputs), reversed(tape.preacts), reversed(tape.outputs)
    ):
        upstream_needed -= 1
        dz = _activation_grad(layer.activation, z, a, upstream)
        if dz.ndim == 1:
            dw = np.outer(dz, x)
            db = dz.copy()
        else:
            dw = dz.T @ x
            db = dz.sum(axis=0)
        grads.append((dw, db))
        upstream = dz @ layer.weights if (upstream_needed or input_grad) else None
    grads.reverse()
    return grads, upstream


class DenseStack:
    """An ordered list of dense layers trained as one unit."""

    def __init__(self, layers: Sequence[DenseLayer]):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ShapeError(
                    f"layer widths do not chain: {prev.out_features} -> {nxt.in_features}"
                )
        self.layers = list(layers)

    @classmethod
    def build(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        dtype=np.float32,
    ) -> "DenseStack":
        layers = []
        n = len(widths) - 1
        for i in range(n):
            act = output_activation if i == n - 1 else hidden_activation
            layers.append(DenseLayer.init(widths[i], widths[i + 1], act, rng, dtype))
        return cls(layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
        return forward(self.layers, x, tape)

    __call__ = forward

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def astype(self, dtype) -> "DenseStack":
        return DenseStack([layer.astype(dtype) for layer in self.layers])

    def copy(self) -> "DenseStack":
        return self.astype(self.layers[0].weights.dtype)

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weights
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    @classmethod
    def from_named_arrays(
        cls, arrays: dict[str, np.ndarray], prefix: str, activations: Sequence[str]
    ) -> "DenseStack":
        layers = [
            DenseLayer(arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"], act)
            for i, act in enumerate(activations)
        ]
        return cls(layers)

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    out = []
    for dw, db in grads:
        out.extend((dw, db))
    return out


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2 * eps)
    return grad


@dataclass(frozen=True)
class AdamaxHyper:
    alpha: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamaxState:
    """Step count plus per-parameter first moment and infinity norm."""

    t: int
    m: list[np.ndarray]
    u: list[np.ndarray]
    hyper: AdamaxHyper = AdamaxHyper()

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], hyper: AdamaxHyper = AdamaxHyper()) -> "AdamaxState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], hyper)

    def copy(self) -> "AdamaxState":
        return AdamaxState(self.t, [m.copy() for m in self.m], [u.copy() for u in self.u], self.hyper)


def adamax_update_(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamaxState) -> None:
    """In-place Adamax step over a list of parameters sharing one step counter."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    h = state.hyper
    state.t += 1
    step = h.alpha / (1 - h.beta1**state.t)
    for p, g, m, u in zip(params, grads, state.m, state.u):
        m *= h.beta1
        m += (1 - h.beta1) * g
        np.maximum(h.beta2 * u, np.abs(g), out=u)
        p -= (step * m / (u + h.epsilon)).astype(p.dtype, copy=False)


def adamax_step(
    params: np.ndarray, grads: np.ndarray, state: AdamaxState
) -> tuple[np.ndarray, AdamaxState]:
    """Functional single-array Adamax step; inputs are left untouched."""
    new_params = np.array(params, copy=True)
    new_state = state.copy()
    if not new_state.m:
        new_state.m = [np.zeros_like(new_params)]
        new_state.u = [np.zeros_like(new_params)]
    adamax_update_([new_params], [np.asarray(grads)], new_state)
    return new_params, new_state
