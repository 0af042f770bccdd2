"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

from semoran.codec import VaeConfig, VaeModel, vae_loss_and_grads
from semoran.csi import N_FEATURES
from semoran.nn import DenseStack, GradientTape, backward, finite_difference_grad, flatten_grads
from semoran.sim import ORanSimulation, StaleVersionError, build_topology
from semoran.sim.topology import NodeKind


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _perturbed_loss(params, f):
    """Loss as a function of the parameter vector, writing into the live arrays."""
    sizes = [p.size for p in params]
    offsets = np.cumsum([0, *sizes])

    def loss(theta):
        saved = [p.copy() for p in params]
        for p, lo, hi in zip(params, offsets[:-1], offsets[1:]):
            p[...] = theta[lo:hi].reshape(p.shape)
        try:
            return f()
        finally:
            for p, s in zip(params, saved):
                p[...] = s

    return loss, np.concatenate([p.ravel() for p in params])


def dense_gradient_trial(seed: int) -> float:
    """Worst relative error between analytic and numeric gradients for one random tiny stack."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(1, 9, size=depth + 1)]
    act = ("tanh", "relu", "identity")[int(rng.integers(0, 3))]
    stack = DenseStack.build(widths, rng, hidden_activation=act, output_activation="tanh", dtype=np.float64)
    # non-zero biases keep pre-activations off the ReLU kink at exactly 0
    for layer in stack.layers:
        layer.bias[...] = rng.uniform(-0.5, 0.5, layer.bias.shape)
    x = rng.standard_normal((int(rng.integers(1, 5)), widths[0]))
    target = rng.standard_normal((x.shape[0], widths[-1]))

    def f():
        return float(0.5 * np.sum((stack(x) - target) ** 2))

    tape = GradientTape()
    out = stack.forward(x, tape)
    grads, dx = backward(tape, out - target)
    analytic = np.concatenate([g.ravel() for g in flatten_grads(grads)])
    loss, theta = _perturbed_loss(stack.parameters(), f)
    numeric = finite_difference_grad(loss, theta)

    def f_in(xx):
        return float(0.5 * np.sum((stack(xx) - target) ** 2))

    return max(rel_error(analytic, numeric), rel_error(dx, finite_difference_grad(f_in, x)))


def elbo_gradient_trial(seed: int) -> float:
    """Same check for the full ELBO through encoder, reparameterization and decoder."""
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 9))
    b = int(rng.integers(1, 5))
    hidden = tuple(int(w) for w in rng.integers(2, 9, size=int(rng.integers(1, 3))))
    cfg = VaeConfig(bottleneck=b, hidden_widths=hidden, bottleneck_hidden=False, activation="tanh")
    model = VaeModel.init(dim, "amplitude", cfg, rng)
    model.encoder = model.encoder.astype(np.float64)
    model.decoder = model.decoder.astype(np.float64)
    x = rng.standard_normal((int(rng.integers(1, 5)), dim))
    noise = rng.standard_normal((x.shape[0], b))
    beta = float(rng.uniform(0.1, 2.0))

    loss_value, grads = vae_loss_and_grads(model, x, noise, beta)
    analytic = np.concatenate([g.ravel() for g in grads])
    params = model.encoder.parameters() + model.decoder.parameters()
    loss, theta = _perturbed_loss(params, lambda: vae_loss_and_grads(model, x, noise, beta)[0].total)
    return rel_error(analytic, finite_difference_grad(loss, theta))


class ReferenceAdamax:
    """Scalar-by-scalar Adamax written without numpy vector ops."""

    def __init__(self, theta, alpha=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.theta = [float(v) for v in theta]
        self.m = [0.0] * len(self.theta)
        self.u = [0.0] * len(self.theta)
        self.t = 0
        self.alpha, self.beta1, self.beta2, self.eps = alpha, beta1, beta2, eps

    def step(self, grad):
        self.t += 1
        lr = self.alpha / (1.0 - math.pow(self.beta1, self.t))
        for i, g in enumerate(grad):
            g = float(g)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.u[i] = max(self.beta2 * self.u[i], abs(g))
            self.theta[i] = self.theta[i] - lr * self.m[i] / (self.u[i] + self.eps)
        return list(self.theta)


# --- model lifecycle property harness -----------------------------------------


class StubModel:
    """Stand-in for a trained codec half; only its version matters."""

    def __init__(self, tag: str):
        self.tag = tag
        self.version = 0

    def checksum(self) -> str:
        return f"{self.tag}-{self.version}"


class VersionProbeCodec:
    """Puts the encoder versions on the wire and flags any decode with different versions."""

    violations: list[tuple] = []

    def __init__(self, models):
        self.amp = models["codec_amplitude"].version
        self.ph = models["codec_phase"].version

    def encode(self, features):
        return np.array([self.amp, self.ph], dtype=np.float32)

    def decode(self, payload):
        if (int(payload[0]), int(payload[1])) != (self.amp, self.ph):
            VersionProbeCodec.violations.append((tuple(payload), (self.amp, self.ph)))
        return np.zeros(N_FEATURES, dtype=np.float32)


class StubLocalizer:
    version = 0

    def predict(self, features):
        return (0.0, 0.0)


def lifecycle_trial(seed: int, steps: int = 25) -> dict:
    """Random interleaving of model updates, stale redeploys and requests; returns counters.

    Raises AssertionError on any safety violation.
    """
    rng = np.random.default_rng(seed)
    VersionProbeCodec.violations = []
    sim = ORanSimulation(build_topology(), ("codec_amplitude", "codec_phase"), VersionProbeCodec)
    topo = sim.topology
    engine = topo.first(NodeKind.SEMANTIC_ENGINE)
    ue, decoder = topo.first(NodeKind.UE_EDGE), topo.first(NodeKind.CU_SP)
    loc = sim.registry.register("localizer", "localizer", StubLocalizer())
    sim.deploy_model(engine, topo.first(NodeKind.NEAR_RT_RIC), loc)
    sent: dict[tuple[str, str], int] = {}
    counts = {"requests": 0, "stale_rejected": 0, "deploys": 0}
    features = np.zeros(N_FEATURES, dtype=np.float32)

    for _ in range(steps):
        action = rng.integers(0, 4)
        if action == 0:
            model_id = ("codec_amplitude", "codec_phase")[int(rng.integers(0, 2))]
            entry = sim.registry.register(model_id, model_id, StubModel(model_id))
            for target in (ue, decoder):
                if rng.random() < 0.7:
                    sim.deploy_model(engine, target, entry)
                    sent[(target, model_id)] = entry.version
                    counts["deploys"] += 1
        elif action == 1 and sent:
            target, model_id = list(sent)[int(rng.integers(0, len(sent)))]
            old = sim.registry.entries[model_id][int(rng.integers(0, sent[(target, model_id)]))]
            before = len(sim.trace)
            pending = sim.queue.pending
            try:
                sim.deploy_model(engine, target, old)
            except StaleVersionError:
                counts["stale_rejected"] += 1
                assert len(sim.trace) == before and sim.queue.pending == pending
            else:
                raise AssertionError("stale redeploy was accepted")
        elif action == 2:
            if all(m in sim.nodes[ue].active for m in sim.codec_models):
                sim.inject_localization_request(ue, features)
                counts["requests"] += 1
        sim.run(sim.now + int(rng.integers(0, 30_000)))
    sim.run()

    for model_id, history in sim.registry.entries.items():
        versions = [e.version for e in history]
        assert all(b > a for a, b in zip(versions, versions[1:])), versions
    assert not VersionProbeCodec.violations, VersionProbeCodec.violations
    enc = {e["cid"]: e["versions"] for e in sim.trace.select("ENCODE")}
    decoded = {}
    for e in sim.trace.select("DECODE"):
        assert e["versions"] == enc[e["cid"]]
        decoded[e["cid"]] = e["t"]
    failures = {e["cid"] for e in sim.trace.select("SEMANTIC_DECODE_FAILURE")}
    for e in sim.trace.select("LOC_RESULT"):
        assert e["cid"] in decoded and decoded[e["cid"]] <= e["t"]
        assert e["cid"] not in failures
    assert len(sim.trace.select("LOC_RESULT")) + len(failures) == counts["requests"]
    counts["mismatches"] = len(failures)
    return counts
