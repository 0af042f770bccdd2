"""Semantic-aware RAN simulation: model lifecycle and the remote-localization flow.

A localization request travels UE -> O_RU -> O_DU -> CU_SP -> S_RIC -> NEAR_RT_RIC.
The UE encodes its CSI, the UE -> O_RU hop passes through the AWGN channel,
CU_SP decodes with its deployed decoder versions and NEAR_RT_RIC predicts the
position. With ``decode_at="O_DU"`` the O-DU decodes and forwards straight to
the S-RIC over its direct link.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from ..codec import Channel, IdentityCodec
from ..csi import N_FEATURES, CsiSample
from .engine import EventQueue, EventTrace
from .topology import NodeKind, Topology, TopologyError, link_name

MESSAGE_KINDS = ("SEMANTIC_PAYLOAD", "MODEL_DEPLOY", "MODEL_ACK", "LOC_RESULT", "TELEMETRY", "CONTROL")
MODEL_KINDS = ("codec_amplitude", "codec_phase", "localizer")
ACK_BYTES = 64
FEATURE_BYTES = 4 * N_FEATURES


class StaleVersionError(ValueError):
    pass


class RegistryError(ValueError):
    pass


@dataclass
class SimMessage:
    kind: str
    payload_bytes: int
    correlation_id: int
    hop_path: list[str] = field(default_factory=list)
    body: Any = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.kind == "SEMANTIC_PAYLOAD" and self.payload_bytes <= 0:
            raise ValueError("semantic payloads carry at least one byte")
        if isinstance(self.body, np.ndarray):
            self.body.setflags(write=False)


@dataclass
class ModelRegistryEntry:
    model_id: str
    version: int
    kind: str
    checksum: str
    size_bytes: int
    deployed_at: set[str] = field(default_factory=set)


class ModelRegistry:
    """Knowledge-base model store: versions strictly increase per model id."""

    def __init__(self) -> None:
        self.entries: dict[str, list[ModelRegistryEntry]] = {}
        self._objects: dict[tuple[str, int], Any] = {}

    def register(
        self, model_id: str, kind: str, obj: Any, checksum: str | None = None, size_bytes: int | None = None
    ) -> ModelRegistryEntry:
        if kind not in MODEL_KINDS:
            raise RegistryError(f"model kind must be one of {MODEL_KINDS}")
        history = self.entries.setdefault(model_id, [])
        if history and history[-1].kind != kind:
            raise RegistryError(f"{model_id} is registered as {history[-1].kind}, not {kind}")
        version = history[-1].version + 1 if history else 1
        if hasattr(obj, "version"):
            obj.version = version
        if checksum is None:
            checksum = obj.checksum() if hasattr(obj, "checksum") else hashlib.sha256(repr(obj).encode()).hexdigest()
        if size_bytes is None:
            size_bytes = _model_bytes(obj)
        entry = ModelRegistryEntry(model_id, version, kind, checksum, size_bytes)
        history.append(entry)
        self._objects[(model_id, version)] = obj
        return entry

    def get(self, model_id: str, version: int) -> Any:
        try:
            return self._objects[(model_id, version)]
        except KeyError:
            raise RegistryError(f"no {model_id} v{version} in the registry") from None

    def latest(self, model_id: str) -> ModelRegistryEntry:
        if not self.entries.get(model_id):
            raise RegistryError(f"unknown model {model_id!r}")
        return self.entries[model_id][-1]


def _model_bytes(obj: Any) -> int:
    if hasattr(obj, "named_arrays"):
        return int(sum(4 * a.size for a in obj.named_arrays().values()))
    return 1024


@dataclass
class NodeState:
    node_id: str
    kind: NodeKind
    active: dict[str, int] = field(default_factory=dict)
    # highest version sent toward this node per model, deployed or in flight
    committed: dict[str, int] = field(default_factory=dict)


@dataclass
class LocResult:
    correlation_id: int
    position: tuple[float, float]
    time_us: int
    hop_path: list[str]


CodecFactory = Callable[[Mapping[str, Any]], Any]


def identity_factory(models: Mapping[str, Any]) -> IdentityCodec:
    return IdentityCodec()


def vae_pair_factory(models: Mapping[str, Any]):
    from ..codec import CodecPair

    return CodecPair(models["codec_amplitude"], models["codec_phase"])


class ORanSimulation:
    def __init__(
        self,
        topology: Topology,
        codec_models: tuple[str, ...] = (),
        codec_factory: CodecFactory = identity_factory,
        channel: Channel | None = None,
        decode_at: str = "CU_SP",
        localizer_id: str = "localizer",
    ):
        if decode_at not in ("CU_SP", "O_DU"):
            raise ValueError("decode_at must be CU_SP or O_DU")
        self.topology = topology
        self.queue = EventQueue()
        self.registry = ModelRegistry()
        self.nodes = {n: NodeState(n, k) for n, k in topology.nodes.items()}
        self.codec_models = tuple(codec_models)
        self.codec_factory = codec_factory
        self.channel = channel or Channel(None)
        self.decode_at = decode_at
        self.localizer_id = localizer_id
        self.results: dict[int, LocResult] = {}
        self.bytes_emitted = 0
        self._next_cid = 0
        self._busy: dict[tuple[str, str], int] = {}
        self._route = self._localization_route()
        self._decoder = self._route[2] if decode_at == "CU_SP" else self._route[1]

    @property
    def trace(self) -> EventTrace:
        return self.queue.trace

    @property
    def now(self) -> int:
        return self.queue.now

    def _record(self, node: str, event: str, **fields: Any) -> None:
        self.trace.record(self.now, node, event, **fields)

    def _localization_route(self) -> list[str]:
        t = self.topology
        decoder = t.first(NodeKind.CU_SP) if self.decode_at == "CU_SP" else t.first(NodeKind.O_DU)
        tail = [t.first(NodeKind.S_RIC), t.first(NodeKind.NEAR_RT_RIC)]
        head = [t.first(NodeKind.O_RU), t.first(NodeKind.O_DU)]
        route = head + ([decoder] if self.decode_at == "CU_SP" else []) + tail
        for a, b in zip(route, route[1:]):
            t.link(a, b)
        return route

    # --- transport -------------------------------------------------------

    def _send(self, src: str, dst: str, msg: SimMessage, on_arrival: Callable[[str, SimMessage], None]) -> None:
        link = self.topology.link(src, dst)
        tx = link.transmission_us(msg.payload_bytes)
        start = max(self.now, self._busy.get((src, dst), 0))
        self._busy[(src, dst)] = start + tx
        arrival = start + tx + link.latency_us
        self.bytes_emitted += msg.payload_bytes
        self._record(
            src,
            "SEND",
            kind=msg.kind,
            cid=msg.correlation_id,
            to=dst,
            link=link_name(src, dst),
            interface=link.interface.value,
            bytes=msg.payload_bytes,
        )
        self.queue.schedule(arrival, self._arrive, dst, msg, on_arrival)

    def _arrive(self, node: str, msg: SimMessage, on_arrival: Callable[[str, SimMessage], None]) -> None:
        msg.hop_path.append(node)
        self._record(node, "RECV", kind=msg.kind, cid=msg.correlation_id, bytes=msg.payload_bytes)
        on_arrival(node, msg)

    def _forward_along(self, path: list[str], msg: SimMessage, at_end: Callable[[str, SimMessage], None]) -> None:
        """Relay ``msg`` hop by hop from ``path[0]``; ``at_end`` runs at the last node."""

        def hop(node: str, m: SimMessage) -> None:
            i = path.index(node)
            if i == len(path) - 1:
                at_end(node, m)
            else:
                self._send(node, path[i + 1], m, hop)

        self._send(path[0], path[1], msg, hop)

    # --- model lifecycle --------------------------------------------------

    def deploy_model(self, engine: str, target: str, entry: ModelRegistryEntry) -> int:
        """Schedule MODEL_DEPLOY to ``target`` and its MODEL_ACK back. Returns the correlation id."""
        if self.topology.nodes.get(engine) != NodeKind.SEMANTIC_ENGINE:
            raise TopologyError(f"{engine} is not a SEMANTIC_ENGINE node")
        if target not in self.nodes:
            raise TopologyError(f"unknown target {target}")
        state = self.nodes[target]
        current = state.committed.get(entry.model_id, 0)
        if entry.version <= current:
            raise StaleVersionError(
                f"{entry.model_id} v{entry.version} is not newer than v{current} at {target}"
            )
        path = self.topology.path(engine, target)
        state.committed[entry.model_id] = entry.version
        cid = self._new_cid()
        msg = SimMessage(
            "MODEL_DEPLOY",
            entry.size_bytes,
            cid,
            [engine],
            meta={"model_id": entry.model_id, "version": entry.version},
        )
        self._record(engine, "DEPLOY_START", cid=cid, target=target, model_id=entry.model_id, version=entry.version)

        def installed(node: str, m: SimMessage) -> None:
            state.active[entry.model_id] = entry.version
            entry.deployed_at.add(node)
            self._record(node, "MODEL_DEPLOY", cid=cid, model_id=entry.model_id, version=entry.version)
            ack = SimMessage("MODEL_ACK", ACK_BYTES, cid, [node], meta=dict(m.meta))
            self._forward_along(path[::-1], ack, acked)

        def acked(node: str, m: SimMessage) -> None:
            self._record(node, "MODEL_ACK", cid=cid, target=target, model_id=entry.model_id, version=entry.version)

        if len(path) == 1:
            installed(target, msg)
        else:
            self._forward_along(path, msg, installed)
        return cid

    def _new_cid(self) -> int:
        cid = self._next_cid
        self._next_cid += 1
        return cid

    def _codec_at(self, node: str) -> tuple[Any, dict[str, int]]:
        active = self.nodes[node].active
        missing = [m for m in self.codec_models if m not in active]
        if missing:
            raise RegistryError(f"{node} has no deployed {', '.join(missing)}")
        versions = {m: active[m] for m in self.codec_models}
        models = {m: self.registry.get(m, v) for m, v in versions.items()}
        return self.codec_factory(models), versions

    # --- localization flow ------------------------------------------------

    def inject_localization_request(
        self, ue: str, sample: CsiSample | np.ndarray, at: int | None = None, channel_index: int | None = None
    ) -> int:
        """Schedule one request from ``ue``; returns its correlation id.

        The channel noise stream is keyed by ``channel_index`` (default: the
        correlation id).
        """
        if self.topology.nodes.get(ue) != NodeKind.UE_EDGE:
            raise TopologyError(f"{ue} is not a UE_EDGE node")
        self._codec_at(ue)
        features = sample.flat if isinstance(sample, CsiSample) else np.asarray(sample).reshape(-1)
        if features.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} features, got {features.shape}")
        features = np.array(features, dtype=np.float32)
        cid = self._new_cid()
        key = cid if channel_index is None else channel_index
        self.queue.schedule(self.now if at is None else at, self._start_request, ue, features, cid, key)
        return cid

    def _start_request(self, ue: str, features: np.ndarray, cid: int, key: int) -> None:
        codec, versions = self._codec_at(ue)
        payload = codec.encode(features)
        self._record(ue, "ENCODE", cid=cid, scalars=int(payload.size), versions=versions)
        payload = self.channel.apply(payload, key)
        msg = SimMessage(
            "SEMANTIC_PAYLOAD",
            4 * int(payload.size),
            cid,
            [ue],
            body=payload,
            meta={"versions": versions, "decoded": False},
        )
        path = [ue, *self._route]
        self._send(ue, path[1], msg, lambda node, m: self._relay(path, node, m))

    def _relay(self, path: list[str], node: str, msg: SimMessage) -> None:
        if node == self._decoder and not msg.meta["decoded"]:
            if not self._decode(node, msg):
                return
        i = path.index(node)
        if i == len(path) - 1:
            self._at_ric(node, msg)
        else:
            self._send(node, path[i + 1], msg, lambda n, m: self._relay(path, n, m))

    def _decode(self, node: str, msg: SimMessage) -> bool:
        sent = msg.meta["versions"]
        active = self.nodes[node].active
        mine = {m: active.get(m) for m in self.codec_models}
        if mine != sent:
            self._record(node, "SEMANTIC_DECODE_FAILURE", cid=msg.correlation_id, encoder_versions=sent,
                         decoder_versions={m: v for m, v in mine.items() if v is not None})
            return False
        codec, versions = self._codec_at(node)
        msg.body = codec.decode(msg.body)
        msg.body.setflags(write=False)
        msg.payload_bytes = FEATURE_BYTES
        msg.meta["decoded"] = True
        self._record(node, "DECODE", cid=msg.correlation_id, versions=versions)
        return True

    def _at_ric(self, node: str, msg: SimMessage) -> None:
        if not msg.meta.get("decoded"):
            raise AssertionError("semantic payload reached the RIC undecoded")
        model_v = self.nodes[node].active.get(self.localizer_id)
        if model_v is None:
            self._record(node, "LOCALIZATION_FAILURE", cid=msg.correlation_id, reason="no localizer deployed")
            return
        model = self.registry.get(self.localizer_id, model_v)
        x, y = model.predict(msg.body)
        self.results[msg.correlation_id] = LocResult(msg.correlation_id, (x, y), self.now, list(msg.hop_path))
        self._record(
            node,
            "LOC_RESULT",
            cid=msg.correlation_id,
            x=x,
            y=y,
            hop_path=list(msg.hop_path),
            localizer_version=model_v,
        )

    def run(self, until: int | None = None) -> EventTrace:
        return self.queue.run(until)


def bandwidth_report(
    trace: EventTrace, link: str | tuple[str, str], topology: Topology, kinds: tuple[str, ...] | None = None
) -> int:
    """Total payload bytes sent over ``link`` (either direction) in ``trace``.

    ``kinds`` restricts the count to those message kinds, e.g.
    ``("SEMANTIC_PAYLOAD",)`` to leave model deployments out.
    """
    a, b = link.split("<->") if isinstance(link, str) else link
    topology.link(a, b)
    name = link_name(a, b)
    return sum(
        e["bytes"] for e in trace.select("SEND") if e["link"] == name and (kinds is None or e["kind"] in kinds)
    )


def bytes_by_link(trace: EventTrace) -> dict[str, int]:
    out: dict[str, int] = {}
    for e in trace.select("SEND"):
        out[e["link"]] = out.get(e["link"], 0) + e["bytes"]
    return dict(sorted(out.items()))


def deploy_all(sim: ORanSimulation, models: Mapping[str, tuple[str, Any]]) -> list[int]:
    """Register ``{model_id: (kind, obj)}`` and push codecs to every UE and the decoder, the localizer to the RIC."""
    t = sim.topology
    engine = t.first(NodeKind.SEMANTIC_ENGINE)
    ric = t.first(NodeKind.NEAR_RT_RIC)
    cids = []
    for model_id, (kind, obj) in models.items():
        entry = sim.registry.register(model_id, kind, obj)
        targets = [ric] if kind == "localizer" else [*t.of_kind(NodeKind.UE_EDGE), sim._decoder]
        for target in targets:
            cids.append(sim.deploy_model(engine, target, entry))
    return cids


def run_localization(
    sim: ORanSimulation,
    samples: list[CsiSample] | np.ndarray,
    interval_us: int = 10_000,
    ue: str | None = None,
) -> list[LocResult | None]:
    """Inject one request per sample after all pending deployments settle; returns results in order."""
    sim.run()
    ue = ue or sim.topology.first(NodeKind.UE_EDGE)
    start = sim.now
    cids = [
        sim.inject_localization_request(ue, s, at=start + i * interval_us, channel_index=i)
        for i, s in enumerate(samples)
    ]
    sim.run()
    return [sim.results.get(c) for c in cids]
