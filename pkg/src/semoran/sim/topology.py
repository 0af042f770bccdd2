"""Node kinds, logical interfaces and the default semantic-aware RAN topology."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any


class NodeKind(str, Enum):
    UE_EDGE = "UE_EDGE"
    O_RU = "O_RU"
    O_DU = "O_DU"
    CU_CP = "CU_CP"
    CU_UP = "CU_UP"
    CU_SP = "CU_SP"
    S_RIC = "S_RIC"
    NEAR_RT_RIC = "NEAR_RT_RIC"
    NON_RT_RIC = "NON_RT_RIC"
    SEMANTIC_ENGINE = "SEMANTIC_ENGINE"
    SMO = "SMO"
    O_CLOUD_KB = "O_CLOUD_KB"


class Interface(str, Enum):
    E2 = "E2"
    A1 = "A1"
    O1 = "O1"
    O2 = "O2"
    FRONTHAUL_72X = "FRONTHAUL_72X"
    SRIC_DIRECT = "SRIC_DIRECT"
    XN_S = "XN_S"
    NG_S = "NG_S"
    X2_S = "X2_S"
    # radio access and CU/DU midhaul
    UU = "UU"
    F1 = "F1"


# interface -> (propagation latency in us, bandwidth in bytes/s)
DEFAULT_LINK_PARAMS: dict[str, tuple[int, float]] = {
    "UU": (1_000, 12.5e6),
    "FRONTHAUL_72X": (100, 1.25e9),
    "F1": (500, 1.25e9),
    "E2": (1_000, 125e6),
    "SRIC_DIRECT": (200, 1.25e9),
    "A1": (10_000, 12.5e6),
    "O1": (10_000, 125e6),
    "O2": (10_000, 125e6),
    "XN_S": (2_000, 125e6),
    "NG_S": (2_000, 125e6),
    "X2_S": (2_000, 125e6),
}

# (a, b, interface) between the first instances of each kind; every UE attaches to the O-RU
DEFAULT_LINKS: tuple[tuple[str, str, str], ...] = (
    ("UE_EDGE", "O_RU", "UU"),
    ("O_RU", "O_DU", "FRONTHAUL_72X"),
    ("O_DU", "CU_CP", "F1"),
    ("O_DU", "CU_UP", "F1"),
    ("O_DU", "CU_SP", "F1"),
    ("CU_SP", "S_RIC", "E2"),
    ("CU_CP", "S_RIC", "E2"),
    ("CU_UP", "S_RIC", "E2"),
    ("S_RIC", "O_DU", "SRIC_DIRECT"),
    ("S_RIC", "O_RU", "SRIC_DIRECT"),
    ("S_RIC", "NEAR_RT_RIC", "E2"),
    ("NEAR_RT_RIC", "CU_CP", "E2"),
    ("NEAR_RT_RIC", "CU_UP", "E2"),
    ("NEAR_RT_RIC", "O_DU", "E2"),
    ("SEMANTIC_ENGINE", "NON_RT_RIC", "A1"),
    ("SEMANTIC_ENGINE", "NEAR_RT_RIC", "A1"),
    ("SEMANTIC_ENGINE", "S_RIC", "A1"),
    ("NON_RT_RIC", "NEAR_RT_RIC", "A1"),
    ("SMO", "SEMANTIC_ENGINE", "O1"),
    ("SMO", "NON_RT_RIC", "O1"),
    ("SMO", "O_CLOUD_KB", "O2"),
)

SEMANTIC_REQUIRED = (
    NodeKind.UE_EDGE,
    NodeKind.O_RU,
    NodeKind.O_DU,
    NodeKind.CU_SP,
    NodeKind.S_RIC,
    NodeKind.NEAR_RT_RIC,
    NodeKind.SEMANTIC_ENGINE,
)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    interface: Interface
    latency_us: int
    bandwidth: float  # bytes per second; math.inf means zero transmission time

    def __post_init__(self) -> None:
        if self.latency_us < 0:
            raise TopologyError(f"link {self.name}: latency must be non-negative")
        if not self.bandwidth > 0:
            raise TopologyError(f"link {self.name}: bandwidth must be positive")

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.a, self.b))

    @property
    def name(self) -> str:
        return f"{self.a}<->{self.b}"

    def transmission_us(self, payload_bytes: int) -> int:
        if math.isinf(self.bandwidth):
            return 0
        return math.ceil(payload_bytes * 1_000_000 / self.bandwidth)


def link_name(a: str, b: str) -> str:
    """Order-independent identifier used in traces."""
    x, y = sorted((a, b))
    return f"{x}<->{y}"


class Topology:
    def __init__(self, nodes: dict[str, NodeKind], links: list[Link]):
        self.nodes = dict(nodes)
        self.links: dict[frozenset[str], Link] = {}
        for link in links:
            for end in (link.a, link.b):
                if end not in self.nodes:
                    raise TopologyError(f"link {link.name} references unknown node {end!r}")
            if link.a == link.b:
                raise TopologyError(f"self-link on {link.a}")
            if link.key in self.links:
                raise TopologyError(f"duplicate link between {link.a} and {link.b}")
            self.links[link.key] = link

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise TopologyError(f"no link between {a} and {b}") from None

    def neighbors(self, node: str) -> list[str]:
        out = []
        for key in self.links:
            if node in key:
                (other,) = key - {node}
                out.append(other)
        return sorted(out)

    def of_kind(self, kind: NodeKind) -> list[str]:
        return sorted(n for n, k in self.nodes.items() if k == kind)

    def first(self, kind: NodeKind) -> str:
        found = self.of_kind(kind)
        if not found:
            raise TopologyError(f"topology has no {kind.value} node")
        return found[0]

    def path(self, src: str, dst: str) -> list[str]:
        """Fewest-hop path; ties resolved by sorted neighbor order so routes are deterministic."""
        if src == dst:
            return [src]
        prev: dict[str, str] = {src: src}
        q = deque([src])
        while q:
            cur = q.popleft()
            for nxt in self.neighbors(cur):
                if nxt not in prev:
                    prev[nxt] = cur
                    if nxt == dst:
                        out = [dst]
                        while out[-1] != src:
                            out.append(prev[out[-1]])
                        return out[::-1]
                    q.append(nxt)
        raise TopologyError(f"no path from {src} to {dst}")


def _node_ids(kind: str, count: int) -> list[str]:
    if count == 1:
        return [kind]
    return [f"{kind}-{i}" for i in range(count)]


def build_topology(config: dict[str, Any] | None = None) -> Topology:
    """Build the default architecture, with optional overrides.

    Recognised keys: ``nodes`` ({kind: count}, only UE_EDGE may exceed 1),
    ``interfaces`` ({interface: {latency_us, bandwidth}}), ``links``
    ({"A<->B": {latency_us, bandwidth}}), ``extra_links`` ([[a, b, interface]]),
    ``scenario`` ("semantic" requires the semantic node set).
    """
    config = dict(config or {})
    counts = {k.value: 1 for k in NodeKind}
    for kind, count in (config.get("nodes") or {}).items():
        if kind not in counts:
            raise TopologyError(f"unknown node kind {kind!r}")
        if count < 0 or (count > 1 and kind != NodeKind.UE_EDGE.value):
            raise TopologyError(f"unsupported count {count} for {kind}")
        counts[kind] = int(count)

    nodes: dict[str, NodeKind] = {}
    ids: dict[str, list[str]] = {}
    for kind, count in counts.items():
        ids[kind] = _node_ids(kind, count)
        for node in ids[kind]:
            nodes[node] = NodeKind(kind)

    params = {k: tuple(v) for k, v in DEFAULT_LINK_PARAMS.items()}
    for iface, p in (config.get("interfaces") or {}).items():
        if iface not in Interface.__members__:
            raise TopologyError(f"unknown interface {iface!r}")
        lat, bw = params[iface]
        params[iface] = (int(p.get("latency_us", lat)), float(p.get("bandwidth", bw)))
    overrides = {frozenset(name.split("<->")): p for name, p in (config.get("links") or {}).items()}

    def make(a: str, b: str, iface: str) -> Link:
        if iface not in Interface.__members__:
            raise TopologyError(f"unknown interface {iface!r}")
        lat, bw = params[iface]
        p = overrides.get(frozenset((a, b)), {})
        return Link(a, b, Interface(iface), int(p.get("latency_us", lat)), float(p.get("bandwidth", bw)))

    links = []
    for a_kind, b_kind, iface in DEFAULT_LINKS:
        if not ids[a_kind] or not ids[b_kind]:
            continue
        b = ids[b_kind][0]
        a_nodes = ids[a_kind] if a_kind == NodeKind.UE_EDGE.value else ids[a_kind][:1]
        links.extend(make(a, b, iface) for a in a_nodes)
    for a, b, iface in config.get("extra_links") or []:
        links.append(make(a, b, iface))

    topo = Topology(nodes, links)
    if config.get("scenario", "semantic") == "semantic":
        for kind in SEMANTIC_REQUIRED:
            if not ids[kind.value]:
                raise TopologyError(f"semantic scenario requires a {kind.value} node")
    if ids["UE_EDGE"] and ids["NEAR_RT_RIC"]:
        for ue in ids["UE_EDGE"]:
            topo.path(ue, ids["NEAR_RT_RIC"][0])
    else:
        raise TopologyError("topology needs a UE_EDGE and a NEAR_RT_RIC node")
    return topo
