from .engine import EventQueue, EventTrace, SchedulingError
from .network import (
    LocResult,
    ModelRegistry,
    ModelRegistryEntry,
    ORanSimulation,
    RegistryError,
    SimMessage,
    StaleVersionError,
    bandwidth_report,
    bytes_by_link,
    deploy_all,
    identity_factory,
    run_localization,
    vae_pair_factory,
)
from .topology import Interface, Link, NodeKind, Topology, TopologyError, build_topology, link_name

__all__ = [
    "EventQueue",
    "EventTrace",
    "Interface",
    "Link",
    "LocResult",
    "ModelRegistry",
    "ModelRegistryEntry",
    "NodeKind",
    "ORanSimulation",
    "RegistryError",
    "SchedulingError",
    "SimMessage",
    "StaleVersionError",
    "Topology",
    "TopologyError",
    "bandwidth_report",
    "build_topology",
    "bytes_by_link",
    "deploy_all",
    "identity_factory",
    "link_name",
    "run_localization",
    "vae_pair_factory",
]
