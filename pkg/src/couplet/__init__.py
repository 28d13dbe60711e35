"""Coupling runtime for multiscale simulations."""

from . import demo  # noqa: F401  registers the demo implementations
from .codec import Payload, PayloadType
from .config import ConfigDocument, load_config, parse_config, render_config
from .kernel import Mapper, Sink, Source, Submodel, register_impl
from .runtime import ManagerEndpoint, RunPlan, RunReport, run_simulation
from .topology import Coupling, Topology, classify_coupling, validate_topology

__version__ = "0.1.0"

__all__ = [
    "ConfigDocument",
    "Coupling",
    "ManagerEndpoint",
    "Mapper",
    "Payload",
    "PayloadType",
    "RunPlan",
    "RunReport",
    "Sink",
    "Source",
    "Submodel",
    "Topology",
    "classify_coupling",
    "load_config",
    "parse_config",
    "register_impl",
    "render_config",
    "run_simulation",
    "validate_topology",
]
