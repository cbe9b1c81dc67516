"""Per-flow actor runtime for stateful network functions.

Flows are handled by flow actors that own their NF states, migrate between
runtimes with a three-step decentralized protocol and survive runtime
failures through per-packet state replication.
"""

from .core import ClusterConfig, FlowKey, FlowStateBundle, Member, Packet, Proto, Role, WorkloadReport
from .coordinator import Coordinator, CoordinatorConfig
from .runtime import Runtime, RuntimeConfig
from .vswitch import VirtualSwitch

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig", "Coordinator", "CoordinatorConfig", "FlowKey", "FlowStateBundle", "Member", "Packet",
    "Proto", "Role", "Runtime", "RuntimeConfig", "VirtualSwitch", "WorkloadReport",
]
