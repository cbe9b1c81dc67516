"""Network functions and the chain builder used by scenario files."""

from __future__ import annotations

import ipaddress
from typing import Any, Mapping, Sequence

from ..core import Proto
from .ahocorasick import AcAutomaton, BuildError, ac_build, ac_scan, ac_step
from .api import DROP, FORWARD, Action, NetworkFunction, ServiceChain, Verdict
from .firewall import Acl, AclAction, AclRule, Firewall, FirewallState
from .ips import Ips, IpsState
from .lb import LbState, LoadBalancer, ServerTable
from .nat import AddressPool, Nat, NatState

__all__ = [
    "AcAutomaton", "Acl", "AclAction", "AclRule", "Action", "AddressPool", "BuildError",
    "DROP", "FORWARD", "Firewall", "FirewallState", "Ips", "IpsState", "LbState",
    "LoadBalancer", "Nat", "NatState", "NetworkFunction", "ServerTable", "ServiceChain",
    "Verdict", "ac_build", "ac_scan", "ac_step", "build_chain", "build_nf",
]

KNOWN_NFS = ("firewall", "ips", "lb", "nat")


def _ip(text: str) -> int:
    return int(ipaddress.IPv4Address(text))


def _rule(spec: Mapping[str, Any]) -> AclRule:
    proto = spec.get("proto")
    return AclRule(
        AclAction[str(spec.get("action", "deny")).capitalize()],
        src_ip=_ip(spec["src_ip"]) if "src_ip" in spec else None,
        dst_ip=_ip(spec["dst_ip"]) if "dst_ip" in spec else None,
        proto=Proto[proto.upper()] if proto else None,
        src_port=spec.get("src_port"),
        dst_port=spec.get("dst_port"),
    )


def _signature(text: str) -> bytes:
    if text.startswith("hex:"):
        return bytes.fromhex(text[4:])
    return text.encode()


def build_nf(name: str, cfg: Mapping[str, Any], slot: int = 0) -> NetworkFunction:
    """Instantiate one NF.  ``slot`` selects the runtime's disjoint NAT address block."""
    if name == "firewall":
        return Firewall([_rule(r) for r in cfg.get("rules", [])], AclAction[str(cfg.get("default", "allow")).capitalize()])
    if name == "ips":
        return Ips(_signature(s) for s in cfg.get("signatures", ["attack"]))
    if name == "lb":
        return LoadBalancer([_ip(s) for s in cfg.get("servers", ["10.200.0.1", "10.200.0.2", "10.200.0.3"])])
    if name == "nat":
        base = _ip(cfg.get("base", "172.16.0.0"))
        per = int(cfg.get("ips_per_runtime", 4))
        lo, hi = cfg.get("ports", [1024, 2047])
        return Nat([base + slot * per + i for i in range(per)], (int(lo), int(hi)))
    raise ValueError(f"unknown NF {name!r}; expected one of {KNOWN_NFS}")


def build_chain(names: Sequence[str], nf_cfg: Mapping[str, Mapping[str, Any]], slot: int = 0) -> ServiceChain:
    nfs = [build_nf(n, nf_cfg.get(n, {}), slot) for n in names]
    return ServiceChain("->".join(names), nfs)
