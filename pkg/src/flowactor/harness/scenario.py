"""Scenario files: TOML sections describing one experiment.

See ``docs/scenario.md`` for the schema.  Every validation error names the
offending field and, where it can be found, the line it sits on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import tomli

from ..coordinator import CoordinatorConfig
from ..nf import KNOWN_NFS
from ..runtime import RuntimeConfig
from ..sim import NS_PER_MS, NS_PER_S, NS_PER_US, LinkParams
from ..transport import TransportConfig
from .faults import FaultEvent, FaultScript, KillRuntime, RestoreLink, SilenceLink
from .traffic import FlowClass, TrafficSpec

MODES = ("deterministic", "benchmark")


class ScenarioError(ValueError):
    def __init__(self, source: str, line: Optional[int], fieldname: str, problem: str) -> None:
        self.source = source
        self.line = line
        self.field = fieldname
        self.problem = problem
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {fieldname}: {problem}")


@dataclass
class ClusterSpec:
    runtimes: int = 1
    vswitches: int = 1
    standby: int = 0
    replication: bool = False
    # runtimes the launcher may boot beyond the initial ones (scale-out)
    max_extra_runtimes: int = 4


@dataclass
class MigrationOrder:
    at_ns: int
    src: int
    dst: int
    n: int


@dataclass
class Assertions:
    conservation: bool = True
    protocol_drops: Optional[int] = None
    output_commit_violations: Optional[int] = None
    invariant_violations: Optional[int] = None
    golden: bool = False
    golden_prefix: bool = False
    recovered_equals_replicated: bool = False
    detection_periods: Optional[int] = None
    coordinator_messages_per_runtime: Optional[int] = None
    min_delivered_fraction: Optional[float] = None
    min_throughput_pps: Optional[float] = None


@dataclass
class Scenario:
    name: str = "scenario"
    mode: str = "deterministic"
    seed: int = 0
    drain_s: float = 0.5
    # stop running here even if traffic and drain would last longer
    run_until_s: Optional[float] = None
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    chain: list[str] = field(default_factory=lambda: ["firewall", "nat", "lb"])
    nf: dict[str, dict] = field(default_factory=dict)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    vswitch_expiry_ns: Optional[int] = None
    transport: TransportConfig = field(default_factory=TransportConfig)
    link: LinkParams = field(default_factory=LinkParams)
    coordinator: CoordinatorConfig = field(default_factory=lambda: CoordinatorConfig(scaling=False))
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    faults: FaultScript = field(default_factory=lambda: FaultScript([]))
    migrations: list[MigrationOrder] = field(default_factory=list)
    assertions: Assertions = field(default_factory=Assertions)
    check_invariants: bool = False
    instrument: bool = False
    benchmark_seconds: float = 2.0
    source: str = "<scenario>"

    @property
    def traffic_end_ns(self) -> int:
        return int((self.traffic.start_s + self.traffic.duration_s) * NS_PER_S)

    @property
    def end_ns(self) -> int:
        end = self.traffic_end_ns + int(self.drain_s * NS_PER_S)
        if self.run_until_s is not None:
            end = min(end, int(self.run_until_s * NS_PER_S))
        return end

    def with_seed(self, seed: int) -> Scenario:
        return replace(self, seed=seed, traffic=replace(self.traffic, seed=seed))

    def golden(self) -> Scenario:
        """The same traffic without migrations, faults or scaling."""
        return replace(
            self,
            name=self.name + ":golden",
            faults=FaultScript([]),
            migrations=[],
            coordinator=replace(self.coordinator, scaling=False),
        )


# -- parsing -----------------------------------------------------------------


def _locate(text: str, section: str, key: Optional[str]) -> Optional[int]:
    """Best-effort line number of ``key`` inside ``[section]``."""
    lines = text.splitlines()
    current = ""
    section_line = None
    for i, raw in enumerate(lines, 1):
        line = raw.strip()
        m = re.match(r"^\[\[?\s*([A-Za-z0-9_.\-]+)\s*\]\]?", line)
        if m:
            current = m.group(1)
            if current == section and section_line is None:
                section_line = i
            continue
        if key and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return i
    return section_line


class _Reader:
    def __init__(self, text: str, source: str) -> None:
        self.text = text
        self.source = source

    def fail(self, section: str, key: Optional[str], problem: str):
        name = f"{section}.{key}" if section and key else (key or section)
        raise ScenarioError(self.source, _locate(self.text, section, key), name, problem)

    def table(self, data: dict, section: str, allowed: set[str]) -> dict:
        if not isinstance(data, dict):
            self.fail(section, None, "expected a table")
        unknown = sorted(set(data) - allowed)
        if unknown:
            self.fail(section, unknown[0], f"unknown field (allowed: {', '.join(sorted(allowed))})")
        return data

    def get(self, data: dict, section: str, key: str, kind, default: Any = None, check=None, problem: str = ""):
        if key not in data:
            return default
        value = data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            self.fail(section, key, "expected an integer")
        if not isinstance(value, kind):
            self.fail(section, key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
        if check is not None and not check(value):
            self.fail(section, key, problem or "value out of range")
        return value


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(source, int(m.group(1)) if m else None, "syntax", str(exc)) from None
    r = _Reader(text, source)
    top = r.table(
        data,
        "",
        {
            "name", "mode", "seed", "drain_s", "run_until_s", "check_invariants", "instrument", "benchmark_seconds",
            "cluster", "chain", "nf", "runtime", "transport", "coordinator", "traffic", "faults", "migrations",
            "assertions",
        },
    )
    sc = Scenario(source=source)
    sc.name = r.get(top, "", "name", str, sc.name)
    sc.mode = r.get(top, "", "mode", str, sc.mode, lambda v: v in MODES, f"expected one of {MODES}")
    sc.seed = r.get(top, "", "seed", int, 0, _nonneg, "must be >= 0")
    sc.drain_s = r.get(top, "", "drain_s", float, sc.drain_s, _nonneg, "must be >= 0")
    sc.run_until_s = r.get(top, "", "run_until_s", float, None, _pos, "must be positive")
    sc.check_invariants = r.get(top, "", "check_invariants", bool, False)
    sc.instrument = r.get(top, "", "instrument", bool, False)
    sc.benchmark_seconds = r.get(top, "", "benchmark_seconds", float, sc.benchmark_seconds, _pos, "must be positive")

    c = r.table(top.get("cluster", {}), "cluster", {"runtimes", "vswitches", "standby", "replication", "max_extra_runtimes"})
    sc.cluster = ClusterSpec(
        r.get(c, "cluster", "runtimes", int, 1, _pos, "must be >= 1"),
        r.get(c, "cluster", "vswitches", int, 1, _pos, "must be >= 1"),
        r.get(c, "cluster", "standby", int, 0, _nonneg, "must be >= 0"),
        r.get(c, "cluster", "replication", bool, False),
        r.get(c, "cluster", "max_extra_runtimes", int, 4, _nonneg, "must be >= 0"),
    )

    ch = r.table(top.get("chain", {}), "chain", {"nfs"})
    nfs = r.get(ch, "chain", "nfs", list, ["firewall", "nat", "lb"])
    for name in nfs:
        if name not in KNOWN_NFS:
            r.fail("chain", "nfs", f"unknown NF {name!r}; expected one of {KNOWN_NFS}")
    if not nfs or len(set(nfs)) != len(nfs):
        r.fail("chain", "nfs", "needs at least one NF and no repeats")
    sc.chain = list(nfs)
    nf_cfg = r.table(top.get("nf", {}), "nf", set(KNOWN_NFS))
    sc.nf = {k: dict(v) for k, v in nf_cfg.items()}

    rt = r.table(
        top.get("runtime", {}),
        "runtime",
        {"pool_capacity", "expiry_timeout_s", "timer_granularity_ms", "step_deadline_ms", "target_buffer",
         "input_capacity", "service_pps", "vswitch_expiry_timeout_s"},
    )
    sc.runtime = RuntimeConfig(
        pool_capacity=r.get(rt, "runtime", "pool_capacity", int, 1 << 20, _pos, "must be positive"),
        expiry_timeout_ns=int(r.get(rt, "runtime", "expiry_timeout_s", float, 5.0, _pos, "must be positive") * NS_PER_S),
        timer_granularity_ns=int(
            r.get(rt, "runtime", "timer_granularity_ms", float, 1.0, _pos, "must be positive") * NS_PER_MS
        ),
        step_deadline_ns=int(r.get(rt, "runtime", "step_deadline_ms", float, 50.0, _pos, "must be positive") * NS_PER_MS),
        target_buffer=r.get(rt, "runtime", "target_buffer", int, 1024, _pos, "must be positive"),
        input_capacity=r.get(rt, "runtime", "input_capacity", int, 4096, _pos, "must be positive"),
        service_pps=r.get(rt, "runtime", "service_pps", float, None, _pos, "must be positive"),
    )
    vexp = r.get(rt, "runtime", "vswitch_expiry_timeout_s", float, None, _pos, "must be positive")
    sc.vswitch_expiry_ns = int(vexp * NS_PER_S) if vexp is not None else None

    tp = r.table(
        top.get("transport", {}),
        "transport",
        {"delay_us", "jitter_us", "loss_prob", "reorder", "window", "initial_rtt_us", "max_retries"},
    )
    sc.link = LinkParams(
        int(r.get(tp, "transport", "delay_us", float, 50.0, _nonneg, "must be >= 0") * NS_PER_US),
        int(r.get(tp, "transport", "jitter_us", float, 0.0, _nonneg, "must be >= 0") * NS_PER_US),
        r.get(tp, "transport", "loss_prob", float, 0.0, lambda v: 0.0 <= v < 1.0, "must be within [0, 1)"),
        r.get(tp, "transport", "reorder", bool, False),
    )
    sc.transport = TransportConfig(
        window=r.get(tp, "transport", "window", int, 4096, _pos, "must be positive"),
        initial_rtt_ns=int(r.get(tp, "transport", "initial_rtt_us", float, 200.0, _pos, "must be positive") * NS_PER_US),
        max_retries=r.get(tp, "transport", "max_retries", int, 32, _pos, "must be positive"),
    )

    co = r.table(
        top.get("coordinator", {}),
        "coordinator",
        {"heartbeat_ms", "miss_threshold", "poll_ms", "drop_threshold", "batch", "scaling", "heartbeats", "polling",
         "low_watermark", "idle_polls"},
    )
    sc.coordinator = CoordinatorConfig(
        heartbeat_period_ns=int(r.get(co, "coordinator", "heartbeat_ms", float, 100.0, _pos, "must be positive") * NS_PER_MS),
        miss_threshold=r.get(co, "coordinator", "miss_threshold", int, 3, _pos, "must be positive"),
        poll_period_ns=int(r.get(co, "coordinator", "poll_ms", float, 1000.0, _pos, "must be positive") * NS_PER_MS),
        drop_threshold=r.get(co, "coordinator", "drop_threshold", int, 100, _nonneg, "must be >= 0"),
        batch=r.get(co, "coordinator", "batch", int, 500, _pos, "must be positive"),
        low_watermark=r.get(co, "coordinator", "low_watermark", float, 0.10, lambda v: 0 <= v <= 1, "must be in [0, 1]"),
        idle_polls=r.get(co, "coordinator", "idle_polls", int, 3, _pos, "must be positive"),
        scaling=r.get(co, "coordinator", "scaling", bool, False),
        heartbeats=r.get(co, "coordinator", "heartbeats", bool, True),
        polling=r.get(co, "coordinator", "polling", bool, True),
    )

    tr = r.table(
        top.get("traffic", {}),
        "traffic",
        {"flows", "pps_per_flow", "duration_s", "pkt_size", "mix", "start_s", "start_spread_s", "attack_fraction",
         "attack_pattern"},
    )
    mix = []
    raw_mix = r.get(tr, "traffic", "mix", list, [])
    for i, entry in enumerate(raw_mix):
        e = r.table(entry, "traffic.mix", {"fraction", "duration_s"})
        if "fraction" not in e or "duration_s" not in e:
            r.fail("traffic.mix", None, f"entry {i} needs fraction and duration_s")
        mix.append(
            FlowClass(
                r.get(e, "traffic.mix", "fraction", float, check=_pos, problem="must be positive"),
                r.get(e, "traffic.mix", "duration_s", float, check=_pos, problem="must be positive"),
            )
        )
    try:
        sc.traffic = TrafficSpec(
            flows=r.get(tr, "traffic", "flows", int, 10, _pos, "must be positive"),
            pps_per_flow=r.get(tr, "traffic", "pps_per_flow", float, 10.0, _pos, "must be positive"),
            duration_s=r.get(tr, "traffic", "duration_s", float, 1.0, _pos, "must be positive"),
            pkt_size=r.get(tr, "traffic", "pkt_size", int, 64),
            mix=mix,
            seed=sc.seed,
            start_s=r.get(tr, "traffic", "start_s", float, 0.001, _nonneg, "must be >= 0"),
            start_spread_s=r.get(tr, "traffic", "start_spread_s", float, None, _nonneg, "must be >= 0"),
            attack_fraction=r.get(tr, "traffic", "attack_fraction", float, 0.0),
            attack_pattern=r.get(tr, "traffic", "attack_pattern", str, "attack").encode(),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        r.fail("traffic", None, str(exc))

    events = []
    for i, raw in enumerate(r.get(top, "", "faults", list, [])):
        f = r.table(raw, "faults", {"at_s", "action", "runtime", "a", "b"})
        at = r.get(f, "faults", "at_s", float, None, _nonneg, "must be >= 0")
        action = r.get(f, "faults", "action", str, None)
        if at is None or action is None:
            r.fail("faults", None, f"entry {i} needs at_s and action")
        if action == "kill":
            if "runtime" not in f:
                r.fail("faults", "action", f"entry {i}: kill needs runtime")
            act = KillRuntime(r.get(f, "faults", "runtime", int))
        elif action in ("silence", "restore"):
            if "a" not in f or "b" not in f:
                r.fail("faults", "action", f"entry {i}: {action} needs a and b")
            cls = SilenceLink if action == "silence" else RestoreLink
            act = cls(r.get(f, "faults", "a", int), r.get(f, "faults", "b", int))
        else:
            r.fail("faults", "action", f"entry {i}: expected kill, silence or restore, got {action!r}")
        events.append(FaultEvent(int(round(at * NS_PER_S)), act))
    try:
        sc.faults = FaultScript(events)
    except ValueError as exc:
        r.fail("faults", "at_s", str(exc))

    for i, raw in enumerate(r.get(top, "", "migrations", list, [])):
        m = r.table(raw, "migrations", {"at_s", "src", "dst", "n"})
        missing = [k for k in ("at_s", "src", "dst") if k not in m]
        if missing:
            r.fail("migrations", None, f"entry {i} needs {', '.join(missing)}")
        sc.migrations.append(
            MigrationOrder(
                int(round(r.get(m, "migrations", "at_s", float, check=_nonneg, problem="must be >= 0") * NS_PER_S)),
                r.get(m, "migrations", "src", int),
                r.get(m, "migrations", "dst", int),
                r.get(m, "migrations", "n", int, 1 << 30, _nonneg, "must be >= 0"),
            )
        )

    a = r.table(top.get("assertions", {}), "assertions", set(Assertions.__dataclass_fields__))
    sc.assertions = Assertions(
        conservation=r.get(a, "assertions", "conservation", bool, True),
        protocol_drops=r.get(a, "assertions", "protocol_drops", int, None, _nonneg, "must be >= 0"),
        output_commit_violations=r.get(a, "assertions", "output_commit_violations", int, None, _nonneg, "must be >= 0"),
        invariant_violations=r.get(a, "assertions", "invariant_violations", int, None, _nonneg, "must be >= 0"),
        golden=r.get(a, "assertions", "golden", bool, False),
        golden_prefix=r.get(a, "assertions", "golden_prefix", bool, False),
        recovered_equals_replicated=r.get(a, "assertions", "recovered_equals_replicated", bool, False),
        detection_periods=r.get(a, "assertions", "detection_periods", int, None, _pos, "must be positive"),
        coordinator_messages_per_runtime=r.get(
            a, "assertions", "coordinator_messages_per_runtime", int, None, _pos, "must be positive"
        ),
        min_delivered_fraction=r.get(
            a, "assertions", "min_delivered_fraction", float, None, lambda v: 0 <= v <= 1, "must be in [0, 1]"
        ),
        min_throughput_pps=r.get(a, "assertions", "min_throughput_pps", float, None, _pos, "must be positive"),
    )
    if sc.assertions.output_commit_violations is not None or sc.assertions.golden_prefix:
        sc.instrument = True
    return sc


def load_scenario(path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(str(p), None, "file", str(exc)) from None
    return parse_scenario(text, str(p))
