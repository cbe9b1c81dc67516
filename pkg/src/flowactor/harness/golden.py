"""Equivalence oracles against a fault-free, migration-free run."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

from ..core import FlowKey, FlowStateBundle


class ChainMismatch(ValueError):
    pass


def _diff_fields(path: str, a: Any, b: Any, out: list[str]) -> None:
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b), key=str):
            if k not in a:
                out.append(f"{path}.{k}: missing in run A")
            elif k not in b:
                out.append(f"{path}.{k}: missing in run B")
            else:
                _diff_fields(f"{path}.{k}", a[k], b[k], out)
    elif a != b:
        out.append(f"{path}: {a!r} != {b!r}")


def golden_compare(run_a: dict, run_b: dict) -> list[str]:
    """Field-level diff of two state dumps; an empty list means equivalent.

    Per-flow states are compared whether the flow was still live at the end
    of the run or had expired, since the two runs may expire a flow at
    different times (a migrated flow's idle clock restarts on the target).
    """
    if run_a.get("chain") != run_b.get("chain"):
        raise ChainMismatch(f"chains differ: {run_a.get('chain')!r} vs {run_b.get('chain')!r}")
    diffs: list[str] = []
    fa, fb = run_a["flows"], run_b["flows"]
    for key in sorted(set(fa) | set(fb)):
        if key not in fa:
            diffs.append(f"flow {key}: only in run B")
        elif key not in fb:
            diffs.append(f"flow {key}: only in run A")
        else:
            _diff_fields(f"flow {key}", fa[key]["states"], fb[key]["states"], diffs)
    _diff_fields("shared", run_a["shared"], run_b["shared"], diffs)
    return diffs


def prefix_compare(
    golden_history: dict[FlowKey, dict[int, FlowStateBundle]],
    recovered: Iterable[dict],
    chain,
) -> list[str]:
    """Check that every recovered flow resumed from the golden state after its
    last replicated packet."""
    diffs: list[str] = []
    names = [nf.name for nf in chain.nfs]
    for ev in recovered:
        key, seq, bundle = ev["key"], ev["gen_seq"], ev["bundle"]
        expected = golden_history.get(key, {}).get(seq)
        if expected is None:
            diffs.append(f"flow {key}: golden run never processed gen_seq {seq}")
            continue
        for name, nf, got, want in zip(names, chain.nfs, bundle.blobs, expected.blobs):
            if got != want:
                diffs.append(f"flow {key} @ {seq} {name}: {nf.decode_state(got)!r} != {nf.decode_state(want)!r}")
    return diffs


def save_dump(dump: dict, path) -> None:
    Path(path).write_text(json.dumps(dump, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_dump(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a state dump: {exc}") from None
    if not isinstance(data, dict) or not {"chain", "flows", "shared"} <= set(data):
        raise ValueError(f"{path}: not a state dump (needs chain, flows and shared)")
    return data
