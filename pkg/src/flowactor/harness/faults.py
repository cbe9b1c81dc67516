"""Scripted fault injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class KillRuntime:
    runtime: int


@dataclass(frozen=True)
class SilenceLink:
    a: int
    b: int


@dataclass(frozen=True)
class RestoreLink:
    a: int
    b: int


FaultAction = Union[KillRuntime, SilenceLink, RestoreLink]


@dataclass(frozen=True)
class FaultEvent:
    at_ns: int
    action: FaultAction


@dataclass
class FaultScript:
    events: list[FaultEvent]

    def __post_init__(self) -> None:
        times = [e.at_ns for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("fault events must be in non-decreasing time order")
        if any(t < 0 for t in times):
            raise ValueError("fault times must be non-negative")

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)
