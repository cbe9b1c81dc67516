"""Flow actors and the pre-allocated pool they are drawn from."""

from __future__ import annotations

import enum
from collections import deque
from typing import Any, Optional

from .core import FlowKey


class PoolExhausted(RuntimeError):
    pass


class LifecycleError(AssertionError):
    """An actor or NF hook was used outside its allowed lifecycle."""


class Mode(enum.IntEnum):
    Normal = 0
    MigrationSource = 1
    MigrationTarget = 2
    Replica = 3


class Lifecycle(enum.IntEnum):
    Live = 0
    Finalized = 1


# how an actor left the runtime
EXPIRED = "expired"
MIGRATED = "migrated"
DESTROYED = "destroyed"


class FlowActor:
    __slots__ = (
        "key", "states", "mode", "buffer", "replica_target", "last_pkt_time", "lifecycle",
        "incarnation", "created", "created_at", "ingress", "fsm", "replica", "exit_reason",
        "recovering", "mig_source", "mig_corr", "released", "deallocated", "installed_at",
    )

    def __init__(self) -> None:
        self.incarnation = 0
        self.lifecycle = Lifecycle.Finalized
        self._reset(None, 0, 0)

    def _reset(self, key: Optional[FlowKey], now: int, order: int) -> None:
        self.key = key
        self.states: Optional[list[Any]] = None
        self.mode = Mode.Normal
        self.buffer: Optional[deque] = None
        self.replica_target: Optional[int] = None
        self.last_pkt_time = now
        self.created = order
        self.created_at = now
        self.installed_at = now
        self.ingress = 0
        self.fsm = None
        self.replica = None
        self.exit_reason: Optional[str] = None
        self.recovering = False
        self.mig_source = 0
        self.mig_corr = 0
        # NF lifecycle: one release hook (expires or migrate_out), then deallocate
        self.released = False
        self.deallocated = False

    def finalize(self, reason: str) -> None:
        if self.lifecycle is not Lifecycle.Live:
            raise LifecycleError(f"actor {self.key} finalized twice ({self.exit_reason}, then {reason})")
        self.lifecycle = Lifecycle.Finalized
        self.exit_reason = reason

    def __repr__(self) -> str:
        return f"FlowActor({self.key}, {self.mode.name}, {self.lifecycle.name})"


class ActorPool:
    """Free-list of actor objects with a hard capacity.

    Objects are constructed on first demand and recycled afterwards, so a
    pool of 2^20 costs nothing until it is used.  ``free + live`` equals
    ``capacity`` at all times.
    """

    def __init__(self, capacity: int = 1 << 20, prealloc: int = 0) -> None:
        if capacity <= 0:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self._ring: deque[FlowActor] = deque(FlowActor() for _ in range(min(prealloc, capacity)))
        self.live = 0
        self._order = 0

    @property
    def free(self) -> int:
        return self.capacity - self.live

    def acquire(self, key: FlowKey, now: int) -> FlowActor:
        if self.live >= self.capacity:
            raise PoolExhausted(f"all {self.capacity} flow actors in use")
        actor = self._ring.popleft() if self._ring else FlowActor()
        self.live += 1
        self._order += 1
        actor.incarnation += 1
        actor._reset(key, now, self._order)
        actor.lifecycle = Lifecycle.Live
        return actor

    def release(self, actor: FlowActor) -> None:
        if actor.lifecycle is not Lifecycle.Finalized:
            raise LifecycleError(f"returning live actor {actor.key} to the pool")
        self.live -= 1
        actor.states = None
        actor.buffer = None
        actor.fsm = None
        actor.replica = None
        self._ring.append(actor)
