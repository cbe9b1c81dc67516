"""Byte-oriented Aho-Corasick automaton.

The goto trie is closed over its failure links into a full transition
table, so every (node, byte) pair has exactly one successor and scanning
never follows fail links at run time.  Node 0 is the root.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class AcAutomaton:
    patterns: tuple[bytes, ...]
    delta: tuple[tuple[int, ...], ...]
    fail: tuple[int, ...]
    # complete output set per node: the node's own pattern plus every
    # pattern reachable through its failure chain
    output: tuple[tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return len(self.delta)


def ac_build(patterns: Iterable[bytes]) -> AcAutomaton:
    pats = tuple(bytes(p) for p in patterns)
    if not pats:
        raise BuildError("pattern set is empty")
    if any(len(p) == 0 for p in pats):
        raise BuildError("patterns must be non-empty")

    goto: list[dict[int, int]] = [{}]
    own: list[list[int]] = [[]]
    for index, pat in enumerate(pats):
        node = 0
        for byte in pat:
            nxt = goto[node].get(byte)
            if nxt is None:
                nxt = len(goto)
                goto[node][byte] = nxt
                goto.append({})
                own.append([])
            node = nxt
        own[node].append(index)

    n = len(goto)
    fail = [0] * n
    delta: list[list[int]] = [[0] * 256 for _ in range(n)]
    output: list[tuple[int, ...]] = [()] * n
    output[0] = tuple(own[0])

    for byte, child in goto[0].items():
        delta[0][byte] = child
    queue = deque(goto[0].values())
    for child in queue:
        output[child] = tuple(own[child])
    # BFS order guarantees fail[child] is finalized before child is expanded
    while queue:
        node = queue.popleft()
        row = delta[node]
        frow = delta[fail[node]]
        for byte in range(256):
            row[byte] = frow[byte]
        for byte, child in goto[node].items():
            row[byte] = child
            fail[child] = frow[byte]
            output[child] = tuple(own[child]) + output[fail[child]]
            queue.append(child)

    return AcAutomaton(pats, tuple(tuple(r) for r in delta), tuple(fail), tuple(output))


def ac_step(a: AcAutomaton, node: int, byte: int) -> tuple[int, frozenset[int]]:
    nxt = a.delta[node][byte]
    return nxt, frozenset(a.output[nxt])


def ac_scan(a: AcAutomaton, node: int, data: bytes) -> tuple[int, list[tuple[int, int]]]:
    """Feed ``data`` from ``node``; return the final node and (pattern, end offset) hits."""
    delta = a.delta
    output = a.output
    hits = []
    for pos, byte in enumerate(data):
        node = delta[node][byte]
        if output[node]:
            for p in output[node]:
                hits.append((p, pos))
    return node, hits


def ac_first_hit(a: AcAutomaton, node: int, data: bytes) -> tuple[int, bool]:
    """Like :func:`ac_scan` but stops at the first match; used on the hot path."""
    delta = a.delta
    output = a.output
    for byte in data:
        node = delta[node][byte]
        if output[node]:
            return node, True
    return node, False

