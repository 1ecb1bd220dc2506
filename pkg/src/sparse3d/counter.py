"""Instrumentation counters for flops and transient scratch memory.

Counting is opt-in: operations report to every counter that is active on the
current stack, so ``count_ops`` regions may be nested.
"""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from typing import Iterator

DEFAULT_TAG = "other"

_ACTIVE: list["OpCounter"] = []
_TAGS: list[str] = [DEFAULT_TAG]


class OpCounter:
    """Flop and scratch-allocation totals for one measured region.

    ``flops`` counts matrix-product work with the 1 multiply-add = 2 flops
    convention. ``peak_transient_bytes`` is the largest amount of scratch
    memory that was live at once (score matrices or tiles plus their accumulators).
    """

    def __init__(self) -> None:
        self.flops = 0
        self.flops_by_tag: Counter[str] = Counter()
        self.live_bytes = 0
        self.peak_transient_bytes = 0

    def add_flops(self, n: int, tag: str) -> None:
        if n < 0:
            raise ValueError(f"negative flop count {n}")
        self.flops += int(n)
        self.flops_by_tag[tag] += int(n)

    def allocate(self, nbytes: int) -> None:
        self.live_bytes += int(nbytes)
        if self.live_bytes > self.peak_transient_bytes:
            self.peak_transient_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        self.live_bytes -= int(nbytes)

    def tag_flops(self, tag: str) -> int:
        return self.flops_by_tag.get(tag, 0)

    def __repr__(self) -> str:
        return (f"OpCounter(flops={self.flops}, "
                f"peak_transient_bytes={self.peak_transient_bytes})")


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Activate a fresh counter for the duration of the block."""
    counter = OpCounter()
    _ACTIVE.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE.remove(counter)


@contextmanager
def flop_tag(tag: str) -> Iterator[None]:
    """Attribute flops recorded inside the block to ``tag``."""
    _TAGS.append(tag)
    try:
        yield
    finally:
        _TAGS.pop()


def current_tag() -> str:
    return _TAGS[-1]


def record_flops(n: int, tag: str | None = None) -> None:
    if not _ACTIVE:
        return
    tag = tag or _TAGS[-1]
    for counter in _ACTIVE:
        counter.add_flops(n, tag)


@contextmanager
def scratch(*nbytes: int) -> Iterator[None]:
    """Mark ``sum(nbytes)`` of scratch memory live for the block."""
    total = int(sum(nbytes))
    for counter in _ACTIVE:
        counter.allocate(total)
    try:
        yield
    finally:
        for counter in _ACTIVE:
            counter.release(total)
