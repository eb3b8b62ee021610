"""Multiply-accumulate counters for the attention score computations.

Disabled by default; tests enable it to verify the sequence-reduction
complexity claim. Counting is tagged so video-video and text-video score
products can be audited separately.
"""

from __future__ import annotations

from collections import defaultdict

_enabled = False
_counts: dict[str, int] = defaultdict(int)


def enable(flag: bool = True):
    global _enabled
    _enabled = flag


def enabled() -> bool:
    return _enabled


def reset():
    _counts.clear()


def record(tag: str, macs: int):
    if _enabled:
        _counts[tag] += int(macs)


def count(tag: str) -> int:
    return _counts.get(tag, 0)


def snapshot() -> dict[str, int]:
    return dict(_counts)
