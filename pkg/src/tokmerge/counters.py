"""Analytic FLOP accounting for instrumented operations.

Operations do not trace array arithmetic; they report the closed-form
cost of the work they just did into named buckets. Tests compare these
buckets against the independent cost model in :mod:`tokmerge.analysis`.

Convention (stated in every report header): one multiply-accumulate
counts as 2 FLOPs; softmax normalization counts 5 FLOPs per score entry.
"""

from __future__ import annotations

from collections import defaultdict

FLOPS_CONVENTION = (
    "1 multiply-accumulate = 2 FLOPs; softmax/normalization = 5 FLOPs per "
    "score entry; data movement (gather/unmerge copies) = 0 FLOPs"
)


class FlopCounter:
    """Accumulates integer FLOP counts into named buckets."""

    def __init__(self):
        self.buckets: dict[str, int] = defaultdict(int)

    def add(self, bucket: str, flops: int) -> None:
        self.buckets[bucket] += int(flops)

    def merge(self, other: "FlopCounter") -> None:
        """Fold another counter in (used to reduce per-patch workers)."""
        for key, val in other.buckets.items():
            self.buckets[key] += val

    @property
    def total(self) -> int:
        return sum(self.buckets.values())

    def __getitem__(self, bucket: str) -> int:
        return self.buckets.get(bucket, 0)

    def __repr__(self):
        inner = ", ".join(f"{k}={v}" for k, v in sorted(self.buckets.items()))
        return f"FlopCounter({inner})"


def tally(counter: FlopCounter | None, bucket: str, flops: int) -> None:
    """Record into ``counter`` if one is active; no-op otherwise."""
    if counter is not None:
        counter.add(bucket, flops)
