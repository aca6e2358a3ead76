"""Token merging machinery.

Two matchers produce a :class:`MergeMap` per patch: classic bipartite soft
matching over an alternating source/destination split (capped at 50%
reduction), and spatial binning, where the patch is cut into K contiguous
bins, one randomly drawn destination per bin, enabling arbitrary rates
while keeping survivors spread across the patch. Applying a map averages
each cluster; unmerging copies each cluster's row back to its original
slots, approximating dense attention on the full set.

Destination randomness always comes from a caller-supplied substream
derived from (master seed, layer, patch), so results are independent of
thread scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttnParams, attend_heads, masked_softmax
from .counters import FlopCounter, tally
from .energy import MergePolicy, _unit_rows
from .errors import ConfigError

# Guards against float products like 10 * (1 - 0.9) = 0.9999... dropping
# a whole bin below the mathematically exact floor.
_FLOOR_EPS = 1e-9


@dataclass
class MergeMap:
    """Source-to-destination assignment for one patch.

    ``slot_to_dst[s]`` is the merged-row index of slot ``s`` (-1 for
    padded slots). ``dst_slots`` lists the surviving slots in merged-row
    order; every destination maps to its own row.
    """

    n_slots: int
    dst_slots: np.ndarray  # (kept,) patch-local slot indices
    slot_to_dst: np.ndarray  # (n_slots,) merged-row index, -1 if padded
    cluster_size: np.ndarray  # (kept,) 1 + assigned source count

    def __post_init__(self):
        valid = self.slot_to_dst >= 0
        m = len(self.dst_slots)
        if valid.sum() != self.cluster_size.sum():
            raise ConfigError("cluster sizes do not cover the non-padded slots")
        if np.any(self.slot_to_dst[self.dst_slots] != np.arange(m)):
            raise ConfigError("destination slots must map to their own rows")

    @property
    def kept_count(self) -> int:
        return len(self.dst_slots)

    @property
    def n_valid(self) -> int:
        return int((self.slot_to_dst >= 0).sum())


def identity_map(n_valid: int, n_slots: int | None = None) -> MergeMap:
    """Every valid slot survives as its own cluster."""
    n_slots = n_valid if n_slots is None else n_slots
    slot_to_dst = np.full(n_slots, -1, dtype=np.int64)
    slot_to_dst[:n_valid] = np.arange(n_valid)
    return MergeMap(
        n_slots=n_slots,
        dst_slots=np.arange(n_valid),
        slot_to_dst=slot_to_dst,
        cluster_size=np.ones(n_valid, dtype=np.int64),
    )


def _map_from_assignment(n_slots, n_valid, dst_slots, src_to_dst_slot):
    """Build a MergeMap from per-source destination slots.

    ``src_to_dst_slot`` maps each source slot to the slot (not row) it
    merges into; destination slots must not appear as sources.
    """
    dst_slots = np.asarray(dst_slots, dtype=np.int64)
    row_of_slot = {int(s): i for i, s in enumerate(dst_slots)}
    slot_to_dst = np.full(n_slots, -1, dtype=np.int64)
    slot_to_dst[:n_valid] = -2  # sentinel: valid but unassigned
    for s, row in row_of_slot.items():
        slot_to_dst[s] = row
    for src, dst_slot in src_to_dst_slot.items():
        slot_to_dst[src] = row_of_slot[int(dst_slot)]
    if np.any(slot_to_dst == -2):
        raise ConfigError("every valid slot must be a destination or a source")
    cluster_size = np.bincount(slot_to_dst[slot_to_dst >= 0], minlength=len(dst_slots))
    return MergeMap(
        n_slots=n_slots,
        dst_slots=dst_slots,
        slot_to_dst=slot_to_dst,
        cluster_size=cluster_size.astype(np.int64),
    )


def tome_match(feats: np.ndarray, rate: float, metric_feats: np.ndarray | None = None,
               n_valid: int | None = None) -> MergeMap:
    """Bipartite soft matching over an alternating src/dst split.

    Even slots are sources, odd slots destinations. Each source's best
    destination is found by cosine similarity (ties: lowest destination
    slot); the floor(rate * n) sources with the highest best-similarity
    merge (ties: lowest source slot). The alternating split caps merging
    at 50%.
    """
    feats = np.asarray(feats, dtype=np.float64)
    t = len(feats)
    n_valid = t if n_valid is None else n_valid
    if rate > 0.5:
        raise ConfigError(
            f"tome_match caps at rate 0.5 (alternating split); got {rate}. "
            "Use spatial_match for higher rates."
        )
    if rate < 0:
        raise ConfigError(f"rate must be >= 0, got {rate}")
    metric = feats if metric_feats is None else np.asarray(metric_feats, dtype=np.float64)

    src_slots = np.arange(0, n_valid, 2)
    dst_slots_b = np.arange(1, n_valid, 2)
    n_merge = min(math.floor(rate * n_valid + _FLOOR_EPS), len(src_slots))
    if n_merge == 0 or len(dst_slots_b) == 0:
        return identity_map(n_valid, t)

    unit = _unit_rows(metric[:n_valid])
    scores = unit[src_slots] @ unit[dst_slots_b].T  # (n_src, n_dst)
    best = scores.argmax(axis=1)  # first occurrence = lowest dst slot
    best_sim = scores[np.arange(len(src_slots)), best]
    order = np.argsort(-best_sim, kind="stable")  # ties: lowest src slot first
    merged_src = src_slots[order[:n_merge]]
    merged_dst = dst_slots_b[best[order[:n_merge]]]

    survivors = np.setdiff1d(np.arange(n_valid), merged_src, assume_unique=True)
    return _map_from_assignment(
        t, n_valid, survivors,
        {int(s): int(d) for s, d in zip(merged_src, merged_dst)},
    )


@dataclass
class BinLayout:
    """K contiguous, near-equal bins over a patch's valid slots."""

    n_tokens: int
    offsets: np.ndarray  # (K + 1,) bin boundaries over 0..n_tokens
    dst_in_bin: np.ndarray  # (K,) one chosen slot per bin

    @property
    def n_bins(self) -> int:
        return len(self.dst_in_bin)

    def __post_init__(self):
        if np.any(self.dst_in_bin < self.offsets[:-1]) or np.any(
            self.dst_in_bin >= self.offsets[1:]
        ):
            raise ConfigError("each destination must lie inside its bin")


def bin_count(n_tokens: int, rate: float, policy: MergePolicy) -> int:
    """Number of bins: floor(T * (1 - rate)) in dynamic mode, else fixed."""
    if policy.bin_mode == "fixed":
        return min(policy.fixed_bins, n_tokens)
    return min(math.floor(n_tokens * (1.0 - rate) + _FLOOR_EPS), n_tokens)


def make_bins(n_tokens: int, rate: float, policy: MergePolicy,
              rng: np.random.Generator) -> BinLayout:
    """Evenly sized contiguous bins with one random destination each.

    Bin sizes differ by at most one; the destination of each bin is drawn
    uniformly from the supplied substream.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"rate must lie in [0, 1), got {rate}")
    k = bin_count(n_tokens, rate, policy)
    if k < 1:
        raise ConfigError(
            f"K = 0: rate {rate} is too high for patch size {n_tokens} "
            f"(floor({n_tokens} * (1 - {rate})) = 0)"
        )
    offsets = np.round(np.linspace(0, n_tokens, k + 1)).astype(np.int64)
    lengths = np.diff(offsets)
    dst = offsets[:-1] + rng.integers(0, lengths)
    return BinLayout(n_tokens=n_tokens, offsets=offsets, dst_in_bin=dst)


def spatial_match(feats: np.ndarray, layout: BinLayout, assignment: str = "bin_local",
                  metric_feats: np.ndarray | None = None,
                  n_slots: int | None = None) -> MergeMap:
    """Merge every non-destination slot according to the bin layout.

    ``bin_local`` sends each source into its own bin's destination
    regardless of features; ``global_similar`` sends each source to its
    highest-cosine destination among all bins (ties: lowest destination
    slot). Either way exactly K tokens survive.
    """
    n = layout.n_tokens
    n_slots = n if n_slots is None else n_slots
    dst_slots = np.sort(layout.dst_in_bin)
    is_dst = np.zeros(n, dtype=bool)
    is_dst[dst_slots] = True
    sources = np.nonzero(~is_dst)[0]

    if assignment == "bin_local":
        bin_of_slot = np.searchsorted(layout.offsets, np.arange(n), side="right") - 1
        # dst_in_bin is ascending across bins (bins are disjoint ascending
        # ranges), so sorting preserves the bin association.
        target = layout.dst_in_bin[bin_of_slot[sources]]
    elif assignment == "global_similar":
        metric = feats if metric_feats is None else metric_feats
        unit = _unit_rows(np.asarray(metric, dtype=np.float64)[:n])
        sims = unit[sources] @ unit[dst_slots].T
        target = dst_slots[sims.argmax(axis=1)]  # first max = lowest dst slot
    else:
        raise ConfigError(f"unknown assignment {assignment!r}")

    return _map_from_assignment(
        n_slots, n, dst_slots, {int(s): int(d) for s, d in zip(sources, target)}
    )


def merge_apply(feats: np.ndarray, mmap: MergeMap) -> np.ndarray:
    """Average each cluster: destination row plus its assigned sources."""
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) != mmap.n_slots:
        raise ConfigError(
            f"feats rows ({len(feats)}) do not match map slots ({mmap.n_slots})"
        )
    valid = mmap.slot_to_dst >= 0
    sums = np.zeros((mmap.kept_count, feats.shape[1]))
    np.add.at(sums, mmap.slot_to_dst[valid], feats[valid])
    return sums / mmap.cluster_size[:, None]


def unmerge(merged: np.ndarray, mmap: MergeMap) -> np.ndarray:
    """Copy each cluster's merged row back to all of its original slots."""
    merged = np.asarray(merged, dtype=np.float64)
    if len(merged) != mmap.kept_count:
        raise ConfigError(
            f"merged rows ({len(merged)}) do not match kept count ({mmap.kept_count})"
        )
    out = np.zeros((mmap.n_slots, merged.shape[1]))
    valid = mmap.slot_to_dst >= 0
    out[valid] = merged[mmap.slot_to_dst[valid]]
    return out


def _metric_features(feats, q, k, v, policy):
    return {"raw": feats, "Q": q, "K": k, "V": v}[policy.metric]


def _head_slice(x, head, heads):
    d = x.shape[1] // heads
    return x[:, head * d : (head + 1) * d]


def build_merge_maps(feats, q, k, v, policy: MergePolicy, rate: float,
                     n_valid: int, rng: np.random.Generator) -> list[MergeMap]:
    """One merge map per head (or a single shared map).

    The spatial matcher is the default for both branches; the classic
    bipartite matcher is used only when the policy opts in and the rate
    is within its 50% cap. Rate 0 short-circuits to the identity.
    """
    t = len(feats)
    if rate == 0.0:
        return [identity_map(n_valid, t)]
    metric = _metric_features(feats, q, k, v, policy)

    use_tome = policy.use_tome_below_half and rate <= 0.5
    if use_tome:
        if not policy.per_head:
            return [tome_match(feats, rate, metric_feats=metric, n_valid=n_valid)]
        heads = q.shape[1] // (q.shape[1] // max(1, q.shape[1]))  # placeholder
        raise AssertionError  # replaced below
    layout = make_bins(n_valid, rate, policy, rng)
    if policy.assignment == "bin_local" or not policy.per_head:
        return [
            spatial_match(feats[:n_valid], layout, assignment=policy.assignment,
                          metric_feats=metric[:n_valid], n_slots=t)
        ]
    raise AssertionError  # replaced below
