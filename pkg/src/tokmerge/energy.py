"""Globally-informed energy scores and the adaptive merge-rate policy.

Every token is connected to every patch centroid by a directed bipartite
graph; a token's energy is the negated mean cosine similarity to all
centroids, so low energy means "aligned with the global structure" and
therefore safe to merge aggressively. Patch energy is the mean of its
tokens' energies, and the branching rule is literal: a patch merges at the
moderate rate when its energy strictly exceeds the threshold, at the
aggressive rate otherwise.

A local (within-patch) energy variant is provided as a comparison mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counters import FlopCounter, tally
from .errors import ConfigError
from .serialization import PatchSet

ENERGY_METRICS = ("raw", "Q", "K", "V")
MERGE_METRICS = ("Q", "K", "V", "raw")
BIN_MODES = ("dynamic", "fixed")
ASSIGNMENTS = ("bin_local", "global_similar")


@dataclass(frozen=True)
class MergePolicy:
    """Knobs for adaptive merging.

    ``metric`` selects the features used for similarity matching during
    merging (value projection by default); ``energy_metric`` selects the
    features fed to the energy graph (raw features by default, so energy
    stays independent of head structure).
    """

    tau: float = 0.2
    rate: float = 0.8
    rate_plus: float = 0.97
    metric: str = "V"
    per_head: bool = True
    bin_mode: str = "dynamic"
    fixed_bins: int = 32
    assignment: str = "bin_local"
    seed: int = 0
    energy_metric: str = "raw"
    use_tome_below_half: bool = False
    proportional: bool = False

    def __post_init__(self):
        if not -1.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [-1, 1], got {self.tau}")
        if not 0.0 <= self.rate < self.rate_plus < 1.0:
            raise ConfigError(
                f"rates must satisfy 0 <= rate < rate_plus < 1, got "
                f"rate={self.rate}, rate_plus={self.rate_plus}"
            )
        if self.metric not in MERGE_METRICS:
            raise ConfigError(f"metric must be one of {MERGE_METRICS}, got {self.metric!r}")
        if self.energy_metric not in ENERGY_METRICS:
            raise ConfigError(
                f"energy_metric must be one of {ENERGY_METRICS}, got {self.energy_metric!r}"
            )
        if self.bin_mode not in BIN_MODES:
            raise ConfigError(f"bin_mode must be one of {BIN_MODES}, got {self.bin_mode!r}")
        if self.bin_mode == "fixed" and self.fixed_bins < 1:
            raise ConfigError(f"fixed_bins must be >= 1, got {self.fixed_bins}")
        if self.assignment not in ASSIGNMENTS:
            raise ConfigError(
                f"assignment must be one of {ASSIGNMENTS}, got {self.assignment!r}"
            )


@dataclass
class EnergyField:
    """Per-token and per-patch energies plus the centroids that drove them."""

    token_energy: np.ndarray  # (N,) in [-1, 1]
    patch_energy: np.ndarray  # (n_patches,) in [-1, 1]
    centroids: np.ndarray  # (n_patches, C)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm; zero rows stay zero (cos vs 0 is 0)."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), 0.0)


def patch_centroids(feats: np.ndarray, patches: PatchSet) -> np.ndarray:
    """Mean of each patch's non-padded token features."""
    gathered = patches.gather(feats)  # (K, T, C)
    valid = ~patches.pad_mask
    sums = np.where(valid[:, :, None], gathered, 0.0).sum(axis=1)
    return sums / valid.sum(axis=1)[:, None]


def global_energy(feats: np.ndarray, centroids: np.ndarray,
                  counter: FlopCounter | None = None) -> np.ndarray:
    """Negated mean cosine similarity of each token to all patch centroids.

    The bipartite edge set connects every token to every centroid, so the
    similarity matmul performs exactly N * n_centroids * C
    multiply-accumulates.
    """
    feats = np.asarray(feats, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or len(centroids) == 0:
        raise ConfigError("centroids must be a non-empty (K, C) array")
    cos = _unit_rows(feats) @ _unit_rows(centroids).T
    tally(counter, "graph", 2 * feats.shape[0] * centroids.shape[0] * feats.shape[1])
    return -cos.mean(axis=1)


def local_energy(feats: np.ndarray, patches: PatchSet,
                 window: int | None = None) -> np.ndarray:
    """Within-patch energy: negated mean cosine to the patch's other tokens.

    ``window`` optionally restricts the comparison to tokens within that
    many serialized slots; by default the whole patch participates.
    """
    if window is not None and window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    n = len(feats)
    out = np.zeros(n)
    unit = _unit_rows(np.asarray(feats, dtype=np.float64))
    for k in range(patches.n_patches):
        valid = ~patches.pad_mask[k]
        idx = patches.indices[k][valid]
        t = len(idx)
        if t == 1:
            out[idx[0]] = 0.0
            continue
        u = unit[idx]
        cos = u @ u.T
        include = ~np.eye(t, dtype=bool)
        if window is not None:
            slots = np.arange(t)
            include &= np.abs(slots[:, None] - slots[None, :]) <= window
        counts = include.sum(axis=1)
        sums = np.where(include, cos, 0.0).sum(axis=1)
        out[idx] = -np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return out


def patch_energy(token_energy: np.ndarray, patches: PatchSet) -> np.ndarray:
    """Mean token energy per patch, excluding padded slots."""
    gathered = patches.gather(np.asarray(token_energy, dtype=np.float64))
    valid = ~patches.pad_mask
    return np.where(valid, gathered, 0.0).sum(axis=1) / valid.sum(axis=1)


def adaptive_rates(patch_energies: np.ndarray, policy: MergePolicy) -> np.ndarray:
    """Per-patch merge rate: moderate above the threshold, aggressive otherwise.

    The comparison is strictly greater-than, so a patch whose energy equals
    the threshold exactly is merged aggressively.
    """
    patch_energies = np.asarray(patch_energies, dtype=np.float64)
    return np.where(patch_energies > policy.tau, policy.rate, policy.rate_plus)


def compute_energy_field(feats: np.ndarray, patches: PatchSet,
                         mode: str = "global", window: int | None = None,
                         counter: FlopCounter | None = None) -> EnergyField:
    """Centroids, token energies, and patch energies in one pass."""
    centroids = patch_centroids(feats, patches)
    if mode == "global":
        tok = global_energy(feats, centroids, counter=counter)
    elif mode == "local":
        tok = local_energy(feats, patches, window=window)
    else:
        raise ConfigError(f"unknown energy mode {mode!r} (expected 'global' or 'local')")
    return EnergyField(token_energy=tok, patch_energy=patch_energy(tok, patches),
                       centroids=centroids)
