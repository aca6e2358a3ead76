"""Space-filling-curve ordering of points and fixed-size patch partitioning.

Points are quantized onto a ``2^grid_bits`` per-axis grid anchored at the
bounding-box minimum (each axis scaled by its own extent), encoded along a
Morton or Hilbert curve, and stably sorted by code so that ties keep the
original index order. The serialized sequence is then cut into patches of
exactly ``T`` slots; only the final patch may contain padded slots, which
every downstream consumer must exclude via the pad mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import ConfigError

MAX_GRID_BITS = 21  # 3 * 21 = 63 code bits, fits in uint64


def _check_grid_bits(grid_bits):
    if not 1 <= grid_bits <= MAX_GRID_BITS:
        raise ConfigError(f"grid_bits must be in [1, {MAX_GRID_BITS}], got {grid_bits}")


def _spread_bits_3(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between the low 21 bits of each value."""
    v = v.astype(np.uint64)
    v &= np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _interleave3(a, b, c):
    """Bit-interleave three arrays: a at bit 0, b at bit 1, c at bit 2."""
    return _spread_bits_3(a) | (_spread_bits_3(b) << np.uint64(1)) | (
        _spread_bits_3(c) << np.uint64(2)
    )


def morton_codes(cells: np.ndarray, grid_bits: int) -> np.ndarray:
    """Morton (z-order) codes for integer grid cells of shape (N, 3).

    Bits interleave z-y-x from the least significant bit upward: x bit q
    lands at code bit 3q, y at 3q+1, z at 3q+2.
    """
    _check_grid_bits(grid_bits)
    cells = np.asarray(cells, dtype=np.int64)
    if cells.min() < 0 or cells.max() >= (1 << grid_bits):
        raise ConfigError(
            f"cell coordinates must lie in [0, 2^{grid_bits}) per axis"
        )
    return _interleave3(cells[:, 0], cells[:, 1], cells[:, 2])


def morton_encode(cell, grid_bits: int) -> int:
    """Morton code of a single (x, y, z) grid cell."""
    return int(morton_codes(np.asarray(cell).reshape(1, 3), grid_bits)[0])


def hilbert_codes(cells: np.ndarray, grid_bits: int) -> np.ndarray:
    """Hilbert curve indices for integer grid cells of shape (N, 3).

    Uses the transpose-based gray-code construction; consecutive indices
    visit face-adjacent cells, which the tests assert directly.
    """
    _check_grid_bits(grid_bits)
    cells = np.asarray(cells, dtype=np.int64)
    if cells.min() < 0 or cells.max() >= (1 << grid_bits):
        raise ConfigError(
            f"cell coordinates must lie in [0, 2^{grid_bits}) per axis"
        )
    x = [cells[:, i].astype(np.uint64).copy() for i in range(3)]

    # Undo excess work: walk from the top bit down, exchanging/inverting
    # low bits so each axis becomes a gray-code digit stream.
    q = np.uint64(1) << np.uint64(grid_bits - 1)
    one = np.uint64(1)
    while q > one:
        p = q - one
        for i in range(3):
            hi = (x[i] & q) != 0
            x[0] = np.where(hi, x[0] ^ p, x[0])
            t = np.where(hi, np.uint64(0), (x[0] ^ x[i]) & p)
            x[0] ^= t
            x[i] ^= t
        q >>= one

    for i in range(1, 3):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    q = np.uint64(1) << np.uint64(grid_bits - 1)
    while q > one:
        t = np.where((x[2] & q) != 0, t ^ (q - one), t)
        q >>= one
    for i in range(3):
        x[i] ^= t

    # Interleave the transposed form: axis 0 holds the most significant
    # bit of each 3-bit group.
    return _interleave3(x[2], x[1], x[0])


def hilbert_encode(cell, grid_bits: int) -> int:
    """Hilbert index of a single (x, y, z) grid cell."""
    return int(hilbert_codes(np.asarray(cell).reshape(1, 3), grid_bits)[0])


_CURVES = {"morton": morton_codes, "hilbert": hilbert_codes}


@dataclass
class SerializedOrder:
    """A space-filling-curve ordering of a cloud.

    ``perm[s]`` is the original point index occupying serialized position
    ``s``; it is always a bijection on 0..N-1.
    """

    perm: np.ndarray
    curve: str
    grid_bits: int

    @property
    def n_points(self) -> int:
        return len(self.perm)


def quantize(coords: np.ndarray, grid_bits: int) -> np.ndarray:
    """Map coordinates onto the integer grid over their bounding box."""
    coords = np.asarray(coords, dtype=np.float64)
    lo = coords.min(axis=0)
    extent = coords.max(axis=0) - lo
    scale = np.where(extent > 0, (1 << grid_bits) / np.where(extent > 0, extent, 1.0), 0.0)
    cells = np.floor((coords - lo) * scale).astype(np.int64)
    return np.clip(cells, 0, (1 << grid_bits) - 1)


def serialize(cloud: PointCloud, curve: str = "morton", grid_bits: int = 10) -> SerializedOrder:
    """Order a cloud's points along a space-filling curve.

    Ties (points in the same grid cell) are broken by original index
    ascending, so a degenerate bounding box preserves the input order.
    """
    if curve not in _CURVES:
        raise ConfigError(f"unknown curve {curve!r} (expected one of {sorted(_CURVES)})")
    _check_grid_bits(grid_bits)
    cells = quantize(cloud.coords, grid_bits)
    codes = _CURVES[curve](cells, grid_bits)
    perm = np.argsort(codes, kind="stable")
    return SerializedOrder(perm=perm, curve=curve, grid_bits=grid_bits)


@dataclass
class PatchSet:
    """Serialized positions cut into ``n_patches`` patches of ``T`` slots.

    ``indices[k, t]`` is the original point index at slot ``t`` of patch
    ``k`` (serialized position ``k*T + t``); padded slots in the final
    patch repeat the last valid point and are flagged in ``pad_mask``.
    """

    patch_size: int
    indices: np.ndarray  # (n_patches, T) original point indices
    pad_mask: np.ndarray  # (n_patches, T) True where padded
    n_points: int

    @property
    def n_patches(self) -> int:
        return self.indices.shape[0]

    def valid_counts(self) -> np.ndarray:
        """Number of non-padded slots per patch."""
        return (~self.pad_mask).sum(axis=1)

    def gather(self, values: np.ndarray) -> np.ndarray:
        """Per-patch view (n_patches, T, ...) of per-point values."""
        return values[self.indices]

    def scatter(self, patch_values: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Write per-slot values back to per-point order, skipping padding."""
        if out is None:
            out = np.zeros((self.n_points,) + patch_values.shape[2:], dtype=patch_values.dtype)
        valid = ~self.pad_mask
        out[self.indices[valid]] = patch_values[valid]
        return out


def partition(order: SerializedOrder, patch_size: int) -> PatchSet:
    """Cut a serialized order into ceil(N/T) patches of exactly T slots.

    The final patch is padded to T by repeating its last valid point; the
    pad mask marks those slots so attention, centroids, merging, and
    statistics can exclude them.
    """
    if patch_size < 2:
        raise ConfigError(f"patch size must be >= 2, got {patch_size}")
    n = order.n_points
    n_patches = -(-n // patch_size)
    padded = n_patches * patch_size
    positions = np.arange(padded)
    pad_mask = positions >= n
    positions = np.minimum(positions, n - 1)
    indices = order.perm[positions]
    return PatchSet(
        patch_size=patch_size,
        indices=indices.reshape(n_patches, patch_size),
        pad_mask=pad_mask.reshape(n_patches, patch_size),
        n_points=n,
    )
