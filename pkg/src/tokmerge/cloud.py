"""Point-cloud data model, synthetic scene generation, and ascii file I/O.

A :class:`PointCloud` is the token substrate: N points with 3D coordinates
(meters) and a C-dimensional feature vector per point. Synthetic scenes
place objects in disjoint axis-aligned boxes and give every point of an
object the same unit base feature vector plus optional Gaussian noise, so
features are separable by object without a trained model.

Supported file formats are whitespace-separated ``.xyz`` (``x y z
[f1..fC]`` per line) and ascii PLY with float x/y/z properties. Binary PLY
is deliberately unsupported; ascii keeps the parser auditable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError, ParseError

DEFAULT_FEATURE_DIM = 64

# Objects are laid out on a cubic lattice of boxes with this pitch; boxes
# have unit side, so any two objects are separated by at least one unit.
_BOX_SIDE = 1.0
_BOX_PITCH = 2.0


@dataclass
class PointCloud:
    """N points with coordinates (N, 3) and per-point features (N, C)."""

    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ConfigError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.feats.ndim != 2:
            raise ConfigError(f"feats must be (N, C), got {self.feats.shape}")
        if len(self.coords) != len(self.feats):
            raise ConfigError(
                f"coords ({len(self.coords)}) and feats ({len(self.feats)}) "
                "disagree on point count"
            )
        if len(self.coords) < 1:
            raise ConfigError("point cloud must contain at least one point")
        if self.feats.shape[1] < 1:
            raise ConfigError("feature dimension must be at least 1")
        if not np.isfinite(self.coords).all():
            raise NonFiniteError("coordinates contain non-finite values")
        if not np.isfinite(self.feats).all():
            raise NonFiniteError("features contain non-finite values")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def n_channels(self) -> int:
        return self.feats.shape[1]


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for synthetic object-separable scenes."""

    object_count: int
    points_per_object: int
    feature_dim: int = DEFAULT_FEATURE_DIM
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.object_count < 1:
            raise ConfigError("object_count must be >= 1")
        if self.points_per_object < 1:
            raise ConfigError("points_per_object must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _object_base_vectors(rng, count, dim):
    """Random unit vectors, one per object, pairwise cos strictly below 1."""
    bases = np.empty((count, dim))
    for i in range(count):
        for _ in range(100):
            v = rng.normal(size=dim)
            norm = np.linalg.norm(v)
            if norm == 0.0:
                continue
            v = v / norm
            if i == 0 or np.max(bases[:i] @ v) < 1.0 - 1e-12:
                bases[i] = v
                break
        else:
            raise ConfigError(
                f"cannot draw {count} distinct unit base vectors in "
                f"{dim} dimensions"
            )
    return bases


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Generate an object-separable synthetic scene.

    Each object occupies its own unit box on a cubic lattice (pitch 2, so
    boxes are disjoint) and all of its points share one random unit base
    feature vector, perturbed by Gaussian noise of std ``noise_sigma``.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    bases = _object_base_vectors(rng, spec.object_count, spec.feature_dim)

    per_axis = int(np.ceil(spec.object_count ** (1.0 / 3.0)))
    while per_axis**3 < spec.object_count:  # guard cbrt rounding
        per_axis += 1

    n_total = spec.object_count * spec.points_per_object
    coords = np.empty((n_total, 3))
    feats = np.empty((n_total, spec.feature_dim))
    for obj in range(spec.object_count):
        ix = obj % per_axis
        iy = (obj // per_axis) % per_axis
        iz = obj // (per_axis * per_axis)
        origin = _BOX_PITCH * np.array([ix, iy, iz], dtype=np.float64)
        sl = slice(obj * spec.points_per_object, (obj + 1) * spec.points_per_object)
        coords[sl] = origin + _BOX_SIDE * rng.random((spec.points_per_object, 3))
        feats[sl] = bases[obj]
        if spec.noise_sigma > 0:
            feats[sl] += spec.noise_sigma * rng.normal(
                size=(spec.points_per_object, spec.feature_dim)
            )
    return PointCloud(coords, feats)


def object_labels(spec: SceneSpec) -> np.ndarray:
    """Object index per point, matching :func:`generate_scene` row order."""
    return np.repeat(np.arange(spec.object_count), spec.points_per_object)


def _normalized_coords(coords):
    """Coordinates min-max normalized to [0, 1] per axis (degenerate -> 0)."""
    lo = coords.min(axis=0)
    extent = coords.max(axis=0) - lo
    safe = np.where(extent > 0, extent, 1.0)
    return np.where(extent > 0, (coords - lo) / safe, 0.0)


def _parse_float_row(parts, path, lineno):
    try:
        row = [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(str(exc), path=path, line=lineno) from None
    if not all(np.isfinite(row)):
        raise ParseError("non-finite value", path=path, line=lineno)
    return row


def _load_xyz(path):
    coords, feats = [], []
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ParseError(
                    f"expected at least 3 columns, got {len(parts)}",
                    path=path, line=lineno,
                )
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(
                    f"inconsistent column count ({len(parts)} vs {width})",
                    path=path, line=lineno,
                )
            row = _parse_float_row(parts, path, lineno)
            coords.append(row[:3])
            feats.append(row[3:])
    if not coords:
        raise ParseError("file contains no points", path=path)
    coords = np.asarray(coords)
    if width > 3:
        return coords, np.asarray(feats)
    return coords, None


def _load_ply_ascii(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path=path, line=1)

    n_vertex = None
    properties = []  # scalar float property names of the vertex element
    in_vertex_element = False
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ParseError("only ascii PLY is supported", path=path, line=lineno)
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertex = int(tokens[2])
                except (IndexError, ValueError):
                    raise ParseError("bad vertex count", path=path, line=lineno) from None
        elif tokens[0] == "property" and in_vertex_element:
            if tokens[1] in ("float", "float32", "double", "float64"):
                properties.append(tokens[2])
        elif tokens[0] == "end_header":
            body_start = lineno  # lines[] is 0-based; lineno is 1-based
            break
    if body_start is None:
        raise ParseError("missing end_header", path=path)
    if n_vertex is None:
        raise ParseError("missing 'element vertex'", path=path)
    for axis in ("x", "y", "z"):
        if axis not in properties:
            raise ParseError(f"missing vertex property '{axis}'", path=path)

    rows = []
    lineno = body_start
    for line in lines[body_start:]:
        lineno += 1
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(properties):
            raise ParseError(
                f"expected {len(properties)} values, got {len(parts)}",
                path=path, line=lineno,
            )
        rows.append(_parse_float_row(parts, path, lineno))
        if len(rows) == n_vertex:
            break
    if len(rows) != n_vertex:
        raise ParseError(
            f"expected {n_vertex} vertices, found {len(rows)}", path=path
        )
    data = np.asarray(rows)
    order = [properties.index(a) for a in ("x", "y", "z")]
    coords = data[:, order]
    extra = [i for i in range(len(properties)) if i not in order]
    return coords, data[:, extra] if extra else None


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Load a point cloud from an ``.xyz`` or ascii ``.ply`` file.

    When the file carries no feature columns, features default to the
    coordinates min-max normalized to [0, 1] per axis (C=3).
    """
    if format is None:
        format = "ply-ascii" if str(path).lower().endswith(".ply") else "xyz"
    if format == "xyz":
        coords, feats = _load_xyz(path)
    elif format == "ply-ascii":
        coords, feats = _load_ply_ascii(path)
    else:
        raise ConfigError(f"unknown format {format!r} (expected 'xyz' or 'ply-ascii')")
    if feats is None:
        feats = _normalized_coords(coords)
    return PointCloud(coords, feats)


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    """Write a cloud as ``.xyz`` or ascii ``.ply``.

    Values are printed with repr precision (%.17g) so that a load/save/load
    round trip is exact at printed precision.
    """
    if format is None:
        format = "ply-ascii" if str(path).lower().endswith(".ply") else "xyz"
    data = np.hstack([cloud.coords, cloud.feats])
    if format == "xyz":
        with open(path, "w") as fh:
            for row in data:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    elif format == "ply-ascii":
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {cloud.n_points}\n")
            for axis in ("x", "y", "z"):
                fh.write(f"property double {axis}\n")
            for c in range(cloud.n_channels):
                fh.write(f"property double f{c}\n")
            fh.write("end_header\n")
            for row in data:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    else:
        raise ConfigError(f"unknown format {format!r} (expected 'xyz' or 'ply-ascii')")
