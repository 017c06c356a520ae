"""Dataset ingestion: PLY/XYZ parsing, normalization, resampling and
seeded synthetic shape generation for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import InvalidArgument, ParseError
from .geometry import PointCloud

SYNTH_KINDS = ("sphere", "cube", "torus", "cylinder", "two-spheres")


# ---------------------------------------------------------------------------
# file formats (ASCII PLY and XYZ)


def load_cloud(path, fmt=None) -> PointCloud:
    """Load a point cloud from an ASCII PLY or XYZ file (format by extension
    when ``fmt`` is None)."""
    fmt = fmt or _guess_format(path)
    if fmt == "ascii-ply":
        return _load_ply(path)
    if fmt == "xyz":
        return _load_xyz(path)
    raise InvalidArgument(f"unknown format {fmt!r}")


def save_cloud(cloud: PointCloud, path, fmt=None):
    fmt = fmt or _guess_format(path)
    pts = cloud.points
    if pts.shape[0] == 0:
        raise InvalidArgument("refusing to write an empty cloud")
    with open(path, "w") as fh:
        if fmt == "ascii-ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {pts.shape[0]}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("end_header\n")
        elif fmt != "xyz":
            raise InvalidArgument(f"unknown format {fmt!r}")
        for x, y, z in pts:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def _guess_format(path):
    p = str(path).lower()
    if p.endswith(".ply"):
        return "ascii-ply"
    if p.endswith(".xyz") or p.endswith(".txt"):
        return "xyz"
    raise InvalidArgument(f"cannot infer format from {path!r}; pass fmt explicitly")


def _load_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)
    n_vertex = None
    props = []
    in_vertex_element = False
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError("only ascii PLY is supported", line=i)
        elif tok[0] == "element":
            in_vertex_element = tok[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError("bad element vertex count", line=i)
        elif tok[0] == "property" and in_vertex_element:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i
            break
    if n_vertex is None or body_start is None:
        raise ParseError("header missing element vertex or end_header", line=len(lines))
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x/y/z properties", line=body_start)

    pts = np.empty((n_vertex, 3), dtype=np.float64)
    for row in range(n_vertex):
        lineno = body_start + 1 + row
        if lineno > len(lines) or not lines[lineno - 1].split():
            raise ParseError(f"expected {n_vertex} vertices, file ends at row {row}", line=lineno)
        tok = lines[lineno - 1].split()
        try:
            pts[row] = [float(tok[c]) for c in cols]
        except (IndexError, ValueError):
            raise ParseError("malformed vertex row", line=lineno)
    return PointCloud(pts)


def _load_xyz(path):
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            stripped = raw.split("#", 1)[0].strip()
            if not stripped:
                continue
            tok = stripped.split()
            if len(tok) < 3:
                raise ParseError("expected three coordinates", line=lineno)
            try:
                rows.append([float(tok[0]), float(tok[1]), float(tok[2])])
            except ValueError:
                raise ParseError("malformed coordinate", line=lineno)
    if not rows:
        raise ParseError("file holds no points", line=1)
    return PointCloud(np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# normalization / resampling


@dataclass(frozen=True)
class NormalizationRecord:
    centroid: np.ndarray
    scale: float  # divisor applied after centering

    def invert(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(cloud.points * self.scale + self.centroid)


def normalize(cloud: PointCloud):
    """Center at the origin and scale into [-0.5, 0.5]; returns the record
    needed to invert the transform."""
    centroid = cloud.points.mean(axis=0)
    centered = cloud.points - centroid
    extent = np.abs(centered).max()
    scale = 2.0 * extent if extent > 0 else 1.0
    return PointCloud(centered / scale), NormalizationRecord(centroid=centroid, scale=scale)


def resample(cloud: PointCloud, target, method="fps", seed=0) -> PointCloud:
    """Exactly ``target`` points, by farthest-point or uniform sampling."""
    if target < 1:
        raise InvalidArgument(f"target must be >= 1, got {target}")
    n = len(cloud)
    if method == "fps":
        if target > n:
            raise InvalidArgument(f"fps resample cannot grow {n} points to {target}")
        idx = geometry.fps(cloud, target, seed_index=0)
    elif method == "random":
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=target, replace=target > n)
    else:
        raise InvalidArgument(f"unknown resample method {method!r}")
    return PointCloud(cloud.points[idx])


# ---------------------------------------------------------------------------
# synthetic shapes


def synth_shape(kind, n, noise_sigma=0.0, seed=0) -> PointCloud:
    """Deterministic area-weighted surface sampling of a primitive shape,
    plus optional Gaussian jitter; output is normalized."""
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts = _sample_sphere(rng, n, radius=0.5)
    elif kind == "cube":
        pts = _sample_cube(rng, n)
    elif kind == "torus":
        pts = _sample_torus(rng, n, big_r=0.35, small_r=0.15)
    elif kind == "cylinder":
        pts = _sample_cylinder(rng, n, radius=0.3, height=1.0)
    elif kind == "two-spheres":
        half = n // 2
        a = _sample_sphere(rng, half, radius=0.22) + np.array([-0.28, 0.0, 0.0])
        b = _sample_sphere(rng, n - half, radius=0.22) + np.array([0.28, 0.0, 0.0])
        pts = np.concatenate([a, b], axis=0)
    else:
        raise InvalidArgument(f"unknown shape kind {kind!r}; choose from {SYNTH_KINDS}")
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    cloud, _ = normalize(PointCloud(pts))
    return cloud


def _sample_sphere(rng, n, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def _sample_cube(rng, n):
    # pick a face uniformly (equal areas), then a uniform point on it
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    for i in range(n):
        coords = [0.0, 0.0, 0.0]
        coords[axis[i]] = sign[i]
        other = [a for a in range(3) if a != axis[i]]
        coords[other[0]], coords[other[1]] = uv[i]
        pts[i] = coords
    return pts


def _sample_torus(rng, n, big_r, small_r):
    # rejection on the major angle keeps the sampling area-weighted
    pts = np.empty((n, 3))
    count = 0
    while count < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * (n - count))
        v = rng.uniform(0, 2 * np.pi, size=2 * (n - count))
        accept = rng.uniform(size=2 * (n - count)) <= (big_r + small_r * np.cos(v)) / (
            big_r + small_r
        )
        u, v = u[accept], v[accept]
        take = min(len(u), n - count)
        r = big_r + small_r * np.cos(v[:take])
        pts[count : count + take, 0] = r * np.cos(u[:take])
        pts[count : count + take, 1] = r * np.sin(u[:take])
        pts[count : count + take, 2] = small_r * np.sin(v[:take])
        count += take
    return pts


def _sample_cylinder(rng, n, radius, height):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius**2
    total = side_area + 2 * cap_area
    pts = np.empty((n, 3))
    which = rng.uniform(size=n) * total
    theta = rng.uniform(0, 2 * np.pi, size=n)
    for i in range(n):
        if which[i] < side_area:
            z = rng.uniform(-height / 2, height / 2)
            pts[i] = [radius * np.cos(theta[i]), radius * np.sin(theta[i]), z]
        else:
            rr = radius * np.sqrt(rng.uniform())
            z = height / 2 if which[i] < side_area + cap_area else -height / 2
            pts[i] = [rr * np.cos(theta[i]), rr * np.sin(theta[i]), z]
    return pts


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    entry_id: str
    spec: str  # a file path, or "synth:<kind>:<n>:<sigma>:<seed>"
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    target_points: int

    def load(self, split=None):
        """Materialize clouds (normalized, resampled to target_points)."""
        clouds = []
        for entry in self.entries:
            if split is not None and entry.split != split:
                continue
            clouds.append((entry.entry_id, _resolve_entry(entry, self.target_points)))
        return clouds


def _resolve_entry(entry: ManifestEntry, target_points):
    if entry.spec.startswith("synth:"):
        _, kind, n, sigma, seed = entry.spec.split(":")
        cloud = synth_shape(kind, int(n), float(sigma), int(seed))
    else:
        cloud, _ = normalize(load_cloud(entry.spec))
    if len(cloud) != target_points:
        cloud = resample(cloud, target_points, method="fps")
    return cloud


def read_manifest(path, target_points) -> DatasetManifest:
    """One entry per line: ``id<TAB>spec<TAB>split``."""
    entries = []
    seen = set()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected id<TAB>spec<TAB>split", line=lineno)
            entry_id, spec, split = parts
            if entry_id in seen:
                raise ParseError(f"duplicate id {entry_id!r}", line=lineno)
            seen.add(entry_id)
            entries.append(ManifestEntry(entry_id, spec, split))
    return DatasetManifest(entries=tuple(entries), target_points=target_points)
