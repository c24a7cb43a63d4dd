"""Synthetic parametric-shape datasets, point-cloud text I/O and manifests.

Shapes are sampled uniformly by surface area from analytic primitives, so
every point carries an exact unit normal and a part label for its
primitive region. Per-kind part label sets are fixed:

  sphere:   0 upper hemisphere, 1 lower
  cube:     0..5, one per face (+x, -x, +y, -y, +z, -z)
  cylinder: 0 side, 1 top cap, 2 bottom cap
  cone:     0 side, 1 base
  torus:    0 outer half of tube, 1 inner half
  plane:    0 left half (x < 0), 1 right half
  pyramid:  0 base, 1 slanted sides
  helix:    0 outward half of tube, 1 inward half

Generation is deterministic given a seed: each shape derives its own RNG
stream from (seed, shape index), so parallel generation can never change
the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import PointCloud


class ValidationError(ValueError):
    pass


class ParseError(ValueError):
    pass


class FormatError(ValueError):
    pass


SHAPE_KINDS = (
    "sphere", "cube", "cylinder", "cone", "torus", "plane", "pyramid", "helix",
)

PART_SETS = {
    "sphere": (0, 1),
    "cube": (0, 1, 2, 3, 4, 5),
    "cylinder": (0, 1, 2),
    "cone": (0, 1),
    "torus": (0, 1),
    "plane": (0, 1),
    "pyramid": (0, 1),
    "helix": (0, 1),
}

MANIFEST_VERSION = 1


@dataclass
class ShapeSpec:
    """One parametric shape: kind, size parameters, pose, sampling count
    and noise level (sigma as a fraction of the bounding-box diagonal)."""

    kind: str
    n_points: int = 256
    params: dict = field(default_factory=dict)
    rotation: Optional[np.ndarray] = None   # 3x3, applied to points and normals
    translation: Optional[np.ndarray] = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if self.n_points < 8:
            raise ValidationError("n_points must be at least 8")
        for key, value in self.params.items():
            if value <= 0:
                raise ValidationError(f"size parameter {key}={value} must be > 0")


def _unit_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(n, rng, radius=1.0):
    dirs = _unit_rows(rng.normal(size=(n, 3)))
    labels = np.where(dirs[:, 2] >= 0, 0, 1)
    return radius * dirs, dirs, labels


def _sample_cube(n, rng, edge=1.0):
    half = edge / 2.0
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        a = axis[i]
        others = [j for j in range(3) if j != a]
        pts[i, a] = sign[i] * half
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
        nrm[i, a] = sign[i]
    return pts, nrm, face.astype(np.int64)


def _sample_cylinder(n, rng, radius=0.5, height=1.0):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius**2
    probs = np.array([side_area, cap_area, cap_area])
    probs = probs / probs.sum()
    part = rng.choice(3, size=n, p=probs)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    for i in range(n):
        c, s = np.cos(theta[i]), np.sin(theta[i])
        if part[i] == 0:
            z = rng.uniform(-height / 2, height / 2)
            pts[i] = (radius * c, radius * s, z)
            nrm[i] = (c, s, 0.0)
        else:
            r = radius * np.sqrt(rng.uniform())
            z = height / 2 if part[i] == 1 else -height / 2
            pts[i] = (r * c, r * s, z)
            nrm[i] = (0.0, 0.0, 1.0 if part[i] == 1 else -1.0)
    return pts, nrm, part.astype(np.int64)


def _sample_cone(n, rng, radius=0.5, height=1.0):
    slant = np.sqrt(radius**2 + height**2)
    side_area = np.pi * radius * slant
    base_area = np.pi * radius**2
    p_side = side_area / (side_area + base_area)
    part = (rng.uniform(size=n) >= p_side).astype(np.int64)  # 0 side, 1 base
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    inv = 1.0 / np.sqrt(height**2 + radius**2)
    for i in range(n):
        c, s = np.cos(theta[i]), np.sin(theta[i])
        if part[i] == 0:
            # distance fraction from apex; sqrt for uniform area density
            f = np.sqrt(rng.uniform())
            pts[i] = (f * radius * c, f * radius * s, height * (1 - f))
            nrm[i] = (height * c * inv, height * s * inv, radius * inv)
        else:
            r = radius * np.sqrt(rng.uniform())
            pts[i] = (r * c, r * s, 0.0)
            nrm[i] = (0.0, 0.0, -1.0)
    return pts, nrm, part


def _sample_torus(n, rng, major=0.7, minor=0.25):
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    while i < n:
        theta = rng.uniform(0, 2 * np.pi)
        phi = rng.uniform(0, 2 * np.pi)
        # area element scales with (major + minor cos phi); reject accordingly
        if rng.uniform() * (major + minor) > major + minor * np.cos(phi):
            continue
        ct, st = np.cos(theta), np.sin(theta)
        cp, sp = np.cos(phi), np.sin(phi)
        ring = major + minor * cp
        pts[i] = (ring * ct, ring * st, minor * sp)
        nrm[i] = (cp * ct, cp * st, sp)
        labels[i] = 0 if cp >= 0 else 1
        i += 1
    return pts, nrm, labels


def _sample_plane(n, rng, side=1.0):
    half = side / 2.0
    xy = rng.uniform(-half, half, size=(n, 2))
    pts = np.column_stack([xy, np.zeros(n)])
    nrm = np.tile((0.0, 0.0, 1.0), (n, 1))
    labels = np.where(xy[:, 0] < 0, 0, 1).astype(np.int64)
    return pts, nrm, labels


def _sample_pyramid(n, rng, base=1.0, height=1.0):
    half = base / 2.0
    apex = np.array([0.0, 0.0, height])
    slant_h = np.sqrt(height**2 + half**2)
    base_area = base**2
    face_area = 0.5 * base * slant_h  # per triangular face
    probs = np.array([base_area] + [face_area] * 4)
    probs = probs / probs.sum()
    corners = np.array([
        [half, half, 0.0], [-half, half, 0.0],
        [-half, -half, 0.0], [half, -half, 0.0],
    ])
    face = rng.choice(5, size=n, p=probs)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    for i in range(n):
        if face[i] == 0:
            pts[i] = (rng.uniform(-half, half), rng.uniform(-half, half), 0.0)
            nrm[i] = (0.0, 0.0, -1.0)
        else:
            a = corners[face[i] - 1]
            b = corners[face[i] % 4]
            u, v = rng.uniform(size=2)
            if u + v > 1.0:
                u, v = 1.0 - u, 1.0 - v
            pts[i] = apex + u * (a - apex) + v * (b - apex)
            outward = np.cross(b - a, apex - a)
            outward /= np.linalg.norm(outward)
            # ensure the normal points away from the axis
            if np.dot(outward, (a + b) / 2 - np.array([0, 0, height / 2])) < 0:
                outward = -outward
            nrm[i] = outward
    labels = np.where(face == 0, 0, 1).astype(np.int64)
    return pts, nrm, labels


def _sample_helix(n, rng, major=0.6, pitch=0.4, turns=2.0, tube=0.12):
    c = pitch / (2 * np.pi)
    denom = major**2 + c**2
    kappa = major / denom
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    t_max = 2 * np.pi * turns
    while i < n:
        t = rng.uniform(0, t_max)  # constant speed: uniform in arclength
        phi = rng.uniform(0, 2 * np.pi)
        # tube area element scales with (1 - kappa * tube * cos phi)
        if rng.uniform() * (1 + kappa * tube) > 1 - kappa * tube * np.cos(phi):
            continue
        ct, st = np.cos(t), np.sin(t)
        center = np.array([major * ct, major * st, c * t])
        tangent = np.array([-major * st, major * ct, c]) / np.sqrt(denom)
        normal = np.array([-ct, -st, 0.0])  # principal normal, toward axis
        binormal = np.cross(tangent, normal)
        direction = np.cos(phi) * normal + np.sin(phi) * binormal
        pts[i] = center + tube * direction
        nrm[i] = direction
        labels[i] = 1 if np.cos(phi) >= 0 else 0  # 1 = toward the axis
        i += 1
    return pts, nrm, labels


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
    "pyramid": _sample_pyramid,
    "helix": _sample_helix,
}


def generate_shape(spec: ShapeSpec, rng: np.random.Generator) -> PointCloud:
    """Sample a shape uniformly by area, with analytic normals and labels."""
    pts, nrm, labels = _SAMPLERS[spec.kind](spec.n_points, rng, **spec.params)
    if spec.rotation is not None:
        rot = np.asarray(spec.rotation, dtype=np.float64)
        pts = pts @ rot.T
        nrm = nrm @ rot.T
    if spec.translation is not None:
        pts = pts + np.asarray(spec.translation, dtype=np.float64)
    if spec.noise_sigma > 0:
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        disp = rng.normal(0.0, spec.noise_sigma * diag, size=spec.n_points)
        pts = pts + nrm * disp[:, None]
    return PointCloud(pts, normals=nrm, labels=labels)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# -- point cloud text format -----------------------------------------------------
#
# one point per line: x y z [nx ny nz] [label], whitespace separated,
# '#' starts a comment; values printed with 9 significant digits.


def save_points(cloud: PointCloud, path):
    with open(path, "w") as fh:
        for i in range(cloud.n):
            cols = [f"{v:.9g}" for v in cloud.coords[i]]
            if cloud.normals is not None:
                cols += [f"{v:.9g}" for v in cloud.normals[i]]
            if cloud.labels is not None:
                cols.append(str(int(cloud.labels[i])))
            fh.write(" ".join(cols) + "\n")


def load_points(path) -> PointCloud:
    coords, normals, labels = [], [], []
    n_cols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            if len(tokens) not in (3, 4, 6, 7):
                raise ParseError(
                    f"{path}:{lineno}: expected 3, 4, 6 or 7 columns, "
                    f"got {len(tokens)}"
                )
            if n_cols is None:
                n_cols = len(tokens)
            elif len(tokens) != n_cols:
                raise FormatError(
                    f"{path}:{lineno}: inconsistent column count "
                    f"({len(tokens)} vs {n_cols})"
                )
            try:
                values = [float(t) for t in tokens[:-1]] if n_cols in (4, 7) \
                    else [float(t) for t in tokens]
                if n_cols in (4, 7):
                    labels.append(int(tokens[-1]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            coords.append(values[:3])
            if n_cols >= 6:
                normals.append(values[3:6])
    if not coords:
        raise ParseError(f"{path}: no points found")
    return PointCloud(
        np.array(coords),
        normals=np.array(normals) if normals else None,
        labels=np.array(labels, dtype=np.int64) if labels else None,
    )


# -- dataset generation ------------------------------------------------------------


@dataclass
class DatasetConfig:
    out_dir: str = "dataset"
    kinds: tuple = SHAPE_KINDS
    shapes_per_class: int = 50
    n_points: int = 256
    noise_sigma: float = 0.0
    train_fraction: float = 0.8
    rotate: bool = True

    def __post_init__(self):
        if self.shapes_per_class < 2:
            raise ValidationError("need at least 2 shapes per class")


def _size_params(kind, rng):
    scale = rng.uniform(0.8, 1.25)
    if kind == "sphere":
        return {"radius": scale}
    if kind == "cube":
        return {"edge": scale}
    if kind == "cylinder":
        return {"radius": 0.5 * scale, "height": rng.uniform(0.8, 1.6)}
    if kind == "cone":
        return {"radius": 0.5 * scale, "height": rng.uniform(0.8, 1.6)}
    if kind == "torus":
        return {"major": 0.7 * scale, "minor": rng.uniform(0.15, 0.3)}
    if kind == "plane":
        return {"side": scale}
    if kind == "pyramid":
        return {"base": scale, "height": rng.uniform(0.8, 1.6)}
    if kind == "helix":
        return {"major": 0.6 * scale, "pitch": rng.uniform(0.3, 0.5),
                "turns": 2.0, "tube": rng.uniform(0.08, 0.15)}
    raise ValidationError(f"unknown shape kind {kind!r}")


def make_dataset(config: DatasetConfig, seed: int):
    """Generate shape files plus a JSON manifest; returns the manifest path.

    Stratified split: the first round(train_fraction * count) shapes of
    each class are tagged train, the rest test.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = int(round(config.train_fraction * config.shapes_per_class))
    entries = []
    index = 0
    for category, kind in enumerate(config.kinds):
        for j in range(config.shapes_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            spec = ShapeSpec(
                kind=kind,
                n_points=config.n_points,
                params=_size_params(kind, rng),
                rotation=random_rotation(rng) if config.rotate else None,
                noise_sigma=config.noise_sigma,
            )
            cloud = generate_shape(spec, rng)
            name = f"{kind}_{j:04d}.xyz"
            save_points(cloud, out_dir / name)
            entries.append({
                "path": name,
                "category": category,
                "split": "train" if j < n_train else "test",
            })
            index += 1
    manifest = {"version": MANIFEST_VERSION, "entries": entries}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(manifest_path)


def load_dataset(manifest_path):
    """Read a manifest and its point files; returns (train, test) cloud lists."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')}")
    train, test = [], []
    for entry in manifest["entries"]:
        cloud = load_points(manifest_path.parent / entry["path"])
        cloud.category = int(entry["category"])
        (train if entry["split"] == "train" else test).append(cloud)
    return train, test
