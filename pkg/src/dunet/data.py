"""Synthetic labeled point clouds, augmentation and CSV/PLY files.

Four recipes, each with a label boundary plus distracting structure that is
not a label boundary:

* ``two_part_cylinder``: closed cylinder split into lower/upper part at a
  random height on the smooth side wall; parts differ only in a noisy
  intensity channel with blob texture.
* ``l_block``: L-shaped prism; the arms are the classes, and the prism's own
  sharp edges are irrelevant to the labels.
* ``plane_with_boxes``: floor with a few boxes standing on it (floor vs box),
  random per-object intensities.
* ``step_field``: flat sheet whose intensity steps across a random line;
  intensity blobs add edges that do not separate classes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geom import PointCloud, knn

RECIPES = ("two_part_cylinder", "l_block", "plane_with_boxes", "step_field")
NUM_CLASSES = {kind: 2 for kind in RECIPES}
MIN_POINTS = 32
# box share of plane_with_boxes points is kept inside these bounds
BOX_FRACTION_BOUNDS = (0.15, 0.65)
FLOOR_HALF = 1.5
# generated clouds are redrawn until their boundary share lies in this range
BOUNDARY_BOUNDS = (0.02, 0.30)
BOUNDARY_K = 16
MAX_DRAWS = 20


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeRecipe:
    kind: str = "two_part_cylinder"
    n: int = 512
    noise_sigma: float = 0.005
    seed: int = 0

    def validate(self):
        if self.kind not in RECIPES:
            raise DataError(f"unknown recipe kind {self.kind!r}; expected one of {RECIPES}")
        if self.n < MIN_POINTS:
            raise DataError(f"n={self.n} below minimum of {MIN_POINTS} points")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.kind]


@dataclass
class Dataset:
    samples: list
    num_classes: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise DataError("train and test splits overlap")
        if self.train:
            present = set()
            for i in self.train:
                present.update(np.unique(self.samples[i].labels).tolist())
            missing = set(range(self.num_classes)) - present
            if missing:
                raise DataError(f"classes {sorted(missing)} absent from the training split")


def _allocate(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.multinomial(n, areas / areas.sum())


def _blob_texture(rng, pos, count, radius, amplitude):
    """Piecewise-constant intensity offsets inside random spheres."""
    lo, hi = pos.min(0), pos.max(0)
    out = np.zeros(len(pos))
    for _ in range(count):
        c = rng.uniform(lo, hi)
        r = radius * rng.uniform(0.6, 1.4)
        inside = ((pos - c) ** 2).sum(1) < r * r
        out[inside] += amplitude * rng.choice([-1.0, 1.0])
    return out


def _cylinder(rng, n):
    r = rng.uniform(0.4, 0.6)
    h = rng.uniform(1.6, 2.4)
    split = rng.uniform(0.35, 0.65) * h
    n_side, n_bottom, n_top = _allocate(rng, [2 * math.pi * r * h, math.pi * r * r, math.pi * r * r], n)
    theta = rng.uniform(0, 2 * math.pi, n_side)
    side = np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(0, h, n_side)], 1)

    def disc(m, z):
        rad = r * np.sqrt(rng.uniform(0, 1, m))
        phi = rng.uniform(0, 2 * math.pi, m)
        return np.stack([rad * np.cos(phi), rad * np.sin(phi), np.full(m, z)], 1)

    pos = np.concatenate([side, disc(n_bottom, 0.0), disc(n_top, h)])
    labels = (pos[:, 2] >= split).astype(np.int64)
    intensity = (np.where(labels == 1, 0.5, -0.5)
                 + _blob_texture(rng, pos, 6, 0.3, 0.35)
                 + rng.normal(0, 0.2, n))
    return pos, intensity[:, None], labels


def _box_surface(rng, lo, hi, m, faces=("x0", "x1", "y0", "y1", "z0", "z1")):
    """m points on the selected faces of an axis-aligned box, area-weighted."""
    size = hi - lo
    area = {"x0": size[1] * size[2], "x1": size[1] * size[2], "y0": size[0] * size[2],
            "y1": size[0] * size[2], "z0": size[0] * size[1], "z1": size[0] * size[1]}
    counts = _allocate(rng, [area[f] for f in faces], m)
    pts = []
    for face, c in zip(faces, counts):
        p = rng.uniform(lo, hi, size=(c, 3))
        axis = "xyz".index(face[0])
        p[:, axis] = lo[axis] if face[1] == "0" else hi[axis]
        pts.append(p)
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def _l_block(rng, n):
    a = rng.uniform(1.2, 1.8)  # horizontal arm length (x)
    b = rng.uniform(1.2, 1.8)  # vertical arm height (z)
    t = rng.uniform(0.35, 0.5)  # arm thickness
    w = rng.uniform(0.5, 0.8)  # extrusion depth (y)
    # outline of the L in the x-z plane, counterclockwise
    outline = np.array([[0, 0], [a, 0], [a, t], [t, t], [t, b], [0, b]], dtype=np.float64)
    edges = np.stack([outline, np.roll(outline, -1, axis=0)], 1)
    lengths = np.linalg.norm(edges[:, 1] - edges[:, 0], axis=1)
    cap_area = a * t + t * (b - t)
    counts = _allocate(rng, list(lengths * w) + [cap_area, cap_area], n)
    pts = []
    for (p0, p1), c in zip(edges, counts[:6]):
        s = rng.uniform(0, 1, c)[:, None]
        xz = p0 + s * (p1 - p0)
        pts.append(np.stack([xz[:, 0], rng.uniform(0, w, c), xz[:, 1]], 1))
    for y, c in zip((0.0, w), counts[6:]):
        # rejection-free: split the L face into the two rectangles by area
        n_h, n_v = _allocate(rng, [a * t, t * (b - t)], c)
        hx = np.stack([rng.uniform(0, a, n_h), np.full(n_h, y), rng.uniform(0, t, n_h)], 1)
        vx = np.stack([rng.uniform(0, t, n_v), np.full(n_v, y), rng.uniform(t, b, n_v)], 1)
        pts += [hx, vx]
    pos = np.concatenate(pts)
    labels = (pos[:, 0] <= t).astype(np.int64)  # vertical arm (incl. the corner) vs horizontal arm
    return pos, None, labels


def _plane_with_boxes(rng, n):
    half = FLOOR_HALF
    floor_area = (2 * half) ** 2
    for _ in range(100):
        count = int(rng.integers(1, 3))
        boxes = []
        for _ in range(200):
            if len(boxes) == count:
                break
            sx, sy = rng.uniform(0.8, 1.2, 2)
            cx = rng.uniform(-half + sx / 2 + 0.1, half - sx / 2 - 0.1)
            cy = rng.uniform(-half + sy / 2 + 0.1, half - sy / 2 - 0.1)
            lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
            hi = np.array([cx + sx / 2, cy + sy / 2, rng.uniform(0.8, 1.2)])
            if all(np.any(lo[:2] > o_hi[:2] + 0.2) or np.any(hi[:2] < o_lo[:2] - 0.2) for o_lo, o_hi in boxes):
                boxes.append((lo, hi))
        footprint = sum(float(np.prod(hi[:2] - lo[:2])) for lo, hi in boxes)
        box_area = [float(np.prod(hi[:2] - lo[:2]) + 2 * (hi - lo)[2] * ((hi - lo)[0] + (hi - lo)[1]))
                    for lo, hi in boxes]
        share = sum(box_area) / (sum(box_area) + floor_area - footprint)
        if BOX_FRACTION_BOUNDS[0] + 0.05 <= share <= BOX_FRACTION_BOUNDS[1] - 0.05:
            break
    counts = _allocate(rng, [floor_area - footprint] + box_area, n)
    floor = []
    need = counts[0]
    while need > 0:
        cand = np.column_stack([rng.uniform(-half, half, (2 * need + 8, 2)), np.zeros(2 * need + 8)])
        keep = np.ones(len(cand), dtype=bool)
        for lo, hi in boxes:
            keep &= ~np.all((cand[:, :2] >= lo[:2]) & (cand[:, :2] <= hi[:2]), axis=1)
        cand = cand[keep][:need]
        floor.append(cand)
        need -= len(cand)
    parts = [np.concatenate(floor)] if floor else [np.zeros((0, 3))]
    labels = [np.zeros(counts[0], dtype=np.int64)]
    shades = [np.full(counts[0], rng.uniform(-0.4, 0.4))]
    for (lo, hi), c in zip(boxes, counts[1:]):
        parts.append(_box_surface(rng, lo, hi, c, faces=("x0", "x1", "y0", "y1", "z1")))
        labels.append(np.ones(c, dtype=np.int64))
        shades.append(np.full(c, rng.uniform(-0.4, 0.4)))
    pos = np.concatenate(parts)
    intensity = np.concatenate(shades) + rng.normal(0, 0.1, n)
    return pos, intensity[:, None], np.concatenate(labels)


def _step_field(rng, n):
    pos = np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])
    angle = rng.uniform(0, math.pi)
    normal = np.array([math.cos(angle), math.sin(angle), 0.0])
    offset = rng.uniform(-0.3, 0.3)
    labels = (pos @ normal > offset).astype(np.int64)
    intensity = (np.where(labels == 1, 0.5, -0.5)
                 + _blob_texture(rng, pos, 5, 0.3, 0.35)
                 + rng.normal(0, 0.15, n))
    return pos, intensity[:, None], labels


_BUILDERS = {
    "two_part_cylinder": _cylinder,
    "l_block": _l_block,
    "plane_with_boxes": _plane_with_boxes,
    "step_field": _step_field,
}


def generate(recipe: ShapeRecipe) -> PointCloud:
    """Deterministic labeled cloud for the recipe; jitter is N(0, noise_sigma^2) per coordinate."""
    recipe.validate()
    rng = np.random.default_rng(recipe.seed)
    best, best_gap = None, math.inf
    for _ in range(MAX_DRAWS):
        pos, feat, labels = _BUILDERS[recipe.kind](rng, recipe.n)
        if recipe.noise_sigma > 0:
            pos = pos + rng.normal(0, recipe.noise_sigma, pos.shape)
        cloud = PointCloud(pos, feat, labels)
        frac = boundary_fraction(cloud, min(BOUNDARY_K, cloud.n - 1))
        gap = max(BOUNDARY_BOUNDS[0] - frac, frac - BOUNDARY_BOUNDS[1], 0.0)
        if gap < best_gap:
            best, best_gap = cloud, gap
        if gap == 0.0:
            break
    return best


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def generate_dataset(recipe: ShapeRecipe, n_samples: int = 24, n_test: int = 8) -> Dataset:
    if not 0 < n_test < n_samples:
        raise DataError("need 0 < n_test < n_samples")
    recipe.validate()
    samples = [generate(replace(recipe, seed=sample_seed(recipe.seed, i))) for i in range(n_samples)]
    train = list(range(n_samples - n_test))
    test = list(range(n_samples - n_test, n_samples))
    return Dataset(samples, recipe.num_classes, train, test)


def boundary_fraction(cloud: PointCloud, k: int = 16) -> float:
    """Share of points whose k-neighborhood contains another label."""
    nb = knn(cloud, k=k)
    mixed = (cloud.labels[nb.indices] != cloud.labels[:, None]).any(1)
    return float(mixed.mean())


@dataclass(frozen=True)
class AugmentConfig:
    anisotropic_scale: tuple | None = (0.66, 1.5)
    translate: tuple | None = (-0.2, 0.2)
    jitter: float | None = 0.01
    vertical_rotation: bool = True

    def validate(self):
        if self.anisotropic_scale is not None:
            lo, hi = self.anisotropic_scale
            if not 0 < lo <= hi:
                raise DataError(f"invalid scale range {self.anisotropic_scale}")
        if self.translate is not None:
            lo, hi = self.translate
            if not lo <= hi:
                raise DataError(f"invalid translation range {self.translate}")
        if self.jitter is not None and self.jitter < 0:
            raise DataError("jitter sigma must be nonnegative")

    @classmethod
    def none(cls):
        return cls(None, None, None, False)


def augment(cloud: PointCloud, ops: AugmentConfig, seed) -> PointCloud:
    """Rotate about z, scale per axis, translate, then jitter; labels and features untouched."""
    ops.validate()
    rng = np.random.default_rng(seed)
    pos = cloud.positions
    if ops.vertical_rotation:
        a = rng.uniform(0, 2 * math.pi)
        c, s = math.cos(a), math.sin(a)
        pos = pos @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    if ops.anisotropic_scale is not None:
        pos = pos * rng.uniform(*ops.anisotropic_scale, size=3)
    if ops.translate is not None:
        pos = pos + rng.uniform(*ops.translate, size=3)
    if ops.jitter:
        pos = pos + rng.normal(0, ops.jitter, pos.shape)
    return PointCloud(pos, cloud.features, cloud.labels)


def write_cloud(path, cloud: PointCloud) -> None:
    """CSV with header x,y,z[,f1..fd][,label]; floats use shortest round-trip repr."""
    d = cloud.feature_dim
    header = ["x", "y", "z"] + [f"f{i + 1}" for i in range(d)]
    if cloud.labels is not None:
        header.append("label")
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(cloud.n):
            row = [repr(float(v)) for v in cloud.positions[i]]
            if d:
                row += [repr(float(v)) for v in cloud.features[i]]
            if cloud.labels is not None:
                row.append(str(int(cloud.labels[i])))
            w.writerow(row)


def read_cloud(path) -> PointCloud:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["x", "y", "z"]:
        raise DataError(f"{path}: line 1: header must start with x,y,z")
    has_label = header[-1] == "label"
    feat_cols = header[3:-1] if has_label else header[3:]
    if feat_cols != [f"f{i + 1}" for i in range(len(feat_cols))]:
        raise DataError(f"{path}: line 1: feature columns must be f1..fd")
    pos, feat, lab = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            vals = [float(v) for v in (row[:-1] if has_label else row)]
            if has_label:
                lab.append(int(row[-1]))
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        pos.append(vals[:3])
        feat.append(vals[3:])
    pos = np.array(pos, dtype=np.float64).reshape(-1, 3)
    features = np.array(feat, dtype=np.float64) if feat_cols else None
    labels = np.array(lab, dtype=np.int64) if has_label else None
    return PointCloud(pos, features, labels)


def write_ply_scalar(path, positions: np.ndarray, values: np.ndarray, name: str = "smoothness") -> None:
    """ASCII PLY with x, y, z and one float scalar property per vertex."""
    positions = np.asarray(positions, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) != len(positions):
        raise DataError("one scalar per point is required")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(positions)}",
             "property float x", "property float y", "property float z",
             f"property float {name}", "end_header"]
    lines += [f"{p[0]!r} {p[1]!r} {p[2]!r} {v!r}" for p, v in
              zip(positions.tolist(), values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply_scalar(path):
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply":
        raise DataError(f"{path}: not a PLY file")
    end = lines.index("end_header")
    count = next(int(l.split()[-1]) for l in lines[:end] if l.startswith("element vertex"))
    props = [l.split()[-1] for l in lines[:end] if l.startswith("property")]
    body = np.array([[float(v) for v in l.split()] for l in lines[end + 1:end + 1 + count]])
    body = body.reshape(count, len(props))
    return body[:, :3], body[:, 3], props[3]
