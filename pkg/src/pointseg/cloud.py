"""Point-cloud data model, file readers/writers and synthetic scene generation.

Supported formats:

* ASCII PLY (``format ascii 1.0``) with a ``vertex`` element holding at least
  ``x y z``; optional ``red green blue`` (8-bit, normalized to [0, 1]),
  ``intensity`` and ``label``. Other properties and elements are skipped.
* KITTI velodyne scans: packed little-endian float32 ``(x, y, z, intensity)``.
* KITTI label files: packed little-endian uint32, lower 16 bits = class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParseError, UnsupportedFormatError

PRIMITIVES = ("plane", "sphere", "cylinder", "clutter")

_PLY_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}
_PLY_INT_TYPES = _PLY_TYPES - {"float", "double", "float32", "float64"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with optional per-point attributes and labels.

    Arrays are copied to read-only buffers at construction, so an instance can
    be shared freely between threads.
    """

    positions: np.ndarray
    attributes: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    n_class: Optional[int] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.size == 0:
            pos = pos.reshape(0, 3)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise DataError(f"positions must be N x 3, got shape {pos.shape}")
        bad = ~np.isfinite(pos).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite coordinate in row {int(np.flatnonzero(bad)[0])}")
        n = pos.shape[0]
        object.__setattr__(self, "positions", _frozen(pos))

        if self.attributes is not None:
            att = np.array(self.attributes, dtype=np.float64, copy=True)
            if att.ndim == 1:
                att = att.reshape(-1, 1)
            if att.shape[0] != n:
                raise DataError(f"attributes have {att.shape[0]} rows, expected {n}")
            if att.shape[1] not in (0, 1, 3):
                raise DataError(f"attribute width must be 0, 1 or 3, got {att.shape[1]}")
            object.__setattr__(self, "attributes", None if att.shape[1] == 0 else _frozen(att))

        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
            if lab.shape[0] != n:
                raise DataError(f"labels have {lab.shape[0]} rows, expected {n}")
            if n and lab.min() < 0:
                raise DataError(f"negative label in row {int(np.argmin(lab))}")
            if self.n_class is not None and n and lab.max() >= self.n_class:
                raise DataError(
                    f"label {int(lab.max())} in row {int(np.argmax(lab))} outside [0, {self.n_class})"
                )
            object.__setattr__(self, "labels", _frozen(lab))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def attribute_width(self) -> int:
        return 0 if self.attributes is None else self.attributes.shape[1]

    @property
    def d_in(self) -> int:
        """Channel count of :meth:`input_features`."""
        return 3 + self.attribute_width

    def input_features(self) -> np.ndarray:
        if self.attributes is None:
            return np.array(self.positions)
        return np.concatenate([self.positions, self.attributes], axis=1)

    def take(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[indices],
            None if self.attributes is None else self.attributes[indices],
            None if self.labels is None else self.labels[indices],
            self.n_class,
        )


def subsample(cloud: PointCloud, n_points: int, seed: int) -> PointCloud:
    """Seeded uniform pre-crop to a fixed point count (identity if already small enough)."""
    if n_points >= cloud.n:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(cloud.n, n_points, replace=False))
    return cloud.take(idx)


# ---------------------------------------------------------------------------
# PLY


def parse_ply(data: bytes) -> PointCloud:
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)

    elements = []  # [name, count, [(prop_name, type, is_list)]]
    header_end = None
    seen_format = False
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) != 3:
                raise ParseError(f"malformed format line {raw!r}", line=lineno)
            if tokens[1] in ("binary_little_endian", "binary_big_endian"):
                raise UnsupportedFormatError(f"binary PLY ({tokens[1]}) is not supported")
            if tokens[1] != "ascii":
                raise ParseError(f"unknown PLY format {tokens[1]!r}", line=lineno)
            seen_format = True
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"malformed element line {raw!r}", line=lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", line=lineno) from None
            if count < 0:
                raise ParseError("negative element count", line=lineno)
            elements.append([tokens[1], count, []])
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if len(tokens) == 5 and tokens[1] == "list":
                if tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown list type in {raw!r}", line=lineno)
                elements[-1][2].append((tokens[4], tokens[3], True))
            elif len(tokens) == 3:
                if tokens[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown property type {tokens[1]!r}", line=lineno)
                elements[-1][2].append((tokens[2], tokens[1], False))
            else:
                raise ParseError(f"malformed property line {raw!r}", line=lineno)
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {key!r}", line=lineno)
    if header_end is None:
        raise ParseError("missing end_header", line=len(lines))
    if not seen_format:
        raise ParseError("missing format line", line=header_end)

    vertex = None
    offset = header_end  # index into `lines` of the first body line
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props, offset)
        offset += count
    if vertex is None:
        raise ParseError("no vertex element", line=header_end)
    count, props, start = vertex
    names = [p[0] for p in props]
    if any(p[2] for p in props):
        raise ParseError("list properties on the vertex element are not supported", line=header_end)
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}", line=header_end)

    rows = lines[start:start + count]
    if len(rows) < count:
        raise ParseError(
            f"expected {count} vertex rows, found {len(rows)}", line=start + len(rows) + 1
        )
    values = np.empty((count, len(props)), dtype=np.float64)
    for i, row in enumerate(rows):
        tokens = row.split()
        if len(tokens) != len(props):
            raise ParseError(
                f"vertex row {i} has {len(tokens)} values, expected {len(props)}", line=start + i + 1
            )
        try:
            values[i] = [float(t) for t in tokens]
        except ValueError:
            raise ParseError(f"non-numeric value in vertex row {i}", line=start + i + 1) from None

    col = {n: j for j, n in enumerate(names)}
    positions = values[:, [col["x"], col["y"], col["z"]]]
    bad = ~np.isfinite(positions).all(axis=1)
    if bad.any():
        raise DataError(f"non-finite coordinate in vertex row {int(np.flatnonzero(bad)[0])}")

    attributes = None
    if all(c in col for c in ("red", "green", "blue")):
        rgb = values[:, [col["red"], col["green"], col["blue"]]]
        if props[col["red"]][1] in _PLY_INT_TYPES:
            rgb = rgb / 255.0
        attributes = rgb
    elif "intensity" in col:
        attributes = values[:, [col["intensity"]]]
    labels = None
    if "label" in col:
        labels = values[:, col["label"]].astype(np.int64)
    return PointCloud(positions, attributes, labels)


def write_ply(cloud: PointCloud) -> bytes:
    header = ["ply", "format ascii 1.0", f"element vertex {cloud.n}"]
    header += [f"property double {a}" for a in "xyz"]
    cols = [cloud.positions]
    fmt = ["%.17g"] * 3
    if cloud.attribute_width == 3:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
        cols.append(np.clip(np.rint(cloud.attributes * 255.0), 0, 255))
        fmt += ["%d"] * 3
    elif cloud.attribute_width == 1:
        header.append("property double intensity")
        cols.append(cloud.attributes)
        fmt.append("%.17g")
    if cloud.labels is not None:
        header.append("property int label")
        cols.append(cloud.labels.reshape(-1, 1))
        fmt.append("%d")
    header.append("end_header")
    body = np.concatenate([c.astype(np.float64) for c in cols], axis=1) if cloud.n else None
    out = "\n".join(header) + "\n"
    if body is not None:
        line_fmt = " ".join(fmt)
        out += "\n".join(line_fmt % tuple(r) for r in body) + "\n"
    return out.encode("utf-8")


# ---------------------------------------------------------------------------
# KITTI


def parse_kitti_bin(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise FormatError(f"scan length {len(data)} is not a multiple of 16 bytes")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3:4].astype(np.float64))


def serialize_kitti_bin(cloud: PointCloud) -> bytes:
    intensity = cloud.attributes if cloud.attribute_width == 1 else np.zeros((cloud.n, 1))
    rec = np.concatenate([cloud.positions, intensity], axis=1).astype("<f4")
    return rec.tobytes()


def parse_kitti_labels(data: bytes) -> np.ndarray:
    if len(data) % 4:
        raise FormatError(f"label file length {len(data)} is not a multiple of 4 bytes")
    raw = np.frombuffer(data, dtype="<u4")
    return (raw & 0xFFFF).astype(np.int64)


def serialize_kitti_labels(labels) -> bytes:
    return np.asarray(labels, dtype="<u4").tobytes()


# ---------------------------------------------------------------------------
# Synthetic scenes


def default_shape_mix(n_class: int) -> tuple:
    if n_class == 2:
        return ("plane", "clutter")
    mix = ["plane", "sphere", "cylinder", "clutter"]
    while len(mix) < n_class:
        mix.append(("sphere", "cylinder")[len(mix) % 2])
    return tuple(mix[:n_class])


@dataclass(frozen=True)
class SceneSpec:
    n_points: int
    n_class: int
    extent: float = 10.0
    shape_mix: Optional[Sequence[str]] = None
    noise_sigma: float = 0.01
    seed: int = 0
    instances: int = 2

    def __post_init__(self):
        if self.n_class < 2:
            raise ConfigError(f"n_class must be >= 2, got {self.n_class}")
        if self.n_points < self.n_class:
            raise ConfigError(f"n_points ({self.n_points}) must be >= n_class ({self.n_class})")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.extent <= 0:
            raise ConfigError("extent must be positive")
        mix = tuple(self.shape_mix) if self.shape_mix is not None else default_shape_mix(self.n_class)
        if len(mix) != self.n_class:
            raise ConfigError(f"shape_mix has {len(mix)} entries, expected {self.n_class}")
        for s in mix:
            if s not in PRIMITIVES:
                raise ConfigError(f"unknown primitive {s!r}; choose from {PRIMITIVES}")
        object.__setattr__(self, "shape_mix", mix)


def _place_footprints(rng, radii, extent):
    """Non-overlapping disc centers for the object primitives (best effort)."""
    centers = []
    for r in radii:
        for _ in range(200):
            c = rng.uniform(r, extent - r, size=2)
            if all(np.hypot(*(c - c2)) > r + r2 for c2, r2 in centers):
                break
        centers.append((c, r))
    return [c for c, _ in centers]


def _sample_primitive(rng, kind, n, extent, footprint):
    if kind == "plane":
        xy = rng.uniform(0.0, extent, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    if kind == "clutter":
        return rng.uniform(0.0, 1.0, size=(n, 3)) * np.array([extent, extent, 0.5 * extent])
    (center, radius), height = footprint
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.array([center[0], center[1], radius]) + radius * v
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    z = rng.uniform(0.0, height, size=n)
    return np.column_stack(
        [center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta), z]
    )


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Labeled scene built from geometric primitives, one primitive kind per class.

    Object classes (sphere, cylinder) get ``spec.instances`` copies each. The
    result is a pure function of ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    base, extra = divmod(spec.n_points, spec.n_class)
    counts = [base + (1 if c < extra else 0) for c in range(spec.n_class)]

    e = spec.extent
    objects = []  # (class, radius, height)
    for c, kind in enumerate(spec.shape_mix):
        for _ in range(spec.instances if kind in ("sphere", "cylinder") else 0):
            if kind == "sphere":
                objects.append((c, rng.uniform(0.08, 0.14) * e, 0.0))
            else:
                objects.append((c, rng.uniform(0.04, 0.07) * e, rng.uniform(0.3, 0.5) * e))
    centers = _place_footprints(rng, [o[1] for o in objects], e)

    parts, labels = [], []
    for c, kind in enumerate(spec.shape_mix):
        mine = [i for i, o in enumerate(objects) if o[0] == c]
        if mine:
            split = np.array_split(np.arange(counts[c]), len(mine))
            for i, chunk in zip(mine, split):
                fp = ((centers[i], objects[i][1]), objects[i][2])
                parts.append(_sample_primitive(rng, kind, len(chunk), e, fp))
        else:
            parts.append(_sample_primitive(rng, kind, counts[c], e, None))
        labels.append(np.full(counts[c], c, dtype=np.int64))
    pos = np.concatenate(parts)
    lab = np.concatenate(labels)
    if spec.noise_sigma > 0:
        pos = pos + rng.normal(scale=spec.noise_sigma, size=pos.shape)
    order = rng.permutation(spec.n_points)
    return PointCloud(pos[order], None, lab[order], spec.n_class)


def generate_dataset(spec: SceneSpec, n_scenes: int, first_seed: Optional[int] = None):
    """``n_scenes`` scenes sharing ``spec`` except for consecutive seeds."""
    s0 = spec.seed if first_seed is None else first_seed
    return [generate_scene(replace(spec, seed=s0 + i)) for i in range(n_scenes)]
