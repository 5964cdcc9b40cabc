"""Point clouds, normalisation, train/validation splits and ASCII I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

AXES = ("x", "y", "z", "t")


class PointCloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """An (N, 3) array of x, y, z coordinates in meters tagged with a timestamp.

    ``labels`` optionally carries a parallel integer array (ground truth read
    from a PLY ``label`` property); it is never used for fitting.
    """

    xyz: np.ndarray
    timestamp: int = 0
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"expected an (N, 3) array, got shape {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.timestamp not in (0, 1):
            raise ValueError(f"timestamp must be 0 or 1, got {self.timestamp}")
        object.__setattr__(self, "xyz", _frozen(xyz))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(xyz),):
                raise ValueError("labels must be aligned with points")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def xy(self) -> np.ndarray:
        return self.xyz[:, :2]

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]

    def bounds(self) -> tuple[float, float, float, float]:
        """Bounding box ``(xmin, xmax, ymin, ymax)`` in meters."""
        lo = self.xyz[:, :2].min(axis=0)
        hi = self.xyz[:, :2].max(axis=0)
        return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


@dataclass(frozen=True)
class Normalizer:
    """Per-axis affine map ``u = (v - offset) * scale`` onto [-1, 1].

    Axes are x, y, z and, when ``has_time``, t. ``degenerate`` flags axes whose
    range was empty; those map to the constant 0.
    """

    offset: tuple
    scale: tuple
    degenerate: tuple = (False, False, False)
    has_time: bool = False

    def __post_init__(self):
        n = 4 if self.has_time else 3
        if len(self.offset) != n or len(self.scale) != n:
            raise ValueError(f"normalizer needs {n} axes")
        if any(not s > 0 for s in self.scale):
            raise ValueError("normalizer scales must be positive")

    def _params(self, axes: Sequence[int]):
        off = np.array([self.offset[a] for a in axes])
        sc = np.array([self.scale[a] for a in axes])
        return off, sc

    def apply(self, values: np.ndarray, axes: Sequence[int] = (0, 1, 2)) -> np.ndarray:
        off, sc = self._params(axes)
        return (np.asarray(values, dtype=np.float64) - off) * sc

    def invert(self, values: np.ndarray, axes: Sequence[int] = (0, 1, 2)) -> np.ndarray:
        off, sc = self._params(axes)
        return np.asarray(values, dtype=np.float64) / sc + off

    def time_value(self, timestamp: int) -> float:
        if not self.has_time:
            raise ValueError("normalizer was fitted without a time axis")
        return (timestamp - self.offset[3]) * self.scale[3]

    def height_to_meters(self, dz: np.ndarray) -> np.ndarray:
        """Convert a height *difference* from normalised units to meters."""
        return np.asarray(dz, dtype=np.float64) / self.scale[2]

    def to_dict(self) -> dict:
        return {
            "offset": list(self.offset),
            "scale": list(self.scale),
            "degenerate": list(self.degenerate),
            "has_time": self.has_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            offset=tuple(float(v) for v in d["offset"]),
            scale=tuple(float(v) for v in d["scale"]),
            degenerate=tuple(bool(v) for v in d["degenerate"]),
            has_time=bool(d["has_time"]),
        )


def fit_normalizer(clouds, include_time: bool = False) -> Normalizer:
    """Fit one joint normaliser over the union of ``clouds``.

    Time, when included, maps t0 to -1 and t1 to +1.
    """
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    clouds = list(clouds)
    if not clouds or sum(len(c) for c in clouds) == 0:
        raise ValueError("cannot fit a normalizer on an empty point set")
    xyz = np.concatenate([c.xyz for c in clouds])
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    offset, scale, degenerate = [], [], []
    for a in range(3):
        if hi[a] > lo[a]:
            offset.append(float(0.5 * (hi[a] + lo[a])))
            scale.append(float(2.0 / (hi[a] - lo[a])))
            degenerate.append(False)
        else:
            offset.append(float(lo[a]))
            scale.append(1.0)
            degenerate.append(True)
    if include_time:
        offset.append(0.5)
        scale.append(2.0)
    return Normalizer(tuple(offset), tuple(scale), tuple(degenerate), include_time)


@dataclass(frozen=True)
class SplitIndex:
    train: np.ndarray
    val: np.ndarray
    seed: int = field(default=0)


def split_train_val(n_or_cloud, fraction: float = 0.8, seed: int = 0) -> SplitIndex:
    """Random disjoint split with ``round(fraction * N)`` training indices."""
    n = n_or_cloud if isinstance(n_or_cloud, (int, np.integer)) else len(n_or_cloud)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    if n < 5:
        raise ValueError(f"need at least 5 points to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fraction * n + 0.5))
    return SplitIndex(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed)


# -- ASCII I/O ---------------------------------------------------------------

_SPLIT = re.compile(r"[,\s]+")


def _guess_format(path: Path) -> str:
    return "ascii-ply" if path.suffix.lower() == ".ply" else "xyz-csv"


def load_xyz(path, format: Optional[str] = None, timestamp: int = 0) -> PointCloud:
    """Read an XYZ/CSV text file or an ASCII PLY file.

    XYZ records are whitespace- or comma-separated; any columns past the third
    are ignored, as are blank and ``#`` lines. A non-numeric first record is
    treated as a header.
    """
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "ascii-ply":
        return _load_ply(path, timestamp)
    if fmt != "xyz-csv":
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    rows = []
    header_seen = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f for f in _SPLIT.split(line) if f]
            if len(fields) < 3:
                raise PointCloudFormatError("expected at least 3 fields", lineno)
            try:
                rec = [float(f) for f in fields[:3]]
            except ValueError:
                if not rows and not header_seen:
                    header_seen = True
                    continue
                raise PointCloudFormatError(f"non-numeric field in {line!r}", lineno) from None
            if not all(np.isfinite(rec)):
                raise PointCloudFormatError("non-finite coordinate", lineno)
            rows.append(rec)
    if not rows:
        raise PointCloudFormatError(f"{path} contains no points")
    return PointCloud(np.array(rows), timestamp)


def _load_ply(path: Path, timestamp: int) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PointCloudFormatError("missing 'ply' magic", 1)
    n_vertex, props, in_vertex, end = None, [], False, None
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise PointCloudFormatError(f"unsupported PLY format {tok[1]!r}", lineno)
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = lineno
            break
    if end is None or n_vertex is None:
        raise PointCloudFormatError("incomplete PLY header")
    try:
        cols = [props.index(a) for a in "xyz"]
    except ValueError:
        raise PointCloudFormatError("PLY vertex element lacks x, y or z") from None
    label_col = props.index("label") if "label" in props else None
    body = lines[end:end + n_vertex]
    if len(body) < n_vertex:
        raise PointCloudFormatError(f"expected {n_vertex} vertices, found {len(body)}")
    if n_vertex == 0:
        raise PointCloudFormatError(f"{path} contains no points")
    xyz = np.empty((n_vertex, 3))
    labels = np.empty(n_vertex, dtype=np.int64) if label_col is not None else None
    for i, line in enumerate(body):
        lineno = end + 1 + i
        tok = line.split()
        try:
            xyz[i] = [float(tok[c]) for c in cols]
            if labels is not None:
                labels[i] = int(float(tok[label_col]))
        except (ValueError, IndexError):
            raise PointCloudFormatError(f"bad vertex record {line!r}", lineno) from None
        if not np.all(np.isfinite(xyz[i])):
            raise PointCloudFormatError("non-finite coordinate", lineno)
    return PointCloud(xyz, timestamp, labels)


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.xyz, fmt="%.17g")


def write_ply(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if cloud.labels is not None:
            fh.write("property int label\n")
        fh.write("end_header\n")
        for i, p in enumerate(cloud.xyz):
            rec = " ".join(repr(float(c)) for c in p)
            if cloud.labels is not None:
                rec += f" {cloud.labels[i]}"
            fh.write(rec + "\n")
