"""Decode height differences, cluster them with a 3-component GMM, label changes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_types import Normalizer
from .network import FieldModel
from .parallel import pinned
from .synth import ADDITION, CLASS_NAMES, DELETION, UNCHANGED

CHUNK = 65536
VAR_FLOOR = 1e-6


class ModeMismatchError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


class AmbiguousOrderingError(ValueError):
    pass


@dataclass
class ChangeField:
    """Height difference ``dz`` (meters) at ``support`` (x, y in meters)."""

    support: np.ndarray
    dz: np.ndarray
    mode: str
    source: dict = field(default_factory=dict)
    grid_shape: Optional[tuple] = None

    def __post_init__(self):
        if len(self.support) != len(self.dz):
            raise ValueError("support and dz must have equal length")
        if not np.all(np.isfinite(self.dz)):
            raise FloatingPointError("decoded dz contains non-finite values")


@dataclass
class Grid:
    """Row-major cell centres; row 0 is the lowest y."""

    x: np.ndarray
    y: np.ndarray
    resolution: float
    bounds: tuple

    @property
    def shape(self) -> tuple:
        return len(self.y), len(self.x)

    @property
    def xy(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y)
        return np.column_stack([X.ravel(), Y.ravel()])


def regular_grid(bounds: Sequence[float], resolution: float) -> Grid:
    """Cell centres covering ``bounds = (xmin, xmax, ymin, ymax)`` at ``resolution`` meters."""
    xmin, xmax, ymin, ymax = map(float, bounds)
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("grid bounds are degenerate")
    if resolution > xmax - xmin or resolution > ymax - ymin:
        raise ValueError(f"resolution {resolution} exceeds the grid extent")
    nx = int(np.ceil((xmax - xmin) / resolution - 1e-9))
    ny = int(np.ceil((ymax - ymin) / resolution - 1e-9))
    x = xmin + (np.arange(nx) + 0.5) * resolution
    y = ymin + (np.arange(ny) + 0.5) * resolution
    return Grid(x, y, float(resolution), (xmin, xmax, ymin, ymax))


def _eval(model: FieldModel, V: np.ndarray) -> np.ndarray:
    return np.concatenate([model(V[i:i + CHUNK]) for i in range(0, len(V), CHUNK)]) if len(V) else np.empty(0)


def _check_mode(models: Sequence[FieldModel], mode: str) -> None:
    if mode == "S":
        ok = len(models) == 1 and models[0].in_dim == 3
    elif mode == "D":
        ok = len(models) == 2 and all(m.in_dim == 2 for m in models)
    else:
        raise ModeMismatchError(f"unknown mode {mode!r}")
    if not ok:
        raise ModeMismatchError(f"mode {mode} does not match {len(models)} model(s) "
                                f"with input dims {[m.in_dim for m in models]}")


@pinned
def decode_heights(models: Sequence[FieldModel], norm: Normalizer, xy: np.ndarray,
                   t: int, mode: str) -> np.ndarray:
    """Reconstructed surface height in meters at time ``t``."""
    _check_mode(models, mode)
    u = norm.apply(xy, axes=(0, 1))
    if mode == "S":
        V = np.column_stack([u, np.full(len(u), norm.time_value(t))])
        h = _eval(models[0], V)
    else:
        h = _eval(models[t], u)
    return norm.invert(h, axes=(2,))


@pinned
def decode_dz(models: Sequence[FieldModel], norm: Normalizer, support: np.ndarray,
              mode: str, source: Optional[dict] = None) -> ChangeField:
    """``f1(x, y) - f0(x, y)`` (mode D) or ``f(x, y, t1) - f(x, y, t0)`` (mode S), in meters."""
    _check_mode(models, mode)
    support = np.asarray(support, dtype=np.float64)[:, :2]
    u = norm.apply(support, axes=(0, 1))
    if mode == "S":
        V1 = np.column_stack([u, np.full(len(u), norm.time_value(1))])
        V0 = np.column_stack([u, np.full(len(u), norm.time_value(0))])
        d = _eval(models[0], V1) - _eval(models[0], V0)
    else:
        d = _eval(models[1], u) - _eval(models[0], u)
    return ChangeField(support, norm.height_to_meters(d), mode, dict(source or {}))


# -- Gaussian mixture ----------------------------------------------------------

@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list
    converged: bool = True

    @property
    def n_iter(self) -> int:
        return len(self.log_likelihood)

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """``log(w_k) + log N(x | mu_k, var_k)``, shape (N, 3)."""
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.variances)
                - 0.5 * (x - self.means) ** 2 / self.variances)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        lj = self.log_joint(x)
        lj -= lj.max(axis=1, keepdims=True)
        r = np.exp(lj)
        return r / r.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "n_iter": self.n_iter,
                "converged": self.converged,
                "final_log_likelihood": self.log_likelihood[-1] if self.log_likelihood else None}


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def fit_gmm3(dz: np.ndarray, seed: int = 0, max_iter: int = 500, tol: float = 1e-8) -> GmmParams:
    """EM for a 1-D, 3-component mixture, started from the 5/50/95 % quantiles.

    ``tol`` bounds the per-point log-likelihood improvement at convergence.
    """
    x = np.asarray(dz, dtype=np.float64).ravel()
    if len(x) < 30:
        raise ValueError(f"need at least 30 values to fit the mixture, got {len(x)}")
    if np.ptp(x) == 0:
        raise DegenerateDataError(
            "all dz values are identical: there is no change structure to cluster")
    means = np.percentile(x, [5, 50, 95])
    spread = np.std(x)
    if np.unique(means).size < 3:
        # tied quantiles (a dominant exact value); break ties deterministically
        rng = np.random.default_rng(seed)
        means = means + np.array([-1.0, 0.0, 1.0]) * 1e-3 * spread + rng.normal(0, 1e-6 * spread, 3)
    gmm = GmmParams(np.full(3, 1 / 3), means, np.full(3, max(spread ** 2, VAR_FLOOR)), [])
    n = len(x)
    prev = -np.inf
    gmm.converged = False
    for _ in range(max_iter):
        lj = gmm.log_joint(x)
        ll = _logsumexp(lj)
        mean_ll = float(ll.mean())
        gmm.log_likelihood.append(mean_ll * n)
        if mean_ll - prev < tol:
            gmm.converged = True
            break
        prev = mean_ll
        r = np.exp(lj - ll[:, None])
        nk = r.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (r * x[:, None]).sum(axis=0) / nk
        variances = (r * (x[:, None] - means) ** 2).sum(axis=0) / nk
        gmm = GmmParams(weights / weights.sum(), means, np.maximum(variances, VAR_FLOOR),
                        gmm.log_likelihood, False)
    return gmm


# -- labelling -------------------------------------------------------------------

@dataclass
class ChangeLabels:
    """Per-point class and responsibilities ordered (deletion, unchanged, addition)."""

    labels: np.ndarray
    responsibilities: np.ndarray
    min_abs_dz: Optional[float]

    def names(self) -> list[str]:
        return [CLASS_NAMES[int(c)] for c in self.labels]


def component_order(gmm: GmmParams) -> np.ndarray:
    """Component indices sorted by mean: deletion, unchanged, addition."""
    order = np.argsort(gmm.means, kind="stable")
    if np.any(np.diff(gmm.means[order]) <= 1e-9):
        raise AmbiguousOrderingError(f"mixture means {gmm.means} are not distinct")
    return order


def label_changes(field: ChangeField, gmm: GmmParams, min_abs_dz: Optional[float] = 2.0) -> ChangeLabels:
    """Assign each point its most responsible component, renamed by mean order.

    Points with ``|dz| < min_abs_dz`` are forced to Unchanged; pass ``None`` to
    disable the filter.
    """
    order = component_order(gmm)
    resp = gmm.responsibilities(field.dz)[:, order]
    cls = np.array([DELETION, UNCHANGED, ADDITION])[np.argmax(resp, axis=1)]
    if min_abs_dz is not None:
        cls = np.where(np.abs(field.dz) < min_abs_dz, UNCHANGED, cls)
    return ChangeLabels(cls.astype(np.int64), resp, min_abs_dz)


# -- outputs -----------------------------------------------------------------------

CSV_HEADER = "x,y,z,dz,label,resp_del,resp_unch,resp_add"


def write_change_csv(path, fld: ChangeField, labels: ChangeLabels, z: np.ndarray) -> None:
    table = np.column_stack([fld.support[:, 0], fld.support[:, 1], z, fld.dz,
                             labels.labels, labels.responsibilities])
    fmt = ["%.17g"] * 4 + ["%d"] + ["%.17g"] * 3
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=CSV_HEADER, comments="")


def read_change_csv(path) -> dict:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cols = CSV_HEADER.split(",")
    if data.shape[1] != len(cols):
        raise ValueError(f"{path}: expected {len(cols)} columns, found {data.shape[1]}")
    out = {c: data[:, i] for i, c in enumerate(cols)}
    out["label"] = out["label"].astype(np.int64)
    return out


def write_pgm(path, values: np.ndarray, grid: Grid, vmin: Optional[float] = None,
              vmax: Optional[float] = None, maxval: int = 65535, meta: Optional[dict] = None) -> None:
    """Write a grid as binary PGM (north up) plus a JSON sidecar with the affine maps.

    Pixel value p maps back to ``vmin + p * (vmax - vmin) / maxval``.
    """
    img = np.asarray(values, dtype=np.float64).reshape(grid.shape)[::-1]
    vmin = float(img.min()) if vmin is None else float(vmin)
    vmax = float(img.max()) if vmax is None else float(vmax)
    span = vmax - vmin if vmax > vmin else 1.0
    pix = np.clip(np.round((img - vmin) / span * maxval), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(pix.astype(dtype).tobytes())
    sidecar = {
        "width": w, "height": h, "maxval": maxval,
        "value_min": vmin, "value_max": vmax, "value_per_level": span / maxval,
        "x_origin": grid.bounds[0], "y_origin_top": grid.bounds[0 + 2] + h * grid.resolution,
        "pixel_size": grid.resolution, "row_order": "north-up (row 0 = largest y)",
    }
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = map(int, dims.split())
    dtype = ">u2" if int(maxval) > 255 else "u1"
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w)
