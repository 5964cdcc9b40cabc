"""Input feature maps: identity and random Fourier features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .parallel import matmul


@dataclass(frozen=True)
class RffMatrix:
    """Frequency matrix ``B`` (M x d) with entries drawn from N(0, sigma^2)."""

    B: np.ndarray
    sigma: float
    seed: int

    @classmethod
    def draw(cls, n_features: int, dim: int, sigma: float, seed: int) -> "RffMatrix":
        if n_features < 1:
            raise ValueError("RFF needs at least one frequency")
        if not sigma > 0:
            raise ValueError("RFF scale sigma must be positive")
        B = np.random.default_rng(seed).normal(0.0, sigma, size=(n_features, dim))
        B.setflags(write=False)
        return cls(B, float(sigma), int(seed))

    @property
    def n_features(self) -> int:
        return self.B.shape[0]


@dataclass(frozen=True)
class Encoding:
    """Either the identity map (``rff is None``) or gamma(v) = [cos 2piBv, sin 2piBv]."""

    dim: int
    rff: Optional[RffMatrix] = None

    def __post_init__(self):
        if self.rff is not None and self.rff.B.shape[1] != self.dim:
            raise ValueError(f"RFF matrix has {self.rff.B.shape[1]} columns, expected {self.dim}")

    @classmethod
    def identity(cls, dim: int) -> "Encoding":
        return cls(dim)

    @classmethod
    def fourier(cls, dim: int, n_features: int = 256, sigma: float = 10.0, seed: int = 0) -> "Encoding":
        return cls(dim, RffMatrix.draw(n_features, dim, sigma, seed))

    @property
    def variant(self) -> str:
        return "identity" if self.rff is None else "rff"

    @property
    def output_dim(self) -> int:
        return self.dim if self.rff is None else 2 * self.rff.n_features

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim}-dimensional input, got {v.shape[-1]}")
        return v

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "dim": self.dim}
        if self.rff is not None:
            d.update(sigma=self.rff.sigma, seed=self.rff.seed, n_features=self.rff.n_features)
        return d


def encode(enc: Encoding, v: np.ndarray) -> np.ndarray:
    """Map coordinates of shape (..., d) to features of shape (..., output_dim)."""
    v = enc._check(v)
    if enc.rff is None:
        return v.copy()
    proj = 2.0 * np.pi * matmul(v, enc.rff.B.T)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


def encode_jacobian(enc: Encoding, v: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`encode`, shape (..., output_dim, d)."""
    v = enc._check(v)
    if enc.rff is None:
        return np.broadcast_to(np.eye(enc.dim), v.shape[:-1] + (enc.dim, enc.dim)).copy()
    B = enc.rff.B
    proj = 2.0 * np.pi * matmul(v, B.T)
    d_cos = -2.0 * np.pi * np.sin(proj)[..., None] * B
    d_sin = 2.0 * np.pi * np.cos(proj)[..., None] * B
    return np.concatenate([d_cos, d_sin], axis=-2)
