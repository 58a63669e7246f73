"""Covariance functions, kernel matrices and analytic input-space gradients.

Three families are supported:

    rbf     k(x, x') = variance * exp(-sum_j (x_j - x'_j)^2 / (2 l_j^2))
    linear  k(x, x') = variance * <x, x'>
    poly    k(x, x') = variance * (<x, x'> + offset)^degree

The RBF lengthscale may be a scalar or one positive value per dimension.
Short lengthscales make the similarity abate quickly, i.e. a local, steep
decision surface; long lengthscales give a flat one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RBF",
    "LINEAR",
    "POLY",
    "FAMILIES",
    "KernelSpec",
    "kernel_eval",
    "kernel_matrix",
    "kernel_gradient_x",
    "kernel_gradient_x_batch",
    "self_similarity",
]

RBF = "rbf"
LINEAR = "linear"
POLY = "poly"
FAMILIES = (RBF, LINEAR, POLY)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus parameters. Immutable and JSON-serializable."""

    family: str
    lengthscale: float | tuple[float, ...] = 1.0
    variance: float = 1.0
    degree: int = 2
    offset: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}, expected one of {FAMILIES}")
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        ls = self.lengthscale
        if np.ndim(ls) == 0:
            ls = float(ls)
        else:
            ls = tuple(float(v) for v in np.asarray(ls).ravel())
            if len(ls) == 0:
                raise ValueError("per-dimension lengthscale vector must be nonempty")
        object.__setattr__(self, "lengthscale", ls)
        if np.any(np.asarray(ls) <= 0):
            raise ValueError("lengthscale(s) must be positive")
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError("degree must be an integer >= 1")
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "offset", float(self.offset))

    def lengthscales(self, d: int) -> np.ndarray:
        """Lengthscale broadcast to a length-d vector."""
        if isinstance(self.lengthscale, tuple):
            if len(self.lengthscale) != d:
                raise ValueError(
                    f"per-dimension lengthscale has length {len(self.lengthscale)}, data has d={d}"
                )
            return np.asarray(self.lengthscale, dtype=float)
        return np.full(d, float(self.lengthscale))

    def to_json_dict(self) -> dict:
        ls = self.lengthscale
        return {
            "family": self.family,
            "lengthscale": list(ls) if isinstance(ls, tuple) else ls,
            "variance": self.variance,
            "degree": self.degree,
            "offset": self.offset,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "KernelSpec":
        ls = payload.get("lengthscale", 1.0)
        if isinstance(ls, list):
            ls = tuple(ls)
        return cls(
            family=payload["family"],
            lengthscale=ls,
            variance=payload.get("variance", 1.0),
            degree=payload.get("degree", 2),
            offset=payload.get("offset", 1.0),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        return cls.from_json_dict(json.loads(text))


def _as_point(x) -> np.ndarray:
    p = np.asarray(x, dtype=float)
    if p.ndim != 1:
        raise ValueError("expected a 1-D point")
    return p


def _check_pair(x: np.ndarray, x2: np.ndarray):
    if x.shape != x2.shape:
        raise ValueError(f"point dimensions differ: {x.shape[0]} vs {x2.shape[0]}")


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Similarity of two points under the given kernel."""
    x = _as_point(x)
    x2 = _as_point(x2)
    _check_pair(x, x2)
    if spec.family == RBF:
        ls = spec.lengthscales(x.shape[0])
        z = ((x - x2) / ls) ** 2
        return float(spec.variance * np.exp(-0.5 * z.sum()))
    if spec.family == LINEAR:
        return float(spec.variance * x.dot(x2))
    return float(spec.variance * (x.dot(x2) + spec.offset) ** spec.degree)


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    """All pairwise similarities: entry (i, j) = k(A_i, B_j).

    Self-covariance (A is B) is exactly symmetric because squared
    differences are computed pairwise.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("point sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"point dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if spec.family == RBF:
        ls = spec.lengthscales(A.shape[1])
        diff = (A[:, None, :] - B[None, :, :]) / ls
        return spec.variance * np.exp(-0.5 * (diff**2).sum(axis=-1))
    if spec.family == LINEAR:
        return spec.variance * (A @ B.T)
    return spec.variance * (A @ B.T + spec.offset) ** spec.degree


def self_similarity(spec: KernelSpec, X) -> np.ndarray:
    """k(x, x) for each row of X without forming the full matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.family == RBF:
        return np.full(X.shape[0], spec.variance)
    sq = (X**2).sum(axis=1)
    if spec.family == LINEAR:
        return spec.variance * sq
    return spec.variance * (sq + spec.offset) ** spec.degree


def kernel_gradient_x(spec: KernelSpec, x, x2) -> np.ndarray:
    """Gradient of kernel_eval(spec, x, x2) with respect to x."""
    x = _as_point(x)
    x2 = _as_point(x2)
    _check_pair(x, x2)
    if spec.family == RBF:
        ls = spec.lengthscales(x.shape[0])
        k = kernel_eval(spec, x, x2)
        return k * (-(x - x2) / ls**2)
    if spec.family == LINEAR:
        return spec.variance * x2
    base = x.dot(x2) + spec.offset
    return spec.variance * spec.degree * base ** (spec.degree - 1) * x2


def kernel_gradient_x_batch(spec: KernelSpec, x, X) -> np.ndarray:
    """Row i holds the gradient of k(x, X_i) with respect to x."""
    x = _as_point(x)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != x.shape[0]:
        raise ValueError(f"point dimensions differ: {x.shape[0]} vs {X.shape[1]}")
    if spec.family == RBF:
        ls = spec.lengthscales(x.shape[0])
        k = kernel_matrix(spec, x[None, :], X)[0]
        return k[:, None] * (-(x[None, :] - X) / ls**2)
    if spec.family == LINEAR:
        return spec.variance * X
    base = X @ x + spec.offset
    return spec.variance * spec.degree * (base ** (spec.degree - 1))[:, None] * X
