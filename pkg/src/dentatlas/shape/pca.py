"""PCA shape models over corresponded vertex sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, NotReachable

# modes with eigenvalue below this fraction of the largest are dropped
RELATIVE_EIGENVALUE_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class CorrespondedShapeSet:
    triangles: np.ndarray  # (F, 3) shared topology
    shapes: np.ndarray  # (n_subjects, n_vertices, 3) mm
    source_ids: tuple = ()

    def __post_init__(self):
        s = np.array(self.shapes, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != 3:
            raise InvalidArgument("shapes must be an (n_subjects, n_vertices, 3) array")
        if not np.all(np.isfinite(s)):
            raise InvalidArgument("shape coordinates must be finite")
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and t.max() >= s.shape[1]:
            raise InvalidArgument("triangle index out of range")
        ids = tuple(self.source_ids) or tuple(str(i) for i in range(len(s)))
        if len(ids) != len(s):
            raise InvalidArgument("one source id per shape is required")
        object.__setattr__(self, "shapes", s)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "source_ids", ids)

    @property
    def n_subjects(self) -> int:
        return self.shapes.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.shapes.shape[1]

    def vectors(self) -> np.ndarray:
        return self.shapes.reshape(self.n_subjects, -1)


@dataclass(frozen=True, eq=False)
class ShapeModel:
    mean: np.ndarray  # (3m,)
    modes: np.ndarray  # (3m, k) orthonormal columns
    eigenvalues: np.ndarray  # (k,) descending
    explained_variance_ratio: np.ndarray  # (k,)
    total_variance: float = 0.0
    n_subjects: int = 0
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    def project(self, shape) -> np.ndarray:
        """Coefficients in standard-deviation units."""
        x = np.asarray(shape, dtype=np.float64).reshape(-1) - self.mean
        return (self.modes.T @ x) / np.sqrt(self.eigenvalues)


def pca_fit(shapes: CorrespondedShapeSet) -> ShapeModel:
    """Mean and principal modes of the shape vectors via the n x n Gram matrix."""
    x = shapes.vectors()
    n = x.shape[0]
    if n < 2:
        raise InvalidArgument("PCA needs at least two shapes")
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T / (n - 1)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    total = float(np.trace(gram))
    lmax = max(float(evals[0]), 0.0)
    keep = [i for i in range(min(n - 1, len(evals))) if lmax > 0 and evals[i] > RELATIVE_EIGENVALUE_FLOOR * lmax]
    evals = evals[keep]
    modes = xc.T @ evecs[:, keep] / np.sqrt((n - 1) * evals) if keep else np.zeros((x.shape[1], 0))
    if keep:
        # symmetric re-orthonormalisation removes round-off from the Gram route
        w, v = np.linalg.eigh(modes.T @ modes)
        modes = modes @ (v / np.sqrt(w)) @ v.T
        signs = np.sign(modes[np.argmax(np.abs(modes), axis=0), np.arange(modes.shape[1])])
        modes = modes * signs
    ratio = evals / total if total > 0 else np.zeros_like(evals)
    return ShapeModel(mean=mean, modes=modes, eigenvalues=evals, explained_variance_ratio=ratio,
                      total_variance=total, n_subjects=n, triangles=shapes.triangles)


def pca_synthesize(model: ShapeModel, coeffs) -> np.ndarray:
    """``mean + sum_i c_i sqrt(lambda_i) mode_i`` with ``coeffs`` in SD units."""
    c = np.atleast_1d(np.asarray(coeffs, dtype=np.float64))
    if c.size > model.n_modes:
        raise InvalidArgument(f"{c.size} coefficients for a {model.n_modes}-mode model")
    k = c.size
    return model.mean + model.modes[:, :k] @ (c * np.sqrt(model.eigenvalues[:k]))


def explained_variance_report(model: ShapeModel, threshold: float) -> int:
    """Smallest number of leading modes whose cumulative ratio reaches ``threshold``."""
    cum = np.cumsum(model.explained_variance_ratio)
    hits = np.flatnonzero(cum >= threshold - 1e-12)
    if not hits.size:
        captured = float(cum[-1]) if cum.size else 0.0
        raise NotReachable(f"threshold {threshold} exceeds captured variance {captured:.6f}")
    return int(hits[0]) + 1
