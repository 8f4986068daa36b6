"""Non-rigid coherent point drift (Gaussian-mixture EM with coherent motion)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from ..errors import InvalidArgument, NumericalFailure

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True)
class CpdConfig:
    beta: float | None = None  # kernel width (mm); None -> beta_scale x RMS radius of the template
    beta_scale: float = 2.0
    lam: float = 3.0
    w: float = 0.1
    max_em_iterations: int = 150
    tolerance: float = 1e-8
    max_points: int = 3000

    def __post_init__(self):
        if self.beta is not None and self.beta <= 0:
            raise InvalidArgument("CPD beta must be positive")
        if self.lam <= 0 or self.beta_scale <= 0:
            raise InvalidArgument("CPD lambda must be positive")
        if not 0 <= self.w < 1:
            raise InvalidArgument("CPD outlier weight must lie in [0, 1)")


@dataclass
class CpdResult:
    moved: np.ndarray  # (M, 3) moved template points
    log_posterior: np.ndarray  # (M, N); kept in logs so that a collapsed variance cannot underflow it
    W: np.ndarray  # (M, 3) kernel coefficients (normalised units)
    sigma2: float
    nll: list = field(default_factory=list)  # objective per iteration (normalised units)
    iterations: int = 0
    # normalisation used internally: x_norm = (x - shift) / scale
    shift: np.ndarray | None = None
    scale: float = 1.0
    beta: float = 1.0  # in normalised units
    template_norm: np.ndarray | None = None

    def displace(self, points) -> np.ndarray:
        """Carry arbitrary points along the learned coherent motion."""
        p = (np.asarray(points, dtype=np.float64) - self.shift) / self.scale
        g = gaussian_kernel(p, self.template_norm, self.beta)
        return (p + g @ self.W) * self.scale + self.shift

    @property
    def posterior(self) -> np.ndarray:
        return np.exp(self.log_posterior)

    def correspondence(self) -> np.ndarray:
        """Index of the most probable target point for every template point."""
        return np.argmax(self.log_posterior, axis=1)


def gaussian_kernel(a, b, beta):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-d2 / (2.0 * beta * beta))


def mean_nn_spacing(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 1.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(d[:, 1].mean())


def _objective(X, T, sigma2, w, G, W, lam):
    n, d = X.shape
    m = T.shape[0]
    d2 = ((X[None, :, :] - T[:, None, :]) ** 2).sum(axis=-1)
    logk = -d2 / (2 * sigma2) - 0.5 * d * np.log(2 * np.pi * sigma2)
    mix = logsumexp(logk, axis=0) + np.log((1 - w) / m)
    ll = np.logaddexp(mix, np.log(w / n)) if w > 0 else mix
    return float(-ll.sum() + 0.5 * lam * np.einsum("ij,ij->", W, G @ W))


def _log_posterior(X, T, sigma2, w):
    n, d = X.shape
    m = T.shape[0]
    d2 = ((X[None, :, :] - T[:, None, :]) ** 2).sum(axis=-1)
    logk = -d2 / (2 * sigma2)
    lse = logsumexp(logk, axis=0)
    if w > 0:
        log_c = 0.5 * d * np.log(2 * np.pi * sigma2) + np.log(w / (1 - w) * m / n)
        lse = np.logaddexp(lse, log_c)
    return logk - lse


def cpd_nonrigid(template_pts, target_pts, cfg: CpdConfig | None = None, track_objective=True) -> CpdResult:
    """Move ``template_pts`` (Y, M x 3) onto ``target_pts`` (X, N x 3)."""
    cfg = cfg or CpdConfig()
    Y0 = np.asarray(template_pts, dtype=np.float64)
    X0 = np.asarray(target_pts, dtype=np.float64)
    if Y0.ndim != 2 or X0.ndim != 2 or not len(Y0) or not len(X0) or Y0.shape[1] != X0.shape[1]:
        raise InvalidArgument("CPD needs two nonempty point sets of equal dimension")
    if not (np.all(np.isfinite(Y0)) and np.all(np.isfinite(X0))):
        raise InvalidArgument("CPD inputs must be finite")

    shift = Y0.mean(axis=0)
    scale = float(np.sqrt(((Y0 - shift) ** 2).sum(axis=1).mean())) or 1.0
    Y = (Y0 - shift) / scale
    X = (X0 - shift) / scale
    beta = cfg.beta / scale if cfg.beta is not None else cfg.beta_scale

    n, d = X.shape
    m = Y.shape[0]
    G = gaussian_kernel(Y, Y, beta)
    W = np.zeros((m, d))
    T = Y.copy()
    sigma2 = float(((X[None, :, :] - Y[:, None, :]) ** 2).sum() / (d * m * n))
    sigma2 = max(sigma2, SIGMA2_FLOOR)
    w = cfg.w
    history = []
    if track_objective:
        history.append(_objective(X, T, sigma2, w, G, W, cfg.lam))
    prev = None
    P = np.zeros((m, n))
    it = 0
    for it in range(1, cfg.max_em_iterations + 1):
        # E-step
        P = np.exp(_log_posterior(X, T, sigma2, w))
        P1 = P.sum(axis=1)
        Pt1 = P.sum(axis=0)
        PX = P @ X
        Np = float(P1.sum())
        # M-step: (diag(P1) G + lam sigma2 I) W = PX - diag(P1) Y
        A = P1[:, None] * G + cfg.lam * sigma2 * np.eye(m)
        W = np.linalg.solve(A, PX - P1[:, None] * Y)
        T = Y + G @ W
        if not np.all(np.isfinite(T)):
            raise NumericalFailure("CPD produced non-finite points")
        sigma2 = (np.einsum("i,ij->", Pt1, X * X) - 2 * np.einsum("ij,ij->", PX, T)
                  + np.einsum("i,ij->", P1, T * T)) / (Np * d)
        if not np.isfinite(sigma2):
            raise NumericalFailure("CPD variance became non-finite")
        sigma2 = max(float(sigma2), SIGMA2_FLOOR)
        obj = _objective(X, T, sigma2, w, G, W, cfg.lam)
        if track_objective:
            history.append(obj)
        if sigma2 <= SIGMA2_FLOOR:
            break
        if prev is not None and abs(prev - obj) <= cfg.tolerance * max(abs(obj), 1.0):
            break
        prev = obj
    # final posterior for the returned configuration
    logp = _log_posterior(X, T, sigma2, w)
    return CpdResult(moved=T * scale + shift, log_posterior=logp, W=W, sigma2=sigma2 * scale * scale,
                     nll=history, iterations=it, shift=shift, scale=scale, beta=beta,
                     template_norm=Y)
