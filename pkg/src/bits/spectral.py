"""Eigen-analysis of feature covariance: explained variance, effective dimension and rank."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-6
OFFDIAG_TOL = 1e-10
CLAMP_TOL = 1e-8
MAX_SWEEPS = 100


class DegenerateSpectrumError(ValueError):
    """The spectrum sums to zero, so normalized metrics are undefined."""


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 rounds (n even) of disjoint index pairs covering every pair once."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _offdiag_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def eig_sym_psd(m, sym_tol: float = SYMMETRY_TOL, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric PSD matrix, descending, by cyclic Jacobi.

    Each sweep visits every index pair once, grouped into rounds of disjoint
    pairs so one round is a single vectorized rotation. Iteration stops once
    the off-diagonal Frobenius norm drops to 1e-10 times that of ``m``.
    Negative eigenvalues down to -1e-8 (relative to the norm) are clamped to 0.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = float(np.linalg.norm(a))
    if n == 0:
        return np.zeros(0)
    asym = float(np.max(np.abs(a - a.T)))
    if asym > sym_tol * max(scale, 1.0):
        raise ValueError(f"matrix is not symmetric (max |M - M^T| = {asym:.3g})")
    a = (a + a.T) / 2
    if scale == 0.0:
        return np.zeros(n)

    size = n + (n % 2)
    if size != n:
        # A dummy zero row/column keeps the round-robin pairing even.
        a = np.pad(a, ((0, 1), (0, 1)))
    rounds = _round_robin(size)
    target = OFFDIAG_TOL * scale
    for _ in range(max_sweeps):
        if _offdiag_norm(a) <= target:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = a[p, p], a[q, q]
            with np.errstate(over="ignore", divide="ignore"):
                # tau can overflow for negligible apq; t then rounds to 0, a no-op rotation
                tau = (aqq - app) / (2 * apq)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1 + tau * tau))
            c = 1 / np.sqrt(1 + t * t)
            s = t * c
            rp, rq = a[p, :], a[q, :]
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p], a[:, q]
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
    else:
        if _offdiag_norm(a) > target:
            raise RuntimeError("Jacobi iteration did not converge")

    # The dummy row never couples to the rest: its pair entry is always 0.
    lam = np.diag(a)[:n].copy()
    floor = -CLAMP_TOL * max(scale, 1.0)
    if (lam < floor).any():
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {lam.min():.3g})")
    lam[lam < 0] = 0.0
    return np.sort(lam)[::-1]


@dataclass
class SpectrumSummary:
    eigenvalues: np.ndarray
    cumulative_variance: np.ndarray
    d_eff: float
    r_eff: float

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    def as_dict(self) -> dict:
        return {"dim": self.dim, "d_eff": self.d_eff, "r_eff": self.r_eff}


def cumulative_variance(eigenvalues) -> np.ndarray:
    lam = np.asarray(eigenvalues, dtype=np.float64)
    total = lam.sum()
    if total <= 0:
        raise DegenerateSpectrumError("eigenvalues sum to zero")
    cv = np.cumsum(lam) / total
    cv[-1] = 1.0
    return cv


def effective_dimension(eigenvalues) -> float:
    """(sum lambda)^2 / sum lambda^2."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    sq = float(np.sum(lam * lam))
    if sq <= 0:
        raise DegenerateSpectrumError("eigenvalues are all zero")
    return float(lam.sum() ** 2 / sq)


def effective_rank(eigenvalues) -> float:
    """exp of the Shannon entropy of the normalized spectrum, with 0 log 0 = 0."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    total = lam.sum()
    if total <= 0:
        raise DegenerateSpectrumError("eigenvalues sum to zero")
    p = lam[lam > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def summary_from_eigenvalues(eigenvalues) -> SpectrumSummary:
    lam = np.sort(np.asarray(eigenvalues, dtype=np.float64))[::-1]
    if (lam < 0).any():
        raise ValueError("eigenvalues must be non-negative")
    return SpectrumSummary(
        eigenvalues=lam,
        cumulative_variance=cumulative_variance(lam),
        d_eff=effective_dimension(lam),
        r_eff=effective_rank(lam),
    )


def feature_covariance(features) -> np.ndarray:
    """Biased (1/N) covariance of the rows of ``features``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    xc = x - x.mean(axis=0)
    return xc.T @ xc / x.shape[0]


def spectrum_summary(features) -> SpectrumSummary:
    """cv curve, d_eff and r_eff of the feature covariance spectrum."""
    cov = feature_covariance(features)
    lam = eig_sym_psd(cov)
    if lam.sum() <= 0:
        raise DegenerateSpectrumError("features have zero variance")
    return summary_from_eigenvalues(lam)


def write_cv_csv(summary: SpectrumSummary, path) -> None:
    """One row per leading dimension: (dimension, cumulative variance)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dimension", "cv"])
        for i, v in enumerate(summary.cumulative_variance, start=1):
            w.writerow([i, repr(float(v))])
    os.replace(tmp, path)
