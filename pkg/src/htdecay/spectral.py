"""Spectral diagnostics of weight matrices.

The empirical spectral density (ESD) of a matrix W is the set of
eigenvalues of X = W^T W restricted to the smaller dimension, i.e. the
squared singular values of W. Tail heaviness is summarized by the
power-law exponent of the ESD estimated with the Hill estimator

    alpha = 1 + k / sum_{i=1..k} ln(lam_{n-i+1} / lam_{n-k})

where k counts the tail eigenvalues above the threshold lam_{n-k}.
Three strategies choose k: the largest-half rule (median), the
log-histogram density peak (fix-finger), and a Kolmogorov-Smirnov
goodness-of-fit scan over candidate thresholds.

All arithmetic is double precision regardless of storage precision, and
eigenvalues below 1e-12 * lam_max are treated as zero when choosing
thresholds so the log-ratios never see rounding noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .tensor_io import ModuleId, WeightMatrix

# Relative floor below which eigenvalues count as zero for threshold choice.
ZERO_FLOOR_REL = 1e-12

# Log-spaced histogram bins for the fix-finger density peak.
FIX_FINGER_BINS = 100

# Cap on goodness-of-fit threshold candidates (full scan is O(n^2)).
GOF_MAX_CANDIDATES = 100


class SpectralError(Exception):
    """Base class for spectral analysis failures."""


class SvdConvergenceError(SpectralError):
    """The SVD driver failed to converge (numerical pathology)."""


class DegenerateTailError(SpectralError):
    """All tail eigenvalues equal the threshold: zero log-ratio denominator."""


class NonpositiveThresholdError(SpectralError):
    """The threshold eigenvalue lam_{n-k} is zero or negative."""


class TailTooSmallError(SpectralError):
    """Fewer than 2 usable tail samples under the requested method."""


class FitMethod(Enum):
    MEDIAN = "median"
    FIX_FINGER = "fixfinger"
    GOODNESS_OF_FIT = "gof"


@dataclass(frozen=True)
class Esd:
    """Eigenvalue spectrum of W^T W, sorted ascending, nonnegative."""

    eigenvalues: np.ndarray

    def __post_init__(self) -> None:
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("eigenvalues must be a nonempty 1-D array")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("eigenvalues must be finite and nonnegative")
        if np.any(np.diff(lam) < 0):
            lam = np.sort(lam)
        object.__setattr__(self, "eigenvalues", lam)

    def __len__(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def lam_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lam_max(self) -> float:
        return float(self.eigenvalues[-1])


@dataclass(frozen=True)
class HillFit:
    """Result of a Hill fit: exponent, tail count, threshold, and method."""

    alpha: float
    k: int
    xmin: float
    method: Optional[FitMethod] = None


@dataclass(frozen=True)
class SpectralReport:
    """Per-module scalar diagnostics bundled for the scheduler."""

    module: ModuleId
    alpha: HillFit
    spectral_norm: float
    frobenius_norm: float
    grad_norm: Optional[float] = None


def compute_esd(w: WeightMatrix) -> Esd:
    """Squared singular values of ``w``, ascending, in double precision.

    Orientation does not matter: W and W^T have the same singular values,
    so the result always has min(rows, cols) entries.
    """
    a = np.asarray(w.values, dtype=np.float64)
    try:
        s = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge: {exc}") from exc
    return Esd(np.sort(s * s))


def hill_alpha(esd: Esd, k: int, method: Optional[FitMethod] = None) -> HillFit:
    """Hill estimate of the power-law exponent using the top-k eigenvalues.

    Scale-invariant: the log-ratios cancel any positive rescaling of the
    spectrum. Raises :class:`DegenerateTailError` when every tail
    eigenvalue equals the threshold (zero denominator) and
    :class:`NonpositiveThresholdError` when lam_{n-k} <= 0.
    """
    lam = esd.eigenvalues
    n = lam.size
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must satisfy 1 <= k <= n-1, got k={k} for n={n}")
    xmin = float(lam[n - k - 1])
    if xmin <= 0.0:
        raise NonpositiveThresholdError(f"threshold eigenvalue lam_(n-k) = {xmin} is not positive")
    denom = float(np.sum(np.log(lam[n - k :] / xmin)))
    if denom <= 0.0:
        raise DegenerateTailError(
            f"degenerate tail: all top-{k} eigenvalues equal the threshold {xmin}"
        )
    return HillFit(alpha=1.0 + k / denom, k=k, xmin=xmin, method=method)


def _eligible_k_max(lam: np.ndarray) -> int:
    """Largest k whose threshold stays above the zero floor."""
    floor = ZERO_FLOOR_REL * float(lam[-1])
    n_pos = int(np.count_nonzero(lam > floor))
    return min(lam.size - 1, n_pos - 1)


def select_k(
    esd: Esd,
    method: FitMethod,
    *,
    bins: int = FIX_FINGER_BINS,
    max_candidates: int = GOF_MAX_CANDIDATES,
) -> int:
    """Choose the tail count k for the given fitting method.

    median        k = floor(n/2) (slope from the largest half).
    fixfinger     threshold at the peak of the eigenvalue density over
                  log-spaced bins; k counts eigenvalues above it,
                  clamped to [2, n-1].
    gof           scan up to ``max_candidates`` evenly spaced order
                  statistics as thresholds and keep the one minimizing
                  the KS distance between the empirical tail and the
                  fitted Pareto CDF; ties broken toward larger k.
    """
    lam = esd.eigenvalues
    n = lam.size
    if n < 4:
        raise TailTooSmallError(f"need at least 4 eigenvalues, got {n}")
    if lam[0] == lam[-1]:
        raise DegenerateTailError("degenerate tail: all eigenvalues equal")
    k_cap = _eligible_k_max(lam)
    if k_cap < 2:
        raise TailTooSmallError("fewer than 2 eigenvalues above the zero floor")

    if method is FitMethod.MEDIAN:
        k = min(n // 2, k_cap)
        if k < 2:
            raise TailTooSmallError(f"median rule leaves k={k} < 2 tail samples")
        return k

    if method is FitMethod.FIX_FINGER:
        floor = ZERO_FLOOR_REL * float(lam[-1])
        pos = lam[lam > floor]
        lo, hi = float(pos[0]), float(pos[-1])
        if lo == hi:
            raise DegenerateTailError("degenerate tail: positive spectrum is a single point")
        edges = np.logspace(math.log10(lo), math.log10(hi), bins + 1)
        counts, _ = np.histogram(pos, bins=edges)
        peak = int(np.argmax(counts))
        in_bin = pos[(pos >= edges[peak]) & (pos <= edges[peak + 1])]
        xmin = float(in_bin[-1])
        k = int(np.count_nonzero(lam > xmin))
        k = max(2, min(k, k_cap))
        return k

    if method is FitMethod.GOODNESS_OF_FIT:
        # Candidate thresholds are order statistics lam_j (1-based j), each
        # implying k = n - j. Need k >= 2 and lam_j above the zero floor.
        j_lo = n - k_cap
        j_hi = n - 2
        count = j_hi - j_lo + 1
        if count < 1:
            raise TailTooSmallError("no usable thresholds above the zero floor")
        js = np.unique(np.round(np.linspace(j_lo, j_hi, min(max_candidates, count))).astype(int))
        best: tuple[float, int] | None = None  # (ks_distance, -k)
        for j in js:
            k = n - int(j)
            xmin = float(lam[j - 1])
            tail = lam[j:]
            denom = float(np.sum(np.log(tail / xmin)))
            if denom <= 0.0:
                continue
            alpha = 1.0 + k / denom
            fitted = 1.0 - np.power(tail / xmin, 1.0 - alpha)
            upper = np.arange(1, k + 1, dtype=np.float64) / k
            lower = np.arange(0, k, dtype=np.float64) / k
            d = max(float(np.max(np.abs(upper - fitted))), float(np.max(np.abs(fitted - lower))))
            cand = (d, -k)
            if best is None or cand < best:
                best = cand
        if best is None:
            raise DegenerateTailError("degenerate tail at every candidate threshold")
        return -best[1]

    raise ValueError(f"unknown fit method: {method!r}")


def fit_esd(esd: Esd, method: FitMethod, **kwargs) -> HillFit:
    """Select k per ``method`` and run the Hill estimator."""
    k = select_k(esd, method, **kwargs)
    fit = hill_alpha(esd, k)
    return HillFit(alpha=fit.alpha, k=fit.k, xmin=fit.xmin, method=method)


def spectral_norm(w: WeightMatrix) -> float:
    """Largest singular value, double precision."""
    a = np.asarray(w.values, dtype=np.float64)
    try:
        s = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge: {exc}") from exc
    return float(s[0])


def frobenius_norm(w: WeightMatrix) -> float:
    """sqrt of the sum of squared entries, double precision."""
    a = np.asarray(w.values, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def analyze_module(
    w: WeightMatrix,
    grad: Optional[WeightMatrix] = None,
    method: FitMethod = FitMethod.MEDIAN,
) -> SpectralReport:
    """Bundle the Hill fit and norms of one module into a report.

    Pure function of its inputs; spectral errors are re-raised with the
    module name prepended so batch callers can attribute failures.
    """
    if grad is not None and grad.values.shape != w.values.shape:
        raise ValueError(
            f"{w.id.raw_name}: gradient shape {grad.values.shape} "
            f"does not match weight shape {w.values.shape}"
        )
    try:
        esd = compute_esd(w)
        fit = fit_esd(esd, method)
    except SpectralError as exc:
        raise type(exc)(f"{w.id.raw_name}: {exc}") from exc
    return SpectralReport(
        module=w.id,
        alpha=fit,
        spectral_norm=math.sqrt(esd.lam_max),
        frobenius_norm=frobenius_norm(w),
        grad_norm=None if grad is None else frobenius_norm(grad),
    )
