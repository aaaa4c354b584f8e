"""Covariance eigenspectra of activation matrices and derived metrics.

Works on a feature matrix F (M rows of d-dimensional activations).  The
empirical covariance is (1/M) F^T F; its eigenvalues drive two scalar
summaries of representation geometry:

* ``rankme``    -- exponential of the Shannon entropy of the normalized
                   eigenvalue distribution ("effective rank", in (0, d]).
* ``alpha_req`` -- exponent of the power law ``lambda_i ~ i**(-alpha)``
                   fitted by least squares in log-log space.

Eigenvector ablation projects the rows of F onto (or off) the span of
the top-k eigenvectors, keeping the ambient dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "FeatureMatrix",
    "EigenSpectrum",
    "SpectralMetrics",
    "center_features",
    "covariance_spectrum",
    "rankme",
    "alpha_req",
    "spectral_metrics",
    "ablate_spectrum",
]

# Negative eigenvalues within this relative tolerance of the top eigenvalue
# are symmetric-solver round-off and get clamped to zero.
_EIG_CLAMP_RTOL = 1e-10

# Default fit window keeps indices with lambda_i > _ALPHA_FLOOR_RTOL * lambda_1.
_ALPHA_FLOOR_RTOL = 1e-12


@dataclass(frozen=True)
class FeatureMatrix:
    """M x d activation matrix with a column-centering flag."""

    data: np.ndarray
    centered: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {data.shape}")
        m, d = data.shape
        if m < 2:
            raise ValueError(f"need at least 2 rows, got {m}")
        if d < 1:
            raise ValueError("need at least 1 column")
        object.__setattr__(self, "data", data)
        if self.centered:
            _check_centered(data)

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def _check_centered(data: np.ndarray) -> None:
    means = data.mean(axis=0)
    stds = data.std(axis=0)
    # relative to column spread, with an absolute floor for constant or
    # numerically-zero columns
    tol = np.maximum(1e-10 * stds, 1e-12)
    bad = np.abs(means) > tol
    if np.any(bad):
        j = int(np.argmax(bad))
        raise ValueError(
            f"centered flag set but column {j} has mean {means[j]:.3e} "
            f"(tolerance {tol[j]:.3e})"
        )


@dataclass(frozen=True)
class EigenSpectrum:
    """Descending eigenvalues of the feature covariance, optional eigenvectors."""

    values: np.ndarray
    vectors: Optional[np.ndarray] = None
    source_dims: tuple[int, int] = (0, 0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("eigenvalues must be a nonempty 1-D array")
        if np.any(np.diff(values) > 0):
            raise ValueError("eigenvalues must be nonincreasing")
        if values[-1] < 0:
            raise ValueError("eigenvalues must be nonnegative after clamping")
        object.__setattr__(self, "values", values)
        if self.vectors is not None:
            vectors = np.asarray(self.vectors, dtype=np.float64)
            d = values.size
            if vectors.shape != (d, d):
                raise ValueError(f"eigenvector matrix must be {d}x{d}")
            if not np.allclose(vectors.T @ vectors, np.eye(d), atol=1e-8):
                raise ValueError("eigenvectors are not orthonormal")
            object.__setattr__(self, "vectors", vectors)

    @property
    def d(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SpectralMetrics:
    """RankMe plus the power-law decay fit of one spectrum."""

    rankme: float
    alpha_req: float
    fit_window: tuple[int, int]  # 1-based inclusive rank range used in the fit
    fit_r2: float
    m: int
    d: int

    def to_record(self) -> dict:
        return {
            "rankme": self.rankme,
            "alpha_req": self.alpha_req,
            "fit_window": list(self.fit_window),
            "fit_r2": self.fit_r2,
            "m": self.m,
            "d": self.d,
        }


def center_features(f: FeatureMatrix) -> FeatureMatrix:
    """Subtract column means. Idempotent; requires at least two rows."""
    data = f.data - f.data.mean(axis=0, keepdims=True)
    return FeatureMatrix(data, centered=True)


def covariance_spectrum(f: FeatureMatrix, want_vectors: bool = False) -> EigenSpectrum:
    """Eigendecompose (1/M) F^T F, eigenvalues descending and clamped at zero.

    Values-only queries on wide matrices (M < d) are solved through the
    M x M Gram matrix, which shares the nonzero spectrum.  Requests for
    eigenvectors always solve the d x d covariance so that a full
    orthonormal basis is returned.
    """
    if not f.centered:
        raise ValueError("covariance_spectrum requires centered features")
    data = f.data
    if not np.all(np.isfinite(data)):
        raise ValueError("feature matrix contains non-finite entries")
    m, d = data.shape

    if want_vectors or m >= d:
        cov = (data.T @ data) / m
        values, vectors = np.linalg.eigh(cov)
        order = np.argsort(-values, kind="stable")
        values = values[order]
        vectors = vectors[:, order]
    else:
        gram = (data @ data.T) / m
        gvals = np.linalg.eigvalsh(gram)[::-1]
        values = np.zeros(d)
        values[:m] = gvals
        vectors = None

    values = _clamp_eigenvalues(values)
    return EigenSpectrum(values=values, vectors=vectors if want_vectors else None,
                         source_dims=(m, d))


def _clamp_eigenvalues(values: np.ndarray) -> np.ndarray:
    top = values[0] if values.size else 0.0
    floor = -_EIG_CLAMP_RTOL * max(top, 0.0)
    if np.any(values < floor):
        raise ValueError(
            f"eigenvalue {values.min():.3e} below round-off tolerance {floor:.3e}"
        )
    return np.maximum(values, 0.0)


def rankme(spec: EigenSpectrum) -> float:
    """exp of the Shannon entropy of the normalized spectrum, in (0, d].

    Zero eigenvalues contribute nothing (0 * ln 0 = 0 limit convention).
    """
    values = spec.values
    total = values.sum()
    if total <= 0.0:
        raise ValueError("rankme undefined for an all-zero spectrum")
    p = values / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def alpha_req(
    spec: EigenSpectrum, window: Optional[tuple[int, int]] = None
) -> tuple[float, float]:
    """Power-law exponent of the spectrum by OLS of ln(lambda_i) on ln(i).

    ``window`` is a 1-based inclusive (i_min, i_max) rank range; by default
    every index with lambda_i > 1e-12 * lambda_1 participates.  Returns
    (alpha, r2) where alpha is the negated fitted slope.  Within the window,
    indices with nonpositive eigenvalues are dropped; at least 3 usable
    points are required.
    """
    values = spec.values
    d = values.size
    if window is None:
        lo, hi = 1, d
    else:
        lo, hi = int(window[0]), int(window[1])
        if lo < 1 or hi > d or lo > hi:
            raise ValueError(f"window {window} out of range for d={d}")
    idx = np.arange(lo, hi + 1)
    lam = values[lo - 1 : hi]
    keep = lam > _ALPHA_FLOOR_RTOL * values[0]
    idx, lam = idx[keep], lam[keep]
    if idx.size < 3:
        raise ValueError(f"power-law fit needs >= 3 usable points, got {idx.size}")
    x = np.log(idx.astype(np.float64))
    y = np.log(lam)
    xm = x.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0.0:
        raise ValueError("zero variance in ln(i); cannot fit a slope")
    slope = np.sum((x - xm) * (y - y.mean())) / sxx
    intercept = y.mean() - slope * xm
    resid = y - (slope * x + intercept)
    sst = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if sst == 0.0 else 1.0 - float(np.sum(resid**2) / sst)
    return float(-slope), float(r2)


def spectral_metrics(
    f: FeatureMatrix, window: Optional[tuple[int, int]] = None
) -> SpectralMetrics:
    """Convenience wrapper: spectrum, RankMe and power-law fit of one matrix."""
    spec = covariance_spectrum(f)
    alpha, r2 = alpha_req(spec, window)
    if window is None:
        usable = spec.values > _ALPHA_FLOOR_RTOL * spec.values[0]
        window = (1, int(np.max(np.nonzero(usable)[0])) + 1)
    return SpectralMetrics(
        rankme=rankme(spec),
        alpha_req=alpha,
        fit_window=(int(window[0]), int(window[1])),
        fit_r2=r2,
        m=f.m,
        d=f.d,
    )


def ablate_spectrum(f: FeatureMatrix, k: int, mode: str) -> FeatureMatrix:
    """Project rows of F onto (retain_top) or off (remove_top) the top-k
    eigenvector span.  Output keeps the M x d shape.

    Ties at the k-th eigenvalue are broken by ascending position in the
    descending-sorted spectrum, which makes the split deterministic.
    """
    if mode not in ("retain_top", "remove_top"):
        raise ValueError(f"mode must be retain_top or remove_top, got {mode!r}")
    if not f.centered:
        raise ValueError("ablate_spectrum requires centered features")
    d = f.d
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    spec = covariance_spectrum(f, want_vectors=True)
    v_top = spec.vectors[:, :k]
    retained = (f.data @ v_top) @ v_top.T
    if mode == "retain_top":
        out = retained
    else:
        out = f.data - retained
    return FeatureMatrix(out, centered=True)
