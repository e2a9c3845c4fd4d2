"""Geometric diagnostics of a modality pair: spectra, overlaps, residual shape.

Conventions: covariances are population-normalized (1/n); all spectra are
sorted descending; log-spectral statistics floor eigenvalues at
1e-12 * trace / d and drop floored ranks from the correlation.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    DegenerateResidual,
    DegenerateSpectrum,
    InsufficientSamples,
    InvalidFrame,
    InvalidInput,
)
from .numerics import covariance, cross_covariance, haar_subspace, sym_eig

__all__ = [
    "GapReport",
    "spectral_correlation",
    "subspace_overlap",
    "grassmann_baseline",
    "mean_residual_decomposition",
    "residual_covariance",
    "anisotropy_ratio",
    "cumulative_energy",
    "effective_dimension",
    "coverage_ratio",
    "build_report",
    "report_to_json",
    "curves_to_csv",
]

G_SIGMA_EPS = 1e-12


@dataclass
class GapReport:
    """Every scalar and curve the diagnostics stage produces for one pair."""

    c_lambda: float | None = None
    overlap_curve: list = field(default_factory=list)  # (q, O_q, q/d)
    g_mu: float = 0.0
    g_sigma: float = 0.0
    d_mean: float = 0.0
    d_tilde: float = 0.0
    residual_ratio_dist: float = 0.0
    residual_ratio_energy: float = 0.0
    degenerate_distance: bool = False
    a_r: float = 1.0
    energy_curve: list = field(default_factory=list)  # (K, E_K, K/d)
    d_eff_frac: float = 1.0
    eta_u: float | None = None
    residual_spectrum: list = field(default_factory=list)


def _descending_spectrum(m):
    return sym_eig(m).values


def spectral_correlation(sigma_x, sigma_y):
    """Pearson correlation of log-eigenvalues of two covariances.

    Ranks where either spectrum hit the numerical floor are excluded;
    a spectrum with no log-variance left is degenerate.
    """
    lx = _descending_spectrum(sigma_x)
    ly = _descending_spectrum(sigma_y)
    if lx.size != ly.size:
        raise InvalidInput("spectra must have equal length")
    d = lx.size
    floor_x = 1e-12 * np.trace(np.asarray(sigma_x, dtype=np.float64)) / d
    floor_y = 1e-12 * np.trace(np.asarray(sigma_y, dtype=np.float64)) / d
    keep = (lx > floor_x) & (ly > floor_y)
    if keep.sum() < 2:
        raise DegenerateSpectrum("fewer than 2 eigenvalues above the floor")
    ax = np.log(lx[keep])
    ay = np.log(ly[keep])
    if np.std(ax) == 0.0 or np.std(ay) == 0.0:
        raise DegenerateSpectrum("log-spectrum has zero variance")
    return float(np.corrcoef(ax, ay)[0, 1])


def _top_eigvecs(m, q):
    return sym_eig(m).vectors[:, :q]


def subspace_overlap(sigma_x, sigma_y, q):
    """O_q = (1/q) || (U_x^q)^T U_y^q ||_F^2, in [0, 1]; random baseline q/d."""
    d = np.asarray(sigma_x).shape[0]
    if not 1 <= q <= d:
        raise InvalidInput(f"need 1 <= q <= d, got q={q}")
    ux = _top_eigvecs(sigma_x, q)
    uy = _top_eigvecs(sigma_y, q)
    return float(np.sum((ux.T @ uy) ** 2) / q)


def grassmann_baseline(fixed_basis, q, draws, seed):
    """Monte-Carlo mean overlap of a fixed q-subspace with Haar-random ones.

    Returns (mean, stderr); the population value is q/d.
    """
    d = fixed_basis.shape[0]
    rng = np.random.default_rng(seed)
    vals = np.empty(draws)
    for i in range(draws):
        u = haar_subspace(d, q, rng)
        vals[i] = np.sum((fixed_basis[:, :q].T @ u) ** 2) / q
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(draws))


def mean_residual_decomposition(pairs):
    """Centroid displacement, covariance-shape gap and the residual ratios.

    Checks the empirical orthogonal-decomposition identity
    mean ||x - y||^2 = ||mu_x - mu_y||^2 + mean ||r||^2 to 1e-9 relative
    before reporting, where r is the paired residual after mean correction.
    """
    x = pairs.x.data
    y = pairs.y.data
    if pairs.n < 2:
        raise InsufficientSamples("need at least 2 pairs")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    g_mu = float(np.linalg.norm(mu_x - mu_y))

    sx = covariance(x)
    sy = covariance(y)
    g_sigma = float(
        np.linalg.norm(sx - sy, "fro") / (np.linalg.norm(sx, "fro") + G_SIGMA_EPS)
    )

    diff = x - y
    resid = (x - mu_x) - (y - mu_y)
    msq_diff = float(np.mean(np.sum(diff**2, axis=1)))
    msq_resid = float(np.mean(np.sum(resid**2, axis=1)))
    if msq_diff > 0:
        gap = abs(msq_diff - g_mu**2 - msq_resid) / msq_diff
        if gap > 1e-9:
            raise InvalidInput(f"decomposition identity violated: rel err {gap:.3e}")

    d_mean = float(np.mean(np.linalg.norm(diff, axis=1)))
    d_tilde = float(np.mean(np.linalg.norm(resid, axis=1)))
    degenerate = d_mean == 0.0
    report = GapReport(
        g_mu=g_mu,
        g_sigma=g_sigma,
        d_mean=d_mean,
        d_tilde=d_tilde,
        residual_ratio_dist=0.0 if degenerate else d_tilde / d_mean,
        residual_ratio_energy=0.0 if msq_diff == 0.0 else msq_resid / msq_diff,
        degenerate_distance=degenerate,
    )
    return report


def residual_covariance(pairs):
    """Covariance of the mean-corrected paired residual r = (x - mu_x) - (y - mu_y)."""
    if pairs.n < 2:
        raise InsufficientSamples("need at least 2 pairs")
    x = pairs.x.data
    y = pairs.y.data
    r = (x - x.mean(axis=0)) - (y - y.mean(axis=0))
    n = r.shape[0]
    return (r.T @ r + (r.T @ r).T) / (2 * n)


def residual_covariance_identity(pairs):
    """Four-term form Sigma_x + Sigma_y - Sigma_xy - Sigma_yx of the same matrix."""
    sxy = cross_covariance(pairs.x.data, pairs.y.data)
    return covariance(pairs.x.data) + covariance(pairs.y.data) - sxy - sxy.T


def _floored_spectrum(sigma_r):
    vals = _descending_spectrum(sigma_r)
    tr = vals.sum()
    if vals.min() < -1e-9 * max(tr, 0.0):
        raise InvalidInput("residual covariance is not PSD within tolerance")
    vals = np.maximum(vals, 0.0)
    if vals.sum() <= 0.0:
        raise DegenerateResidual("residual covariance has zero trace")
    return vals


def anisotropy_ratio(sigma_r):
    """Largest residual eigenvalue over the mean eigenvalue; 1 under isotropy."""
    vals = _floored_spectrum(sigma_r)
    return float(vals[0] / (vals.sum() / vals.size))


def cumulative_energy(sigma_r):
    """[(K, E(K), K/d)] with E(K) the top-K share of the residual spectrum."""
    vals = _floored_spectrum(sigma_r)
    d = vals.size
    cum = np.cumsum(vals) / vals.sum()
    return [(k + 1, float(cum[k]), (k + 1) / d) for k in range(d)]


def effective_dimension(sigma_r):
    """Participation ratio tr(S)^2 / tr(S^2) of the residual spectrum."""
    vals = _floored_spectrum(sigma_r)
    return float(vals.sum() ** 2 / np.sum(vals**2))


def coverage_ratio(q_u, sigma_r):
    """Share of residual energy captured by the span of q_u."""
    q_u = np.asarray(q_u, dtype=np.float64)
    gram = q_u.T @ q_u
    if np.abs(gram - np.eye(q_u.shape[1])).max() > 1e-6:
        raise InvalidFrame("candidate basis is not orthonormal")
    sigma_r = np.asarray(sigma_r, dtype=np.float64)
    tr = float(np.trace(sigma_r))
    if tr <= 0:
        raise DegenerateResidual("residual covariance has zero trace")
    captured = float(np.trace(q_u.T @ sigma_r @ q_u))
    return captured / tr


def _default_q_grid(d):
    qs = []
    q = 1
    while q < d:
        qs.append(q)
        q *= 2
    qs.append(d)
    return qs


def build_report(pairs, q_grid=None, frame_basis=None):
    """Assemble the full GapReport for one paired corpus."""
    report = mean_residual_decomposition(pairs)
    sx = covariance(pairs.x.data)
    sy = covariance(pairs.y.data)
    try:
        report.c_lambda = spectral_correlation(sx, sy)
    except DegenerateSpectrum:
        report.c_lambda = None
    d = pairs.d
    qs = q_grid if q_grid is not None else _default_q_grid(d)
    report.overlap_curve = [
        (q, subspace_overlap(sx, sy, q), q / d) for q in qs
    ]
    sigma_r = residual_covariance(pairs)
    try:
        vals = _floored_spectrum(sigma_r)
    except DegenerateResidual:
        report.a_r = 1.0
        report.d_eff_frac = 1.0
        return report
    report.a_r = float(vals[0] / (vals.sum() / d))
    report.energy_curve = cumulative_energy(sigma_r)
    report.d_eff_frac = effective_dimension(sigma_r) / d
    report.residual_spectrum = [float(v) for v in vals / vals.sum()]
    if frame_basis is not None:
        report.eta_u = coverage_ratio(frame_basis, sigma_r)
    return report


def report_to_json(report):
    return json.dumps(asdict(report), indent=2, sort_keys=True) + "\n"


def curves_to_csv(curve, header):
    lines = [",".join(header)]
    for row in curve:
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
