"""Dense linear-algebra and statistics kernels shared by every other module.

All accumulations run in double precision regardless of how the inputs are
stored. Everything here is a pure function over immutable inputs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamples, InvalidInput

__all__ = [
    "EigenDecomp",
    "Ecdf",
    "covariance",
    "cross_covariance",
    "sym_eig",
    "ecdf_fit",
    "ecdf_eval",
    "ecdf_inv",
    "circular_mean",
    "wrap",
    "haar_subspace",
    "symmetrize",
]


def wrap(angle):
    """Wrap angles to the half-open interval [-pi, pi).

    Idempotent; wrap(pi) == -pi by the half-open convention.
    """
    out = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    # np.mod can round up to 2*pi for tiny negative inputs, landing on +pi exactly
    out = np.where(out >= np.pi, -np.pi, out)
    if np.ndim(angle) == 0:
        return float(out)
    return out


def symmetrize(m):
    """Return the exactly symmetric part (m + m.T) / 2 as float64."""
    m = np.asarray(m, dtype=np.float64)
    return (m + m.T) / 2.0


def covariance(data, center=True):
    """Population covariance (1/n normalization) of row-stacked samples.

    Parameters
    ----------
    data : (n, d) array_like or EmbeddingSet
        One sample per row.
    center : bool
        Subtract the empirical mean before accumulating. When False the
        raw second moment (1/n) sum_i z_i z_i^T is returned.

    Returns
    -------
    (d, d) ndarray, exactly symmetric.
    """
    data = getattr(data, "data", data)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientSamples("covariance needs at least 2 rows")
    n = x.shape[0]
    if center:
        x = x - x.mean(axis=0)
    return symmetrize(x.T @ x / n)


def cross_covariance(x, y=None):
    """Centered cross second moment (1/n) sum_i (x_i - mu_x)(y_i - mu_y)^T.

    Accepts two row-aligned matrices, or a single PairedSet.
    """
    from .errors import PairMismatch

    if y is None:
        x, y = x.x.data, x.y.data
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise PairMismatch(f"shapes {x.shape} and {y.shape} differ")
    if x.shape[0] < 2:
        raise InsufficientSamples("cross_covariance needs at least 2 rows")
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    return xc.T @ yc / n


@dataclass(frozen=True)
class EigenDecomp:
    """Full spectrum of a symmetric matrix, eigenvalues descending.

    ``vectors[:, j]`` is the unit eigenvector paired with ``values[j]``.
    Ties keep the rotation output order (stable sort) for determinism.
    """

    values: np.ndarray
    vectors: np.ndarray


def sym_eig(m, tol=1e-10, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps row by row over the strict upper triangle, rotating away
    off-diagonal entries until the off-diagonal Frobenius norm falls below
    ``tol`` times the Frobenius norm of the input (or ``max_sweeps`` passes).
    Orthogonality of the accumulated eigenvectors is exact by construction.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("matrix has non-finite entries")
    a = symmetrize(a)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return EigenDecomp(values=np.array([a[0, 0]]), vectors=v)

    norm = np.linalg.norm(a, "fro")  # invariant under the rotations
    if norm == 0.0:
        return EigenDecomp(values=np.zeros(n), vectors=v)
    # If every skipped entry is below this, off(A) <= tol * ||A||_F holds.
    skip = tol * norm / math.sqrt(n * (n - 1))

    for _ in range(max_sweeps):
        upper = np.triu(a, k=1)
        if math.sqrt(2.0) * np.linalg.norm(upper, "fro") <= tol * norm:
            break
        rotated = False
        for p in range(n - 1):
            row = a[p]
            for q in range(p + 1, n):
                apq = row[q]
                if abs(apq) <= skip:
                    continue
                rotated = True
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                tau = s / (1.0 + c)

                aip = a[:, p].copy()
                aiq = a[:, q].copy()
                a[:, p] = aip - s * (aiq + tau * aip)
                a[:, q] = aiq + s * (aip - tau * aiq)
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0

                vip = v[:, p].copy()
                viq = v[:, q].copy()
                v[:, p] = vip - s * (viq + tau * vip)
                v[:, q] = viq + s * (vip - tau * viq)
                row = a[p]
        if not rotated:
            break

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenDecomp(values=values[order], vectors=v[:, order])


@dataclass(frozen=True)
class Ecdf:
    """Empirical CDF with midpoint-rank evaluation and interpolated inverse.

    ``points`` are the distinct sorted sample values, ``ranks`` the midpoint
    rank (count below + half the tied count, over n) of each. Evaluation and
    inversion interpolate linearly along this polyline and clamp outside it,
    so F never saturates at 0 or 1 and the inverse stays within the sample
    range.
    """

    sample: np.ndarray
    points: np.ndarray
    ranks: np.ndarray


def ecdf_fit(values):
    """Fit an empirical CDF; values must be nonempty and finite."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise InsufficientSamples("ecdf_fit needs at least one value")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("ecdf_fit requires finite values")
    x = np.sort(x)
    n = x.size
    points, start, counts = np.unique(x, return_index=True, return_counts=True)
    # midpoint rank of a tied block: (#below + #tied/2) / n
    ranks = (start + counts / 2.0) / n
    return Ecdf(sample=x, points=points, ranks=ranks)


def ecdf_eval(f, v):
    """Evaluate F(v) with the midpoint rank convention; output in [0, 1]."""
    v = np.asarray(v, dtype=np.float64)
    out = np.interp(v, f.points, f.ranks)
    if v.ndim == 0:
        return float(out)
    return out


def ecdf_inv(f, u):
    """Quantile F^{-1}(u) by linear interpolation between order statistics."""
    u = np.asarray(u, dtype=np.float64)
    out = np.interp(u, f.ranks, f.points)
    if u.ndim == 0:
        return float(out)
    return out


def circular_mean(angles):
    """Resultant of angles: (|E e^{i theta}|, arg in [-pi, pi))."""
    a = np.asarray(angles, dtype=np.float64).ravel()
    if a.size == 0:
        raise InsufficientSamples("circular_mean needs at least one angle")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("circular_mean requires finite angles")
    z = np.exp(1j * a).mean()
    return float(np.abs(z)), wrap(float(np.angle(z)))


def haar_subspace(d, q, rng):
    """Orthonormal basis of a Haar-random q-dimensional subspace of R^d.

    Built by modified Gram-Schmidt on a standard-Gaussian d x q draw; the
    span of such a draw is uniform on the Grassmann manifold.
    """
    if not 1 <= q <= d:
        raise InvalidInput(f"need 1 <= q <= d, got q={q}, d={d}")
    g = rng.standard_normal((d, q))
    for j in range(q):
        col = g[:, j]
        for i in range(j):
            col -= (g[:, i] @ col) * g[:, i]
        nrm = np.linalg.norm(col)
        if nrm < 1e-12:
            raise InvalidInput("degenerate draw in haar_subspace")
        g[:, j] = col / nrm
    return g
