"""Representation-level metrics comparing source, substitute and target sets.

All neighbor computations are exact (exhaustive) under cosine distance and
chunked so pools of tens of thousands of rows stay within memory. Mixing
scores are normalized per side by a seeded label-permutation baseline.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diagnostics import cumulative_energy, effective_dimension  # noqa: F401
from .errors import (
    DegenerateResidual,
    DegenerateSpectrum,
    InvalidInput,
    PairMismatch,
)
from .numerics import sym_eig

__all__ = [
    "MetricReport",
    "instance_consistency",
    "relative_geometry",
    "neighborhood_consistency",
    "mixing_scores",
    "method_residual",
    "delta_mu",
    "build_metric_report",
    "metric_report_to_json",
    "metric_report_csv_row",
    "CSV_HEADER",
]

DEFAULT_K = 20
DEFAULT_PSI_PAIRS = 100_000
DEFAULT_PERMUTATIONS = 20
ALL_PAIRS_LIMIT = 450


def _require_unit(arr, name):
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidInput(f"{name} must be unit-normalized")


def instance_consistency(y, z):
    """Mean cosine between each source row and its substitute."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y.shape != z.shape:
        raise PairMismatch(f"shapes {y.shape} and {z.shape} differ")
    _require_unit(y, "source")
    _require_unit(z, "substitute")
    return float(np.mean(np.sum(y * z, axis=1)))


def _sample_pairs(n, count, rng):
    i = rng.integers(0, n, count)
    j = rng.integers(0, n - 1, count)
    j = j + (j >= i)
    return i, j


def relative_geometry(y, z, pair_count=DEFAULT_PSI_PAIRS, seed=0):
    """Pearson correlation of pairwise inner products before/after transform.

    Uses all pairs when the corpus is small, otherwise a seeded sample.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = y.shape[0]
    if n < 2 or pair_count < 2:
        raise InvalidInput("need at least 2 samples and 2 pairs")
    if n <= ALL_PAIRS_LIMIT:
        i, j = np.triu_indices(n, k=1)
    else:
        i, j = _sample_pairs(n, pair_count, np.random.default_rng(seed))
    a = np.sum(y[i] * y[j], axis=1)
    b = np.sum(z[i] * z[j], axis=1)
    if np.std(a) == 0.0 or np.std(b) == 0.0:
        raise DegenerateSpectrum("pairwise similarities have zero variance")
    return float(np.corrcoef(a, b)[0, 1])


def _knn_indices(queries, pool, k, exclude_shift=None, chunk=512):
    """Exact top-k cosine neighbors of each query row within the pool.

    ``exclude_shift`` marks queries as present in the pool at index
    (row + shift); that entry is masked so a point is never its own
    neighbor.
    """
    nq = queries.shape[0]
    out = np.empty((nq, k), dtype=np.intp)
    for start in range(0, nq, chunk):
        stop = min(start + chunk, nq)
        sims = queries[start:stop] @ pool.T
        if exclude_shift is not None:
            rows = np.arange(start, stop)
            sims[rows - start, rows + exclude_shift] = -np.inf
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        out[start:stop] = part
    return out


def neighborhood_consistency(y, z, k=DEFAULT_K):
    """Mean overlap of k-nearest-neighbor sets before/after transform."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y.shape != z.shape:
        raise PairMismatch(f"shapes {y.shape} and {z.shape} differ")
    n = y.shape[0]
    if n <= k:
        raise InvalidInput(f"need more than k={k} samples, got {n}")
    _require_unit(y, "source")
    _require_unit(z, "substitute")
    nbr_y = _knn_indices(y, y, k, exclude_shift=0)
    nbr_z = _knn_indices(z, z, k, exclude_shift=0)
    same = nbr_y[:, :, None] == nbr_z[:, None, :]
    return float(same.any(axis=2).sum(axis=1).mean() / k)


def _binary_entropy(p):
    p = np.clip(p, 0.0, 1.0)
    out = np.zeros_like(p)
    inside = (p > 0.0) & (p < 1.0)
    q = p[inside]
    out[inside] = -q * np.log2(q) - (1.0 - q) * np.log2(1.0 - q)
    return out


def mixing_scores(z, x, k=DEFAULT_K, permutations=DEFAULT_PERMUTATIONS, seed=0):
    """Directional local-mixing scores (substitute side, target side).

    Pools both sets, measures the binary entropy of each point's local
    target-origin proportion among its k neighbors, and normalizes each
    side's mean entropy by its mean under seeded random reassignments of
    the origin labels.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.shape[1] != x.shape[1]:
        raise InvalidInput("dimension mismatch between pools")
    if z.shape[0] == 0 or x.shape[0] == 0:
        raise InvalidInput("both sets must be nonempty")
    total = z.shape[0] + x.shape[0]
    if not 1 <= k < total - 1:
        raise InvalidInput(f"need 1 <= k < pool size - 1, got k={k}")
    _require_unit(z, "substitute")
    _require_unit(x, "target")
    pool = np.vstack([x, z])
    labels = np.zeros(total, dtype=bool)
    labels[: x.shape[0]] = True  # target-origin indicator
    nbrs = _knn_indices(pool, pool, k, exclude_shift=0)

    def side_means(lab):
        p = lab[nbrs].mean(axis=1)
        h = _binary_entropy(p)
        return float(h[lab].mean()), float(h[~lab].mean())

    h_x, h_z = side_means(labels)
    rng = np.random.default_rng(seed)
    base_x = np.empty(permutations)
    base_z = np.empty(permutations)
    for i in range(permutations):
        perm_labels = labels[rng.permutation(total)]
        base_x[i], base_z[i] = side_means(perm_labels)
    m_x = h_x / base_x.mean() if base_x.mean() > 0 else 0.0
    m_z = h_z / base_z.mean() if base_z.mean() > 0 else 0.0
    return float(m_z), float(m_x)


def method_residual(x, z):
    """Anisotropy and normalized spectrum of the per-pair method residual.

    A transform that reproduces the target exactly leaves nothing to
    measure; that case is flagged and reported as isotropic by convention.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise PairMismatch(f"shapes {x.shape} and {z.shape} differ")
    r = x - z
    n, d = r.shape
    sigma = (r.T @ r + (r.T @ r).T) / (2 * n)
    vals = np.maximum(sym_eig(sigma).values, 0.0)
    tr = vals.sum()
    if tr <= 1e-24:
        return 1.0, np.zeros(d), True
    return float(vals[0] / (tr / d)), vals / tr, False


def delta_mu(z, x):
    """Centroid discrepancy between substitute and target sets."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(z.mean(axis=0) - x.mean(axis=0)))


@dataclass
class MetricReport:
    method: str = ""
    phi: float = 0.0
    psi: float = 0.0
    omega_k: float = 0.0
    m_z: float = 0.0
    m_x: float = 0.0
    a_r_t: float = 1.0
    delta_mu: float = 0.0
    degenerate_residual: bool = False
    residual_spectrum_t: list = field(default_factory=list)
    k: int = DEFAULT_K
    pair_sample_size: int = DEFAULT_PSI_PAIRS
    permutations: int = DEFAULT_PERMUTATIONS
    seed: int = 0


def build_metric_report(
    y,
    z,
    x,
    method="",
    k=DEFAULT_K,
    pair_count=DEFAULT_PSI_PAIRS,
    permutations=DEFAULT_PERMUTATIONS,
    seed=0,
):
    """All metrics for one (source, substitute, target) triple of row arrays."""
    a_r_t, spectrum, degenerate = method_residual(x, z)
    m_z, m_x = mixing_scores(z, x, k=k, permutations=permutations, seed=seed)
    return MetricReport(
        method=method,
        phi=instance_consistency(y, z),
        psi=relative_geometry(y, z, pair_count=pair_count, seed=seed),
        omega_k=neighborhood_consistency(y, z, k=k),
        m_z=m_z,
        m_x=m_x,
        a_r_t=a_r_t,
        delta_mu=delta_mu(z, x),
        degenerate_residual=degenerate,
        residual_spectrum_t=[float(v) for v in spectrum],
        k=k,
        pair_sample_size=pair_count,
        permutations=permutations,
        seed=seed,
    )


CSV_HEADER = ["method", "phi", "psi", "omega_k", "m_z", "m_x", "a_r_t", "delta_mu"]


def metric_report_to_json(report):
    return json.dumps(asdict(report), indent=2, sort_keys=True) + "\n"


def metric_report_csv_row(report):
    vals = [report.method] + [
        repr(float(getattr(report, name))) for name in CSV_HEADER[1:]
    ]
    return ",".join(vals)
