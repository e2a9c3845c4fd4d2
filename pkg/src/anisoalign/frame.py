"""Fixed dominant-subspace frame, orthogonal mixing and blockwise polar coordinates.

The frame is fit once from the two modalities' marginal statistics (no
pairing) and never re-fit: the joint second-moment matrix is the sum of the
two centered covariances plus a ridge, and its top-r eigenvectors span the
dominant subspace U. Inside U, coordinates are grouped into consecutive
2-d blocks and expressed as radius/phase pairs; a learned rotation of the
U-basis can reorganize the blocks without changing the span.
"""

import json
import struct
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import FormatError, InvalidFrame, InvalidInput
from .numerics import covariance, sym_eig, wrap  # noqa: F401  (wrap re-exported here)
from .store import DTYPE_F64, _decode_array, _encode_array, canonical_order

__all__ = [
    "Frame",
    "MixingRotation",
    "PolarCoords",
    "fit_frame",
    "mix",
    "to_polar",
    "from_polar",
    "wrap",
    "save_frame",
    "load_frame",
]


@dataclass(frozen=True)
class Frame:
    """Fixed U/V decomposition plus the per-coordinate V-side statistics.

    ``basis`` is d x r with orthonormal columns (after any mixing); block k
    lives on columns (2k, 2k+1). ``v_sigma_*`` are per-ambient-coordinate
    standard deviations of the V-projections, used for the diagonal V-side
    rescaling at initialization.
    """

    basis: np.ndarray
    mu_source: np.ndarray
    mu_target: np.ndarray
    v_mu_source: np.ndarray
    v_mu_target: np.ndarray
    v_sigma_source: np.ndarray
    v_sigma_target: np.ndarray
    lambda_reg: float
    eps_polar: float = 1e-12

    def __post_init__(self):
        if self.r % 2 != 0:
            raise InvalidInput("frame rank must be even")
        if self.eps_polar <= 0:
            raise InvalidInput("eps_polar must be positive")
        gram = self.basis.T @ self.basis
        if np.abs(gram - np.eye(self.r)).max() > 1e-8:
            raise InvalidFrame("basis columns are not orthonormal")

    @property
    def d(self):
        return self.basis.shape[0]

    @property
    def r(self):
        return self.basis.shape[1]

    @property
    def m(self):
        return self.r // 2

    def project_u(self, z):
        """U-side coefficients Q^T z (works on a vector or row-stacked batch)."""
        return np.asarray(z, dtype=np.float64) @ self.basis

    def remove_u(self, z):
        """Orthogonal-complement component z - Q Q^T z."""
        z = np.asarray(z, dtype=np.float64)
        return z - self.project_u(z) @ self.basis.T


@dataclass(frozen=True)
class MixingRotation:
    """Rotation R = exp(S) of the U-basis, S skew-symmetric.

    ``skew_params`` fills the strict upper triangle of S row by row, so the
    constraint R^T R = I holds exactly by construction.
    """

    r: int
    skew_params: np.ndarray

    def __post_init__(self):
        want = self.r * (self.r - 1) // 2
        params = np.asarray(self.skew_params, dtype=np.float64).ravel()
        if params.size != want:
            raise InvalidInput(f"need {want} skew parameters for r={self.r}")
        object.__setattr__(self, "skew_params", params)

    def skew_matrix(self):
        s = np.zeros((self.r, self.r))
        iu = np.triu_indices(self.r, k=1)
        s[iu] = self.skew_params
        return s - s.T

    def matrix(self):
        # scaling-and-squaring Pade keeps orthogonality to machine precision
        return scipy.linalg.expm(self.skew_matrix())


def skew_gradient(rotation, grad_r):
    """Pull a gradient w.r.t. R = exp(S) back to the skew parameters.

    Uses the adjoint identity for the Frechet derivative of expm:
    d<G, exp(S)> / dS = L_expm(S^T, G).
    """
    s = rotation.skew_matrix()
    _, g_s = scipy.linalg.expm_frechet(s.T, grad_r)
    iu = np.triu_indices(rotation.r, k=1)
    return (g_s - g_s.T)[iu]


@dataclass(frozen=True)
class PolarCoords:
    """Blockwise radii/phases in U plus the untouched complement component."""

    rho: np.ndarray
    theta: np.ndarray
    v: np.ndarray


def fit_frame(x_target, y_source, r, lambda_reg=1e-6, eps_polar=1e-12):
    """Fit the fixed frame from the two marginals (pairing-free).

    Statistics are accumulated in a canonical row order so the result is
    bitwise independent of how either input was shuffled.
    """
    xt = np.asarray(x_target.data, dtype=np.float64)
    ys = np.asarray(y_source.data, dtype=np.float64)
    if xt.shape[1] != ys.shape[1]:
        raise InvalidInput("modalities must share the ambient dimension")
    d = xt.shape[1]
    if r % 2 != 0 or not 2 <= r <= d:
        raise InvalidInput(f"rank must be even and in [2, {d}], got {r}")
    xt = xt[canonical_order(xt)]
    ys = ys[canonical_order(ys)]

    joint = covariance(xt) + covariance(ys) + lambda_reg * np.eye(d)
    eig = sym_eig(joint)
    basis = np.ascontiguousarray(eig.vectors[:, :r])

    mu_target = xt.mean(axis=0)
    mu_source = ys.mean(axis=0)

    def v_stats(data):
        v = data - (data @ basis) @ basis.T
        return v.mean(axis=0), v.std(axis=0)

    v_mu_target, v_sigma_target = v_stats(xt)
    v_mu_source, v_sigma_source = v_stats(ys)

    return Frame(
        basis=basis,
        mu_source=mu_source,
        mu_target=mu_target,
        v_mu_source=v_mu_source,
        v_mu_target=v_mu_target,
        v_sigma_source=v_sigma_source,
        v_sigma_target=v_sigma_target,
        lambda_reg=float(lambda_reg),
        eps_polar=float(eps_polar),
    )


def mix(frame, rotation):
    """Rotate the U-basis in place of the frame; the span is unchanged."""
    if rotation.r != frame.r:
        raise InvalidInput("rotation rank does not match frame rank")
    mixed = frame.basis @ rotation.matrix()
    return replace(frame, basis=mixed)


def to_polar(frame, z):
    """Blockwise polar coordinates of one embedding or a batch of rows.

    rho_k = sqrt(a_k^2 + b_k^2 + eps) and theta_k = atan2(b_k, a_k) wrapped
    to [-pi, pi); the eps keeps radii bounded away from the origin.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    c = zz @ frame.basis
    a = c[:, 0::2]
    b = c[:, 1::2]
    rho = np.sqrt(a * a + b * b + frame.eps_polar)
    theta = wrap(np.arctan2(b, a))
    v = zz - c @ frame.basis.T
    if single:
        return PolarCoords(rho=rho[0], theta=theta[0], v=v[0])
    return PolarCoords(rho=rho, theta=theta, v=v)


def block_cartesian(rho, theta):
    """Interleave (rho cos theta, rho sin theta) back into U coefficients."""
    rho = np.asarray(rho, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    c = np.empty(rho.shape[:-1] + (2 * rho.shape[-1],))
    c[..., 0::2] = rho * np.cos(theta)
    c[..., 1::2] = rho * np.sin(theta)
    return c


def from_polar(frame, p):
    """Reconstruct Q c(rho, theta) + v; inverse of to_polar up to the eps bias."""
    c = block_cartesian(p.rho, p.theta)
    return c @ frame.basis.T + p.v


_SECTIONS = (
    "basis",
    "mu_source",
    "mu_target",
    "v_mu_source",
    "v_mu_target",
    "v_sigma_source",
    "v_sigma_target",
)


def save_frame(frame, path):
    """Single binary artifact (float64 sections) plus a JSON scalar sidecar."""
    chunks = [struct.pack("<I", len(_SECTIONS))]
    for name in _SECTIONS:
        arr = getattr(frame, name)
        if arr.ndim == 1:
            arr = arr[None, :]
        blob = _encode_array(arr, DTYPE_F64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<Q", len(blob)) + blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    scalars = {
        "d": frame.d,
        "r": frame.r,
        "m": frame.m,
        "lambda_reg": frame.lambda_reg,
        "eps_polar": frame.eps_polar,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(scalars, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_frame(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        scalars = json.load(fh)
    (count,) = struct.unpack_from("<I", buf, 0)
    offset = 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (blob_len,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        arr, end = _decode_array(buf, offset, allow_f64=True)
        if end != offset + blob_len:
            raise FormatError("frame section length mismatch")
        offset = end
        arrays[name] = np.array(arr, dtype=np.float64)
    missing = set(_SECTIONS) - set(arrays)
    if missing:
        raise FormatError(f"frame artifact missing sections {sorted(missing)}")
    for name in _SECTIONS:
        if name != "basis":
            arrays[name] = arrays[name][0]
    return Frame(
        basis=arrays["basis"],
        mu_source=arrays["mu_source"],
        mu_target=arrays["mu_target"],
        v_mu_source=arrays["v_mu_source"],
        v_mu_target=arrays["v_mu_target"],
        v_sigma_source=arrays["v_sigma_source"],
        v_sigma_target=arrays["v_sigma_target"],
        lambda_reg=float(scalars["lambda_reg"]),
        eps_polar=float(scalars["eps_polar"]),
    )
