"""Paired two-modality corpora with planted, fully known gap structure.

The generator plants a shared latent expansion (common to both modalities),
a centroid offset, a small set of anisotropic residual directions with
chosen energies, and isotropic noise. Every diagnosed quantity has a
closed-form raw target; unit-sphere projection perturbs those slightly, so
a high-n Monte-Carlo pass records sphere-corrected targets alongside.
Phases inside chosen latent blocks can optionally follow a planted
anchor/coupling potential, sampled by long-run Langevin dynamics.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .frame import wrap
from .numerics import haar_subspace
from .phase_prior import drift_field
from .store import EmbeddingSet, PairedSet, l2_normalize

__all__ = [
    "PlantedPhaseSpec",
    "PlantSpec",
    "GroundTruth",
    "generate",
    "planted_phase_corpus",
    "langevin_phases",
    "geometric_spectrum",
]


@dataclass(frozen=True)
class PlantedPhaseSpec:
    """Anchor/coupling potential for planted phase blocks.

    ``edges`` are (k, l, coupling, offset) tuples with k < l; ``block_scales``
    set the mean squared radius per block; radii are lognormal around that
    scale with log-spread ``rho_sigma``.
    """

    anchors: tuple
    anchor_strength: tuple
    edges: tuple = ()
    block_scales: tuple | None = None
    rho_sigma: float = 0.25

    @property
    def m(self):
        return len(self.anchors)

    def dense(self):
        m = self.m
        coupling = np.zeros((m, m))
        offset = np.zeros((m, m))
        for k, l, a, eta in self.edges:
            if k == l or not (0 <= k < m and 0 <= l < m):
                raise InvalidInput(f"bad edge ({k}, {l})")
            coupling[k, l] = coupling[l, k] = a
            offset[k, l] = eta
            offset[l, k] = -eta
        return coupling, offset


def langevin_phases(phase_spec, n, rng, step=0.01, burn_in=5000, thin=10, chains=None):
    """Sample phases from exp(-potential) by unadjusted Langevin dynamics.

    Consecutive thinned draws within a chain stay correlated at this step
    size, so many parallel chains carry the effective sample size.
    """
    m = phase_spec.m
    anchors = np.asarray(phase_spec.anchors, dtype=np.float64)
    strength = np.asarray(phase_spec.anchor_strength, dtype=np.float64)
    coupling, offset = phase_spec.dense()
    if chains is None:
        chains = max(64, n // 16)
    chains = min(chains, n)
    phi = rng.uniform(-np.pi, np.pi, (chains, m))
    scale = math.sqrt(2.0 * step)

    def advance(state, count):
        for _ in range(count):
            g = drift_field(state, strength, anchors, coupling, offset)
            state = wrap(state - step * g + scale * rng.standard_normal(state.shape))
        return state

    phi = advance(phi, burn_in)
    rounds = math.ceil(n / chains)
    out = np.empty((rounds * chains, m))
    for i in range(rounds):
        phi = advance(phi, thin)
        out[i * chains : (i + 1) * chains] = phi
    return out[:n]


def planted_phase_corpus(phase_spec, n, seed, step=0.01, burn_in=5000, thin=10):
    """Polar samples (rho, theta) drawn from the planted phase potential."""
    rng = np.random.default_rng(seed)
    theta = langevin_phases(phase_spec, n, rng, step=step, burn_in=burn_in, thin=thin)
    m = phase_spec.m
    scales = (
        np.ones(m)
        if phase_spec.block_scales is None
        else np.asarray(phase_spec.block_scales, dtype=np.float64)
    )
    sig = phase_spec.rho_sigma
    # lognormal with E[rho^2] = scale
    mu_log = 0.5 * np.log(scales) - sig**2
    rho = np.exp(mu_log + sig * rng.standard_normal((n, m)))
    return rho, theta


@dataclass(frozen=True)
class PlantSpec:
    """Everything the generator needs; all structure is recoverable."""

    n: int
    d: int
    shared_dim: int
    shared_spectrum: tuple
    residual_energies: tuple = ()
    centroid_offset: float = 0.0
    iso_noise: float = 0.0
    x_noise: float = 0.0
    mean_scale: float = 0.0
    latent_scale_sigma: float = 0.0
    v_bands: tuple = ()  # (y_total, x_total, imbalance, dims) per band
    phase_spec: PlantedPhaseSpec | None = None
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.shared_spectrum) != self.shared_dim:
            raise InvalidInput("spectrum length must equal shared_dim")
        k = len(self.residual_energies)
        if self.shared_dim + k + 1 > self.d:
            raise InvalidInput("planted structure does not fit the dimension")
        e = np.asarray(self.residual_energies, dtype=np.float64)
        if e.size and (np.any(e <= 0) or np.any(np.diff(e) > 0)):
            raise InvalidInput("residual energies must be positive descending")
        if self.centroid_offset < 0:
            raise InvalidInput("centroid offset must be nonnegative")
        if self.phase_spec is not None and 2 * self.phase_spec.m > self.shared_dim:
            raise InvalidInput("phase blocks exceed the shared latent")


def geometric_spectrum(dim, total, decay=0.93):
    """Descending geometric eigenvalue profile with the given total energy."""
    raw = decay ** np.arange(dim)
    return tuple(total * raw / raw.sum())


@dataclass(frozen=True)
class GroundTruth:
    """Closed-form raw targets plus sphere-corrected Monte-Carlo targets."""

    mu_x_raw: np.ndarray
    mu_y_raw: np.ndarray
    g_mu_raw: float
    residual_spectrum_raw: np.ndarray
    trace_r_raw: float
    a_r_raw: float
    d_eff_raw: float
    eta_planted: float
    shared_basis: np.ndarray
    residual_dirs: np.ndarray
    offset_dir: np.ndarray
    sphere: dict = field(default_factory=dict)

    def scalars(self):
        out = {
            "g_mu_raw": self.g_mu_raw,
            "trace_r_raw": self.trace_r_raw,
            "a_r_raw": self.a_r_raw,
            "d_eff_raw": self.d_eff_raw,
            "eta_planted": self.eta_planted,
        }
        out.update({f"sphere_{k}": v for k, v in self.sphere.items()})
        return out


def _noise_model(spec, dirs, rng_dirs):
    """Per-modality noise: isotropic floors plus structured V-noise bands.

    Structured bands live in the orthogonal complement of the planted
    directions, on a shared basis organized in 2-direction pairs whose
    variance allocation is swapped between the modalities (the source
    allocates (a, b) where the target allocates (b, a), scaled to each
    side's band total). Per-direction moment matching across such a swap
    pays a geometric-mean factor; blockwise radial matching does not.
    A band with imbalance 1 is a plain scale gap between the modalities.
    """
    d = spec.d
    planted = dirs.shape[1]
    model = {
        "x": (np.full(d, spec.x_noise**2), None) if spec.x_noise > 0 else None,
        "y": (np.full(d, spec.iso_noise**2), None) if spec.iso_noise > 0 else None,
    }
    if not spec.v_bands:
        return model
    need = sum(int(dims) for (_, _, _, dims) in spec.v_bands)
    if planted + need > d:
        raise InvalidInput("structured V bands do not fit the complement")
    full = haar_subspace(d, d, rng_dirs)
    w_y = []
    w_x = []
    for y_total, x_total, imbalance, dims in spec.v_bands:
        pairs = int(dims) // 2
        if pairs == 0 or int(dims) % 2:
            raise InvalidInput("each V band needs an even, positive dim count")
        b = y_total / (pairs * (1.0 + imbalance))
        a = imbalance * b
        band_y = np.tile([a, b], pairs)
        band_x = np.tile([b, a], pairs) * (x_total / y_total)
        w_y.append(band_y)
        w_x.append(band_x)
    comp = full[:, planted : planted + need]
    model["vy"] = (np.concatenate(w_y), comp)
    model["vx"] = (np.concatenate(w_x), comp)
    return model


def _colored_noise(entry, n, d, rng):
    weights, basis = entry
    if basis is None:
        return np.sqrt(weights) * rng.standard_normal((n, d))
    g = rng.standard_normal((n, weights.size))
    return (g * np.sqrt(weights)) @ basis.T


def _raw_sample(spec, n, rng_latent, rng_phase, rng_res, rng_nx, rng_ny, dirs, noise):
    shared = spec.shared_dim
    k = len(spec.residual_energies)
    basis = dirs[:, :shared]
    res_dirs = dirs[:, shared : shared + k]
    off_dir = dirs[:, shared + k]

    lam = np.asarray(spec.shared_spectrum, dtype=np.float64)
    means = spec.mean_scale * np.sqrt(lam)
    fluct = np.sqrt(lam) * rng_latent.standard_normal((n, shared))
    if spec.latent_scale_sigma > 0:
        # per-sample scale shared by both modalities: fattens the norm
        # distribution without touching the paired residual
        s = spec.latent_scale_sigma
        fluct *= np.exp(s * rng_latent.standard_normal((n, 1)) - s * s)
    latent = means + fluct
    if spec.phase_spec is not None:
        rho, theta = planted_phase_corpus(
            spec.phase_spec, n, rng_phase.integers(0, 2**32)
        )
        mp = spec.phase_spec.m
        latent[:, : 2 * mp : 2] = rho * np.cos(theta)
        latent[:, 1 : 2 * mp : 2] = rho * np.sin(theta)

    x = latent @ basis.T
    if noise["x"] is not None:
        x = x + _colored_noise(noise["x"], n, spec.d, rng_nx)
    if noise.get("vx") is not None:
        x = x + _colored_noise(noise["vx"], n, spec.d, rng_nx)
    y = latent @ basis.T + spec.centroid_offset * off_dir
    if k:
        e = np.sqrt(np.asarray(spec.residual_energies, dtype=np.float64))
        y = y + (e * rng_res.standard_normal((n, k))) @ res_dirs.T
    if noise["y"] is not None:
        y = y + _colored_noise(noise["y"], n, spec.d, rng_ny)
    if noise.get("vy") is not None:
        y = y + _colored_noise(noise["vy"], n, spec.d, rng_ny)
    return x, y, basis, res_dirs, off_dir


def _as_pair(spec, x, y):
    xs = EmbeddingSet(data=x, modality="target")
    ys = EmbeddingSet(data=y, modality="source")
    if spec.normalize:
        xs = l2_normalize(xs)
        ys = l2_normalize(ys)
    return PairedSet(x=xs, y=ys)


def generate(spec, mc_samples=0):
    """Planted paired corpus plus its GroundTruth.

    ``mc_samples > 0`` adds sphere-corrected targets from an independent
    high-n draw of the same distribution (post-normalization statistics
    have no closed form).
    """
    streams = np.random.SeedSequence(spec.seed).spawn(7)
    rngs = [np.random.default_rng(s) for s in streams]
    dirs = haar_subspace(
        spec.d, spec.shared_dim + len(spec.residual_energies) + 1, rngs[0]
    )
    noise = _noise_model(spec, dirs, rngs[0])
    x, y, basis, res_dirs, off_dir = _raw_sample(
        spec, spec.n, rngs[1], rngs[2], rngs[3], rngs[4], rngs[5], dirs, noise
    )
    pair = _as_pair(spec, x, y)

    d = spec.d
    k = len(spec.residual_energies)
    energies = np.asarray(spec.residual_energies, dtype=np.float64)
    # residual directions, paired V-noise directions and the isotropic floors
    # are mutually orthogonal, so the population residual spectrum is direct
    noise2 = spec.x_noise**2 + spec.iso_noise**2
    spectrum = np.full(d, noise2)
    spectrum[:k] += energies
    if noise.get("vy") is not None:
        w_sum = noise["vy"][0] + noise["vx"][0]
        spectrum[k : k + w_sum.size] += w_sum
    spectrum = np.sort(spectrum)[::-1]
    trace_r = float(spectrum.sum())
    lam = np.asarray(spec.shared_spectrum, dtype=np.float64)
    means = spec.mean_scale * np.sqrt(lam)
    mu_shared = basis @ means
    mean_noise2 = trace_r / d - (energies.sum() / d if k else 0.0)
    covered = float(energies.sum() + (spec.shared_dim + k) * mean_noise2)
    truth = GroundTruth(
        mu_x_raw=mu_shared,
        mu_y_raw=mu_shared + spec.centroid_offset * off_dir,
        g_mu_raw=float(spec.centroid_offset),
        residual_spectrum_raw=spectrum,
        trace_r_raw=trace_r,
        a_r_raw=float(spectrum[0] / (trace_r / d)) if trace_r > 0 else 1.0,
        d_eff_raw=float(trace_r**2 / np.sum(spectrum**2)) if trace_r > 0 else float(d),
        eta_planted=covered / trace_r if trace_r > 0 else 0.0,
        shared_basis=basis,
        residual_dirs=res_dirs,
        offset_dir=off_dir,
    )

    if mc_samples > 0 and spec.normalize:
        from .diagnostics import (
            anisotropy_ratio,
            effective_dimension,
            mean_residual_decomposition,
            residual_covariance,
        )

        mc_rngs = [np.random.default_rng(s) for s in streams[6].spawn(5)]
        mx, my, *_ = _raw_sample(spec, mc_samples, *mc_rngs, dirs, noise)
        mc_pair = _as_pair(spec, mx, my)
        sig_r = residual_covariance(mc_pair)
        rep = mean_residual_decomposition(mc_pair)
        truth.sphere.update(
            {
                "a_r": anisotropy_ratio(sig_r),
                "d_eff_frac": effective_dimension(sig_r) / d,
                "g_mu": rep.g_mu,
                "trace_r": float(np.trace(sig_r)),
                "residual_ratio_dist": rep.residual_ratio_dist,
                "mc_samples": mc_samples,
            }
        )
    return pair, truth
