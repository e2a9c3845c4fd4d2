"""Target-modality phase statistics and the frozen periodic score prior.

Stage I consumes only target-modality polar samples. It estimates blockwise
circular statistics, builds a sparse phase-dependency graph, defines the
periodic drift field those statistics induce, and trains a score network by
denoising score matching against the wrapped-Gaussian noise model. The
trained network is frozen and consumed by the alignment stage as a
target-distribution constraint.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import blobio
from .errors import (
    InsufficientSamples,
    InvalidInput,
    TrainingDiverged,
)
from .frame import MixingRotation, block_cartesian, mix, skew_gradient, wrap
from .mlp import MLP, Adam, mlp_params

__all__ = [
    "CircularStats",
    "DependencyGraph",
    "NoiseSchedule",
    "ScoreNet",
    "PhasePrior",
    "PriorTrainConfig",
    "circular_stats",
    "build_graph",
    "drift",
    "drift_field",
    "drift_jacobian",
    "potential",
    "make_training_pair",
    "wrapped_gaussian_score",
    "wrapped_gaussian_logpdf",
    "train_prior",
    "save_prior",
    "load_prior",
]

PRIOR_MAGIC = b"ANPR"


@dataclass(frozen=True)
class CircularStats:
    """First-order circular statistics of the target phases.

    ``psi_bar`` are the anchor phases, ``anchor_mag`` their resultant
    magnitudes, ``alpha_w`` the radius-energy block weights (summing to ~1),
    and ``m_matrix`` the complex circular correlations of phase differences.
    """

    psi_bar: np.ndarray
    anchor_mag: np.ndarray
    alpha_w: np.ndarray
    m_matrix: np.ndarray

    @property
    def m(self):
        return self.psi_bar.size


def circular_stats(rho, theta, eps=1e-12):
    """Estimate anchors, block weights and circular correlations from samples."""
    rho = np.asarray(rho, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if rho.ndim != 2 or rho.shape != theta.shape:
        raise InvalidInput("rho and theta must be matching (n, m) arrays")
    if rho.shape[0] < 2:
        raise InsufficientSamples("circular_stats needs at least 2 samples")
    n = rho.shape[0]
    z = np.exp(1j * theta)
    resultant = z.mean(axis=0)
    psi_bar = wrap(np.angle(resultant))
    anchor_mag = np.abs(resultant)
    energy = np.mean(rho**2, axis=0)
    alpha_w = energy / (energy.sum() + eps)
    m_matrix = z.T @ z.conj() / n
    np.fill_diagonal(m_matrix, 1.0 + 0.0j)
    return CircularStats(
        psi_bar=psi_bar, anchor_mag=anchor_mag, alpha_w=alpha_w, m_matrix=m_matrix
    )


@dataclass(frozen=True)
class DependencyGraph:
    """Sparse undirected phase-coupling graph, one entry per edge (k < l)."""

    m: int
    k: np.ndarray
    l: np.ndarray
    coupling: np.ndarray
    offset: np.ndarray

    @property
    def n_edges(self):
        return self.k.size

    def dense(self):
        """Symmetric coupling and antisymmetric offset matrices."""
        a = np.zeros((self.m, self.m))
        eta = np.zeros((self.m, self.m))
        a[self.k, self.l] = self.coupling
        a[self.l, self.k] = self.coupling
        eta[self.k, self.l] = self.offset
        eta[self.l, self.k] = -self.offset
        return a, eta


def build_graph(stats, p):
    """Per-node top-p neighbors by coupling magnitude, union of the pairs.

    Ties prefer the smaller block index so the graph is deterministic.
    """
    m = stats.m
    if not 1 <= p <= m - 1:
        raise InvalidInput(f"need 1 <= p <= m-1, got p={p}")
    mag = np.abs(stats.m_matrix).copy()
    np.fill_diagonal(mag, -1.0)
    pairs = set()
    for k in range(m):
        order = np.lexsort((np.arange(m), -mag[k]))
        for l in order[:p]:
            pairs.add((min(k, int(l)), max(k, int(l))))
    ks, ls = (np.array(sorted(pairs)).T if pairs else (np.array([]), np.array([])))
    ks = ks.astype(np.intp)
    ls = ls.astype(np.intp)
    vals = stats.m_matrix[ks, ls]
    return DependencyGraph(
        m=m, k=ks, l=ls, coupling=np.abs(vals), offset=wrap(np.angle(vals))
    )


def drift_field(phi, alpha, psi_bar, coupling, offset):
    """Gradient of the periodic potential at phi (dense coupling form)."""
    phi = np.asarray(phi, dtype=np.float64)
    anchor = alpha * np.sin(phi - psi_bar)
    diff = phi[..., :, None] - phi[..., None, :] - offset
    pair = (coupling * np.sin(diff)).sum(axis=-1)
    return anchor + pair


def drift_jacobian(phi, alpha, psi_bar, coupling, offset):
    """d(drift)/d(phi), shape (..., m, m); needed to differentiate the losses."""
    phi = np.asarray(phi, dtype=np.float64)
    m = phi.shape[-1]
    diff = phi[..., :, None] - phi[..., None, :] - offset
    c = coupling * np.cos(diff)
    jac = -c
    diag = alpha * np.cos(phi - psi_bar) + c.sum(axis=-1)
    idx = np.arange(m)
    jac[..., idx, idx] = diag
    return jac


def potential(phi, alpha, psi_bar, coupling, offset):
    """Periodic potential whose gradient is the drift field."""
    phi = np.asarray(phi, dtype=np.float64)
    anchor = (alpha * (1.0 - np.cos(phi - psi_bar))).sum(axis=-1)
    diff = phi[..., :, None] - phi[..., None, :] - offset
    pair = 0.5 * (coupling * (1.0 - np.cos(diff))).sum(axis=(-2, -1))
    return anchor + pair


def drift(phi, stats, graph):
    """Drift field from estimated statistics and the sparse graph."""
    coupling, offset = graph.dense()
    return drift_field(phi, stats.alpha_w, stats.psi_bar, coupling, offset)


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise scale over t in [0, 1] plus the drift step size."""

    sigma_min: float = 0.05
    sigma_max: float = 1.5
    tau: float = 0.1
    num_levels: int | None = None

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise InvalidInput("need 0 < sigma_min <= sigma_max")
        if self.tau <= 0:
            raise InvalidInput("tau must be positive")

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def sample_t(self, rng, size):
        if self.num_levels is None:
            return rng.uniform(0.0, 1.0, size)
        levels = max(1, self.num_levels)
        picks = rng.integers(0, levels, size)
        return picks / max(levels - 1, 1)


def truncation_for(sigma):
    """Wrapped-sum truncation keeping the dropped tail below 1e-12 of the sum."""
    s = float(np.max(sigma))
    return max(3, math.ceil(6.0 * s / (2.0 * math.pi)) + 1)


def _wrapped_terms(phi_tilde, mu, sigma, truncation):
    delta = wrap(np.asarray(phi_tilde, dtype=np.float64) - np.asarray(mu))
    delta = np.atleast_1d(delta)
    sigma = np.asarray(sigma, dtype=np.float64)
    var = 2.0 * sigma**2
    if var.ndim == 1 and delta.ndim == 2:
        var = var[:, None]  # per-row noise scale
    var = np.broadcast_to(var, delta.shape)
    j = truncation if truncation is not None else truncation_for(sigma)
    shifts = 2.0 * np.pi * np.arange(-j, j + 1)
    x = delta[..., None] + shifts
    logw = -(x**2) / (2.0 * var[..., None])
    return x, logw, var


def wrapped_gaussian_score(phi_tilde, mu, sigma, truncation=None):
    """Score d/d(phi_tilde) of the wrapped Gaussian sum_j N(delta + 2 pi j; 0, 2 sigma^2)."""
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidInput("sigma must be positive")
    x, logw, var = _wrapped_terms(phi_tilde, mu, sigma, truncation)
    logw_max = logw.max(axis=-1, keepdims=True)
    w = np.exp(logw - logw_max)
    num = (w * x).sum(axis=-1)
    den = w.sum(axis=-1)
    out = -num / (den * var)
    if np.ndim(phi_tilde) == 0:
        return float(out[0])
    return out.reshape(np.shape(phi_tilde))


def wrapped_gaussian_logpdf(phi_tilde, mu, sigma, truncation=None):
    """Per-coordinate log-density of the wrapped Gaussian (for oracle checks)."""
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidInput("sigma must be positive")
    x, logw, var = _wrapped_terms(phi_tilde, mu, sigma, truncation)
    logw_max = logw.max(axis=-1, keepdims=True)
    lse = logw_max[..., 0] + np.log(np.exp(logw - logw_max).sum(axis=-1))
    out = lse - 0.5 * np.log(2.0 * np.pi * var)
    if np.ndim(phi_tilde) == 0:
        return float(out[0])
    return out.reshape(np.shape(phi_tilde))


def make_training_pair(phi, stats, graph, schedule, rng):
    """Drifted center and wrapped-noise perturbation for one batch of phases."""
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    batch = phi[None, :] if single else phi
    mu_phi = wrap(batch - schedule.tau * drift(batch, stats, graph))
    t = schedule.sample_t(rng, batch.shape[0])
    sigma = schedule.sigma(t)
    eps = rng.standard_normal(batch.shape)
    phi_tilde = wrap(mu_phi + math.sqrt(2.0) * sigma[:, None] * eps)
    if single:
        return phi_tilde[0], mu_phi[0], float(sigma[0]), float(t[0])
    return phi_tilde, mu_phi, sigma, t


class ScoreNet:
    """Phase-aware score network s(phi_tilde, t, log rho) -> R^m.

    Phases enter through sin/cos so the network respects the wrap; t enters
    through an 8-frequency sinusoidal embedding.
    """

    def __init__(self, m, hidden=None, t_frequencies=8, rng=None):
        self.m = m
        self.t_frequencies = t_frequencies
        self.hidden = hidden if hidden is not None else 4 * m
        in_dim = 3 * m + 2 * t_frequencies
        self.net = MLP(
            [in_dim, self.hidden, self.hidden, m],
            rng if rng is not None else np.random.default_rng(0),
        )

    def features(self, phi_tilde, t, log_rho):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        freqs = np.pi * 2.0 ** np.arange(self.t_frequencies)
        ang = t[:, None] * freqs
        return np.concatenate(
            [np.sin(phi_tilde), np.cos(phi_tilde), np.sin(ang), np.cos(ang), log_rho],
            axis=1,
        )

    def forward(self, phi_tilde, t, log_rho, want_cache=False):
        feats = self.features(phi_tilde, t, log_rho)
        return self.net.forward(feats, want_cache=want_cache)

    def score(self, phi_tilde, t, log_rho):
        single = np.asarray(phi_tilde).ndim == 1
        p = np.atleast_2d(phi_tilde)
        r = np.atleast_2d(log_rho)
        out = self.forward(p, t, r)
        return out[0] if single else out

    def input_gradients(self, feat_grad, phi_tilde):
        """Map a feature-space gradient back to (phi_tilde, log_rho) gradients."""
        m = self.m
        g_phi = feat_grad[:, :m] * np.cos(phi_tilde) - feat_grad[:, m : 2 * m] * np.sin(
            phi_tilde
        )
        g_logrho = feat_grad[:, -m:]
        return g_phi, g_logrho


@dataclass(frozen=True)
class PhasePrior:
    """Everything Stage II needs: statistics, graph, schedule, frozen net."""

    stats: CircularStats
    graph: DependencyGraph
    schedule: NoiseSchedule
    net: ScoreNet

    @property
    def m(self):
        return self.stats.m


@dataclass
class PriorTrainConfig:
    steps: int = 20000
    batch: int = 256
    lr: float = 1e-3
    hidden: int | None = None
    t_frequencies: int = 8
    top_p: int = 3
    stats_eps: float = 1e-12
    val_fraction: float = 0.05
    val_cap: int = 1024
    mixing: str = "fixed-identity"  # or "learned"
    skew_lr_scale: float = 0.1
    seed: int = 0


def _polar_blocks(c, eps):
    a = c[:, 0::2]
    b = c[:, 1::2]
    rho = np.sqrt(a * a + b * b + eps)
    theta = wrap(np.arctan2(b, a))
    return rho, theta


def _batch_loss(net, stats, dense, schedule, rho_b, theta_b, t, eps_noise):
    coupling, offset = dense
    mu_phi = wrap(theta_b - schedule.tau * drift_field(
        theta_b, stats.alpha_w, stats.psi_bar, coupling, offset
    ))
    sigma = schedule.sigma(t)
    phi_tilde = wrap(mu_phi + math.sqrt(2.0) * sigma[:, None] * eps_noise)
    target = wrapped_gaussian_score(phi_tilde, mu_phi, sigma)
    log_rho = np.log(rho_b)
    out, cache = net.forward(phi_tilde, t, log_rho, want_cache=True)
    resid = out - target
    lam = 2.0 * sigma**2
    loss = float(np.mean(lam * np.sum(resid**2, axis=1)))
    return loss, resid, lam, cache, phi_tilde, mu_phi, sigma, log_rho


def train_prior(rho, theta, frame, schedule, config):
    """Train the frozen score prior from target polar samples.

    With ``mixing == "learned"`` the skew parameters of the basis rotation
    are optimized jointly (at a 10x smaller step) and the circular
    statistics and graph are recomputed each epoch under the current
    rotation; the returned frame carries the final rotation folded in.

    Returns (PhasePrior, Frame, history).
    """
    rho = np.asarray(rho, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if rho.size == 0:
        raise InsufficientSamples("empty polar corpus")
    if config.mixing not in ("fixed-identity", "learned"):
        raise InvalidInput(f"unknown mixing mode {config.mixing!r}")
    n, m = rho.shape
    learned = config.mixing == "learned"
    eps_polar = frame.eps_polar if frame is not None else 1e-12

    rng = np.random.default_rng(config.seed)
    net = ScoreNet(m, config.hidden, config.t_frequencies, rng)
    opt = Adam(mlp_params(net.net), lr=config.lr)

    perm = rng.permutation(n)
    n_val = min(max(1, int(n * config.val_fraction)), config.val_cap, n - 1)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    val_t = schedule.sample_t(rng, n_val)
    val_eps = rng.standard_normal((n_val, m))

    skew = np.zeros(m * 2 * (m * 2 - 1) // 2)  # identity warm start
    rotation = MixingRotation(r=2 * m, skew_params=skew)
    rot_mat = np.eye(2 * m)
    c0 = block_cartesian(rho, theta) if learned else None
    skew_opt = Adam([skew], lr=config.lr * config.skew_lr_scale) if learned else None

    def current_polars(idx):
        if learned:
            c = c0[idx] @ rot_mat
            return (*_polar_blocks(c, eps_polar), c)
        return rho[idx], theta[idx], None

    def refresh_stats():
        r_all, t_all, _ = current_polars(slice(None))
        stats = circular_stats(r_all, t_all, eps=config.stats_eps)
        if m > 1:
            graph = build_graph(stats, min(config.top_p, m - 1))
        else:
            graph = DependencyGraph(
                m=1,
                k=np.array([], dtype=np.intp),
                l=np.array([], dtype=np.intp),
                coupling=np.array([]),
                offset=np.array([]),
            )
        return stats, graph, graph.dense()

    stats, graph, dense = refresh_stats()

    def val_loss():
        r_v, t_v, _ = current_polars(val_idx)
        loss, *_ = _batch_loss(net, stats, dense, schedule, r_v, t_v, val_t, val_eps)
        return loss

    history = {"val_loss_initial": val_loss()}
    steps_per_epoch = max(1, len(train_idx) // config.batch)
    last_loss = None

    for step in range(config.steps):
        if learned and step > 0 and step % steps_per_epoch == 0:
            stats, graph, dense = refresh_stats()
        idx = train_idx[rng.integers(0, len(train_idx), config.batch)]
        rho_b, theta_b, c_b = current_polars(idx)
        t = schedule.sample_t(rng, config.batch)
        eps_noise = rng.standard_normal((config.batch, m))
        loss, resid, lam, cache, phi_tilde, _, sigma, _ = _batch_loss(
            net, stats, dense, schedule, rho_b, theta_b, t, eps_noise
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        last_loss = loss
        gout = 2.0 * lam[:, None] * resid / config.batch
        if learned:
            gw, gb, gfeat = net.net.backward(cache, gout, want_input_grad=True)
        else:
            gw, gb = net.net.backward(cache, gout)
        opt.step(gw + gb)

        if learned:
            g_phit, g_logrho = net.input_gradients(gfeat, phi_tilde)
            # target is fixed given the noise draw, so only the net input moves
            coupling, offset = dense
            jac = drift_jacobian(
                theta_b, stats.alpha_w, stats.psi_bar, coupling, offset
            )
            g_theta = g_phit - schedule.tau * np.einsum("nk,nkl->nl", g_phit, jac)
            a = c_b[:, 0::2]
            b = c_b[:, 1::2]
            r2 = a * a + b * b + eps_polar
            g_a = g_theta * (-b / r2) + g_logrho * (a / r2)
            g_b = g_theta * (a / r2) + g_logrho * (b / r2)
            g_c = np.empty_like(c_b)
            g_c[:, 0::2] = g_a
            g_c[:, 1::2] = g_b
            g_rot = c0[idx].T @ g_c
            g_skew = skew_gradient(rotation, g_rot)
            skew_opt.step([g_skew])
            rotation = MixingRotation(r=2 * m, skew_params=skew)
            rot_mat = rotation.matrix()

    if learned:
        stats, graph, dense = refresh_stats()
    history["val_loss_final"] = val_loss()
    history["train_loss_final"] = last_loss

    out_frame = mix(frame, rotation) if (learned and frame is not None) else frame
    prior = PhasePrior(stats=stats, graph=graph, schedule=schedule, net=net)
    return prior, out_frame, history


def save_prior(prior, path):
    stats = prior.stats
    graph = prior.graph
    descriptor = {
        "m": prior.m,
        "hidden": prior.net.hidden,
        "t_frequencies": prior.net.t_frequencies,
        "schedule": {
            "sigma_min": prior.schedule.sigma_min,
            "sigma_max": prior.schedule.sigma_max,
            "tau": prior.schedule.tau,
            "num_levels": prior.schedule.num_levels,
        },
        "stats": {
            "psi_bar": stats.psi_bar.tolist(),
            "anchor_mag": stats.anchor_mag.tolist(),
            "alpha_w": stats.alpha_w.tolist(),
            "m_re": stats.m_matrix.real.tolist(),
            "m_im": stats.m_matrix.imag.tolist(),
        },
        "graph": {
            "k": graph.k.tolist(),
            "l": graph.l.tolist(),
            "coupling": graph.coupling.tolist(),
            "offset": graph.offset.tolist(),
        },
    }
    blobio.pack(PRIOR_MAGIC, descriptor, prior.net.net.state(), path)


def load_prior(path):
    desc, arrays = blobio.unpack(PRIOR_MAGIC, path)
    m = desc["m"]
    net = ScoreNet(m, desc["hidden"], desc["t_frequencies"])
    net.net.load_state(arrays)
    st = desc["stats"]
    stats = CircularStats(
        psi_bar=np.array(st["psi_bar"]),
        anchor_mag=np.array(st["anchor_mag"]),
        alpha_w=np.array(st["alpha_w"]),
        m_matrix=np.array(st["m_re"]) + 1j * np.array(st["m_im"]),
    )
    gr = desc["graph"]
    graph = DependencyGraph(
        m=m,
        k=np.array(gr["k"], dtype=np.intp),
        l=np.array(gr["l"], dtype=np.intp),
        coupling=np.array(gr["coupling"]),
        offset=np.array(gr["offset"]),
    )
    sch = desc["schedule"]
    schedule = NoiseSchedule(
        sigma_min=sch["sigma_min"],
        sigma_max=sch["sigma_max"],
        tau=sch["tau"],
        num_levels=sch["num_levels"],
    )
    return PhasePrior(stats=stats, graph=graph, schedule=schedule, net=net)
