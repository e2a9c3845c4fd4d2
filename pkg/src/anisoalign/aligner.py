"""Bounded prior-guided alignment: init, refinement, reconstruction, calibration.

Stage II never sees pairing. Each source embedding gets a deterministic
global initialization (recentering, per-block radial quantile transfer,
diagonal V-side moment matching), then a small network predicts residual
corrections that are hard-bounded in phase, log-radius and V-coordinates.
Training minimizes the prior-matching score loss plus a radius-weighted
penalty on relative phase deformation; the frozen Stage-I prior supplies
the target-distribution constraint. Reconstruction renormalizes and a final
corpus-level centroid calibration pins the empirical mean to the target.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import blobio
from .errors import (
    DegenerateRow,
    InsufficientSamples,
    InvalidConfig,
    InvalidInput,
    TrainingDiverged,
)
from .frame import block_cartesian, to_polar, wrap
from .mlp import MLP, Adam, mlp_params
from .numerics import Ecdf, ecdf_eval, ecdf_fit, ecdf_inv
from .phase_prior import (
    drift_field,
    drift_jacobian,
    wrapped_gaussian_score,
)
from .store import EmbeddingSet, canonical_order, l2_normalize

__all__ = [
    "Bounds",
    "InitState",
    "RadialTransfer",
    "RefineNet",
    "RefineTrainConfig",
    "AlignArtifacts",
    "kappa",
    "fit_radial_transfer",
    "global_init",
    "refine",
    "prior_matching_loss",
    "phase_deformation_loss",
    "train_refiner",
    "reconstruct",
    "centroid_calibrate",
    "align_corpus",
    "save_refiner",
    "load_refiner",
]

REFINER_MAGIC = b"ANRF"
DV_EPS = 1e-8


@dataclass(frozen=True)
class Bounds:
    """Hard per-sample correction budgets for phase, log-radius and V."""

    alpha_theta: float = 0.3
    alpha_rho: float = 0.2
    alpha_v: float = 0.05

    def __post_init__(self):
        if min(self.alpha_theta, self.alpha_rho, self.alpha_v) <= 0:
            raise InvalidInput("bounds must be positive")
        if self.alpha_theta >= np.pi:
            raise InvalidInput("alpha_theta must be below pi")


def kappa(alpha_theta, alpha_rho):
    """Worst-case per-block displacement factor of the bounded update."""
    s = math.exp(alpha_rho)
    return math.sqrt((s - 1.0) ** 2 + 4.0 * s * math.sin(alpha_theta / 2.0) ** 2)


@dataclass(frozen=True)
class RadialTransfer:
    """Per-block radial quantile transfer source -> target."""

    source: list  # Ecdf per block, fitted on recentered source radii
    target: list  # Ecdf per block, fitted on target radii

    @property
    def m(self):
        return len(self.source)

    def apply(self, rho):
        rho = np.asarray(rho, dtype=np.float64)
        out = np.empty_like(rho)
        for k in range(self.m):
            out[..., k] = ecdf_inv(self.target[k], ecdf_eval(self.source[k], rho[..., k]))
        return out


def fit_radial_transfer(frame, x_target_est, y_source_est):
    """Fit the per-block radial ECDF pair on the estimation split only."""
    target_polar = to_polar(frame, x_target_est.data)
    recentered = y_source_est.data - frame.mu_source + frame.mu_target
    source_polar = to_polar(frame, recentered)
    src = [ecdf_fit(source_polar.rho[:, k]) for k in range(frame.m)]
    tgt = [ecdf_fit(target_polar.rho[:, k]) for k in range(frame.m)]
    return RadialTransfer(source=src, target=tgt)


@dataclass(frozen=True)
class InitState:
    """Deterministic starting point of the bounded refinement (row batches)."""

    theta0: np.ndarray
    rho0: np.ndarray
    v0: np.ndarray

    @property
    def n(self):
        return self.theta0.shape[0]


def global_init(y, frame, radial_transfer):
    """Recentred polar state with quantile-matched radii and rescaled V part.

    The U-side works on the recentered embedding while the V-side statistics
    are taken from the raw embedding (the two sides are intentionally
    asymmetric); the diagonal rescaling can leak a component into U, which
    is projected away so the state stays in the complement.
    """
    if radial_transfer.m != frame.m:
        raise InvalidConfig(
            f"radial transfer has {radial_transfer.m} blocks, frame has {frame.m}"
        )
    data = np.atleast_2d(np.asarray(y, dtype=np.float64))
    recentered = data - frame.mu_source + frame.mu_target
    polar = to_polar(frame, recentered)
    rho0 = radial_transfer.apply(polar.rho)

    y_v = frame.remove_u(data)
    scale = frame.v_sigma_target / (frame.v_sigma_source + DV_EPS)
    v_raw = frame.v_mu_target + scale * (y_v - frame.v_mu_source)
    v0 = v_raw - frame.project_u(v_raw) @ frame.basis.T
    return InitState(theta0=polar.theta, rho0=rho0, v0=v0)


class RefineNet:
    """Instance-conditioned map from the init state to bounded corrections."""

    def __init__(self, m, d, hidden=None, rng=None):
        self.m = m
        self.d = d
        in_dim = 3 * m + d
        self.hidden = hidden if hidden is not None else 2 * in_dim
        self.net = MLP(
            [in_dim, self.hidden, self.hidden, 2 * m + d],
            rng if rng is not None else np.random.default_rng(0),
            zero_last=True,
        )

    def features(self, state):
        return np.concatenate(
            [np.sin(state.theta0), np.cos(state.theta0), np.log(state.rho0), state.v0],
            axis=1,
        )

    def forward(self, state, want_cache=False):
        out = self.net.forward(self.features(state), want_cache=want_cache)
        if want_cache:
            return out[0], out[1]
        return out

    def split(self, out):
        m = self.m
        return out[:, :m], out[:, m : 2 * m], out[:, 2 * m :]


def refine(state, net, bounds, frame):
    """Bounded update of the init state; returns (theta_hat, rho_hat, v_hat)."""
    raw = net.forward(state)
    d_theta, d_rho, d_v = net.split(raw)
    dv_v = d_v - frame.project_u(d_v) @ frame.basis.T
    theta_hat = wrap(state.theta0 + bounds.alpha_theta * np.tanh(d_theta))
    rho_hat = state.rho0 * np.exp(bounds.alpha_rho * np.tanh(d_rho))
    v_hat = state.v0 + bounds.alpha_v * np.tanh(dv_v)
    return theta_hat, rho_hat, v_hat


def prior_matching_loss(theta_hat, rho_hat, prior, rng, want_grads=False):
    """Denoising score-matching loss of the refined phases under the prior.

    Gradients (when requested) flow only to the refined state; the prior's
    weights are never touched.
    """
    theta_hat = np.atleast_2d(theta_hat)
    rho_hat = np.atleast_2d(rho_hat)
    n, m = theta_hat.shape
    schedule = prior.schedule
    coupling, offset = prior.graph.dense()
    stats = prior.stats
    mu = wrap(
        theta_hat
        - schedule.tau
        * drift_field(theta_hat, stats.alpha_w, stats.psi_bar, coupling, offset)
    )
    t = schedule.sample_t(rng, n)
    sigma = schedule.sigma(t)
    eps = rng.standard_normal((n, m))
    theta_tilde = wrap(mu + math.sqrt(2.0) * sigma[:, None] * eps)
    target = wrapped_gaussian_score(theta_tilde, mu, sigma)
    log_rho = np.log(rho_hat)
    out, cache = prior.net.forward(theta_tilde, t, log_rho, want_cache=True)
    resid = out - target
    lam = 2.0 * sigma**2
    loss = float(np.mean(lam * np.sum(resid**2, axis=1)))
    if not want_grads:
        return loss
    gout = 2.0 * lam[:, None] * resid / n
    gfeat = prior.net.net.input_gradient(cache, gout)
    g_tilde, g_logrho = prior.net.input_gradients(gfeat, theta_tilde)
    # theta_tilde = wrap(mu + noise); the score target depends only on the
    # wrapped difference, which is fixed by the noise draw
    jac = drift_jacobian(theta_hat, stats.alpha_w, stats.psi_bar, coupling, offset)
    g_theta = g_tilde - schedule.tau * np.einsum("nk,nkl->nl", g_tilde, jac)
    return loss, g_theta, g_logrho


def phase_deformation_loss(theta_hat, theta0, rho0, graph, eps=1e-12, want_grads=False):
    """Radius-weighted penalty on changes of edge phase differences."""
    if graph.n_edges == 0:
        raise InvalidConfig("phase deformation loss needs a nonempty graph")
    theta_hat = np.atleast_2d(theta_hat)
    theta0 = np.atleast_2d(theta0)
    rho0 = np.atleast_2d(rho0)
    k, l = graph.k, graph.l
    w = rho0[:, k] * rho0[:, l]
    w = w / (w.sum(axis=1, keepdims=True) + eps)
    dev = (theta_hat[:, k] - theta_hat[:, l]) - (theta0[:, k] - theta0[:, l])
    per_edge = w * (1.0 - np.cos(dev))
    loss = float(np.mean(per_edge.sum(axis=1) / graph.n_edges))
    if not want_grads:
        return loss
    n = theta_hat.shape[0]
    g_edge = w * np.sin(dev) / (graph.n_edges * n)
    g_theta = np.zeros_like(theta_hat)
    np.add.at(g_theta, (slice(None), k), g_edge)
    np.add.at(g_theta, (slice(None), l), -g_edge)
    return loss, g_theta


@dataclass
class RefineTrainConfig:
    steps: int = 800
    batch: int = 128
    lr: float = 1e-5
    hidden: int | None = None
    beta: float = 0.5
    val_cap: int = 512
    # the frozen prior's radius input acts as conditioning context; letting
    # gradients flow through it lets the refiner chase the net's off-manifold
    # extrapolation instead of the phase structure
    radial_conditioning_grad: bool = False
    seed: int = 0


def train_refiner(states, frame, prior, bounds, config):
    """Fit the refinement network on unpaired source init states.

    Minimizes the prior-matching loss plus beta times the phase-deformation
    penalty over the network weights only. Deterministic given the seed.
    Returns (RefineNet, history).
    """
    n = states.n
    if n < 2:
        raise InsufficientSamples("refiner training needs at least 2 samples")
    rng = np.random.default_rng(config.seed)
    net = RefineNet(frame.m, frame.d, hidden=config.hidden, rng=rng)
    opt = Adam(mlp_params(net.net), lr=config.lr)

    perm = rng.permutation(n)
    n_val = min(max(1, n // 20), config.val_cap, n - 1)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    val_rng_seed = int(rng.integers(0, 2**32))

    def subset(idx):
        return InitState(
            theta0=states.theta0[idx], rho0=states.rho0[idx], v0=states.v0[idx]
        )

    def val_loss():
        vstate = subset(val_idx)
        th, rh, _ = refine(vstate, net, bounds, frame)
        vrng = np.random.default_rng(val_rng_seed)
        loss = prior_matching_loss(th, rh, prior, vrng)
        if prior.graph.n_edges:
            loss += config.beta * phase_deformation_loss(
                th, vstate.theta0, vstate.rho0, prior.graph, eps=frame.eps_polar
            )
        return loss

    history = {"val_loss_initial": val_loss()}

    for step in range(config.steps):
        idx = train_idx[rng.integers(0, len(train_idx), config.batch)]
        bstate = subset(idx)
        feats = net.features(bstate)
        raw, cache = net.net.forward(feats, want_cache=True)
        d_theta, d_rho, _ = net.split(raw)
        t_theta = np.tanh(d_theta)
        t_rho = np.tanh(d_rho)
        theta_hat = wrap(bstate.theta0 + bounds.alpha_theta * t_theta)
        rho_hat = bstate.rho0 * np.exp(bounds.alpha_rho * t_rho)

        loss, g_theta, g_logrho = prior_matching_loss(
            theta_hat, rho_hat, prior, rng, want_grads=True
        )
        if prior.graph.n_edges:
            phi_loss, g_phi = phase_deformation_loss(
                theta_hat,
                bstate.theta0,
                bstate.rho0,
                prior.graph,
                eps=frame.eps_polar,
                want_grads=True,
            )
            loss += config.beta * phi_loss
            g_theta = g_theta + config.beta * g_phi
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")

        gout = np.zeros_like(raw)
        gout[:, : net.m] = g_theta * bounds.alpha_theta * (1.0 - t_theta**2)
        if config.radial_conditioning_grad:
            gout[:, net.m : 2 * net.m] = g_logrho * bounds.alpha_rho * (1.0 - t_rho**2)
        gw, gb = net.net.backward(cache, gout)
        opt.step(gw + gb)

    history["val_loss_final"] = val_loss()
    return net, history


def reconstruct(theta_hat, rho_hat, v_hat, frame):
    """Unit-norm embedding from the refined polar state."""
    pre = block_cartesian(theta=theta_hat, rho=rho_hat) @ frame.basis.T + v_hat
    pre = np.atleast_2d(pre)
    norms = np.linalg.norm(pre, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise DegenerateRow(int(bad[0]))
    return pre / norms[:, None]


def centroid_calibrate(e_prime, mu_target):
    """Shift the corpus mean to the target centroid, then renormalize.

    The mean is accumulated in a canonical row order so the output is
    exactly permutation-equivariant.
    """
    e_prime = np.atleast_2d(np.asarray(e_prime, dtype=np.float64))
    if e_prime.shape[0] == 0:
        raise InsufficientSamples("empty corpus")
    mean = e_prime[canonical_order(e_prime)].mean(axis=0)
    shifted = e_prime - mean + np.asarray(mu_target, dtype=np.float64)
    norms = np.linalg.norm(shifted, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise DegenerateRow(int(bad[0]))
    return shifted / norms[:, None]


@dataclass(frozen=True)
class AlignArtifacts:
    """Everything align_corpus needs, as produced by the training commands."""

    frame: object
    prior: object
    radial_transfer: RadialTransfer
    refiner: RefineNet
    bounds: Bounds


def align_corpus(y, artifacts):
    """Full per-sample pipeline plus the corpus-level centroid calibration."""
    if y.n == 0:
        raise InsufficientSamples("empty corpus")
    state = global_init(y.data, artifacts.frame, artifacts.radial_transfer)
    theta_hat, rho_hat, v_hat = refine(
        state, artifacts.refiner, artifacts.bounds, artifacts.frame
    )
    e_prime = reconstruct(theta_hat, rho_hat, v_hat, artifacts.frame)
    data = centroid_calibrate(e_prime, artifacts.frame.mu_target)
    return l2_normalize(EmbeddingSet(data=data, modality=y.modality))


def save_refiner(net, bounds, path):
    descriptor = {
        "m": net.m,
        "d": net.d,
        "hidden": net.hidden,
        "bounds": {
            "alpha_theta": bounds.alpha_theta,
            "alpha_rho": bounds.alpha_rho,
            "alpha_v": bounds.alpha_v,
        },
    }
    blobio.pack(REFINER_MAGIC, descriptor, net.net.state(), path)


def load_refiner(path):
    desc, arrays = blobio.unpack(REFINER_MAGIC, path)
    net = RefineNet(desc["m"], desc["d"], hidden=desc["hidden"])
    net.net.load_state(arrays)
    b = desc["bounds"]
    bounds = Bounds(
        alpha_theta=b["alpha_theta"], alpha_rho=b["alpha_rho"], alpha_v=b["alpha_v"]
    )
    return net, bounds
