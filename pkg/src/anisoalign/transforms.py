"""Diagnostic transforms and closed-form alignment baselines.

Each transform maps a source embedding set to substitute representations of
the target modality. Simple statistical corrections (centroid, moment),
negative controls (random target replacement), the paired oracle
interpolation along dominant residual directions, and the two closed-form
baselines (noise-after-centroid, anchor/trace/centroid).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateCovariance,
    InsufficientSamples,
    InvalidInput,
    RequiresPairs,
)
from .numerics import sym_eig
from .store import EmbeddingSet, PairedSet, l2_normalize

__all__ = [
    "TransformSpec",
    "t_id",
    "t_mu",
    "t_sigma",
    "t_perm",
    "t_alpha",
    "c3_align",
    "realign",
    "KINDS",
]

KINDS = ("identity", "centroid", "moment", "perm", "alpha", "c3", "realign")


@dataclass(frozen=True)
class TransformSpec:
    """Which transform to run and the parameters its kind requires."""

    kind: str
    alpha: float | None = None
    rank: int | None = None
    noise_sigma: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown transform kind {self.kind!r}")
        if self.kind == "alpha":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise InvalidInput("alpha transform needs alpha in [0, 1]")
            if self.rank is None or self.rank < 1:
                raise InvalidInput("alpha transform needs a positive rank")
        if self.kind == "c3" and (self.noise_sigma is None or self.noise_sigma < 0):
            raise InvalidInput("c3 needs noise_sigma >= 0")
        if self.kind in ("perm", "c3") and self.seed is None:
            raise InvalidInput(f"{self.kind} needs a seed")


def t_id(y):
    """Identity mapping: the unaligned state."""
    return y


def t_mu(y, mu_source, mu_target):
    """Centroid correction z_i = y_i - mu_source + mu_target."""
    mu_source = np.asarray(mu_source, dtype=np.float64)
    mu_target = np.asarray(mu_target, dtype=np.float64)
    if mu_source.shape != (y.d,) or mu_target.shape != (y.d,):
        raise InvalidInput("means must match the embedding dimension")
    data = y.data - mu_source + mu_target
    return EmbeddingSet(data=data, modality=y.modality, normalized=False)


def _sym_power(sigma, power, floor):
    eig = sym_eig(sigma)
    vals = np.maximum(eig.values, floor)
    return (eig.vectors * vals**power) @ eig.vectors.T


def t_sigma(y, mu_source, sigma_source, mu_target, sigma_target):
    """Moment correction: match mean and covariance with one linear map.

    z_i = mu_target + S_t^{1/2} S_s^{-1/2} (y_i - mu_source) with symmetric
    square roots; eigenvalues are floored at 1e-10 * trace / d.
    """
    sigma_source = np.asarray(sigma_source, dtype=np.float64)
    sigma_target = np.asarray(sigma_target, dtype=np.float64)
    d = y.d
    tr_s = float(np.trace(sigma_source))
    if not np.isfinite(tr_s) or tr_s <= 0:
        raise DegenerateCovariance("source covariance has nonpositive trace")
    floor_s = 1e-10 * tr_s / d
    floor_t = 1e-10 * max(np.trace(sigma_target), 0.0) / d
    whiten = _sym_power(sigma_source, -0.5, floor_s)
    color = _sym_power(sigma_target, 0.5, floor_t)
    data = (y.data - np.asarray(mu_source)) @ (color @ whiten).T + np.asarray(
        mu_target
    )
    return EmbeddingSet(data=data, modality=y.modality, normalized=False)


def t_perm(y, x_target, seed):
    """Random target replacement: z_i = x_{pi(i)} for a seeded permutation.

    Matches the target distribution exactly while destroying instance-level
    correspondence; the negative control.
    """
    if x_target.n < y.n:
        raise InsufficientSamples("target pool smaller than the source set")
    perm = np.random.default_rng(seed).permutation(x_target.n)[: y.n]
    return EmbeddingSet(
        data=x_target.data[perm],
        modality=y.modality,
        normalized=x_target.normalized,
    )


def t_alpha(pairs, alpha, rank):
    """Oracle interpolation along the dominant residual directions.

    After centroid correction, moves each source point a fraction alpha of
    its paired residual projected on the top-``rank`` eigenvectors of the
    residual covariance. Diagnostic-only: requires paired data.
    """
    if not isinstance(pairs, PairedSet):
        raise RequiresPairs("t_alpha needs an index-aligned PairedSet")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput("alpha must lie in [0, 1]")
    d = pairs.d
    if not 1 <= rank <= d:
        raise InvalidInput(f"rank must lie in [1, {d}]")
    from .diagnostics import residual_covariance

    x = pairs.x.data
    y = pairs.y.data
    y_shift = y - y.mean(axis=0) + x.mean(axis=0)
    resid = x - y_shift
    basis = sym_eig(residual_covariance(pairs)).vectors[:, :rank]
    data = y_shift + alpha * (resid @ basis) @ basis.T
    return EmbeddingSet(data=data, modality=pairs.y.modality, normalized=False)


def c3_align(y, mu_source, mu_target, noise_sigma, seed):
    """Centroid correction plus seeded Gaussian corruption, then renormalize."""
    if noise_sigma < 0:
        raise InvalidInput("noise_sigma must be nonnegative")
    shifted = t_mu(y, mu_source, mu_target)
    noise = np.random.default_rng(seed).standard_normal(shifted.data.shape)
    data = shifted.data + noise_sigma * noise
    return l2_normalize(EmbeddingSet(data=data, modality=y.modality))


def realign(y, mu_source, mu_target, trace_target, trace_source):
    """Anchor, trace and centroid alignment in three closed-form steps.

    Anchor: recenter at the target mean. Trace: rescale the centered part
    by sqrt(trace_target / trace_source) so residual energy matches. After
    spherical projection, subtract the induced centroid drift, restore the
    target mean, and renormalize.
    """
    if trace_source <= 0:
        raise DegenerateCovariance("source covariance trace must be positive")
    scale = np.sqrt(trace_target / trace_source)
    mu_source = np.asarray(mu_source, dtype=np.float64)
    mu_target = np.asarray(mu_target, dtype=np.float64)
    anchored = mu_target + scale * (y.data - mu_source)
    on_sphere = l2_normalize(EmbeddingSet(data=anchored, modality=y.modality))
    drift = on_sphere.data.mean(axis=0)
    recentered = on_sphere.data - drift + mu_target
    return l2_normalize(replace(on_sphere, data=recentered, normalized=False))


def apply_spec(spec, y, *, x_target=None, pairs=None, stats=None):
    """Dispatch a TransformSpec; ``stats`` carries the estimation-set moments."""
    stats = stats or {}
    if spec.kind == "identity":
        return t_id(y)
    if spec.kind == "centroid":
        return t_mu(y, stats["mu_source"], stats["mu_target"])
    if spec.kind == "moment":
        return t_sigma(
            y,
            stats["mu_source"],
            stats["sigma_source"],
            stats["mu_target"],
            stats["sigma_target"],
        )
    if spec.kind == "perm":
        if x_target is None:
            raise InvalidInput("perm needs the target set")
        return t_perm(y, x_target, spec.seed)
    if spec.kind == "alpha":
        if pairs is None:
            raise RequiresPairs("alpha transform needs paired data")
        return t_alpha(pairs, spec.alpha, spec.rank)
    if spec.kind == "c3":
        return c3_align(
            y, stats["mu_source"], stats["mu_target"], spec.noise_sigma, spec.seed
        )
    if spec.kind == "realign":
        return realign(
            y,
            stats["mu_source"],
            stats["mu_target"],
            stats["trace_target"],
            stats["trace_source"],
        )
    raise InvalidInput(f"unknown transform kind {spec.kind!r}")
