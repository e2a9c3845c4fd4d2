"""Diagnostics and anisotropic alignment for embedding-space modality gaps."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    aligner,
    diagnostics,
    errors,
    evalsuite,
    frame,
    numerics,
    phase_prior,
    store,
    synthetic,
    transforms,
)
