"""Norm-Laplace noise and l2 clipping for uploaded embeddings.

Noise has density proportional to ``exp(-eta * ||z||_2)``. In polar form
that is a uniform direction times a ``Gamma(r, 1/eta)`` radius, which is
how :func:`sample_noise` draws it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["DPConfig", "sample_noise", "clip_l2", "privatize"]


@dataclass(frozen=True)
class DPConfig:
    enabled: bool = False
    eta: float = 10.0
    clip: float = 1.0

    def validate(self) -> None:
        if not self.eta > 0:
            raise ConfigError("must be > 0", key="privacy.eta")
        if not self.clip > 0:
            raise ConfigError("must be > 0", key="privacy.clip")


def sample_noise(dim: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    while norm == 0.0:
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
    radius = rng.gamma(shape=dim, scale=1.0 / eta)
    return direction / norm * radius


def clip_l2(v: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm <= bound:
        return v
    # rescale then guard against a last-ulp overshoot
    out = v * (bound / norm)
    while np.linalg.norm(out) > bound:
        out = out * (1.0 - 1e-15)
    return out


def privatize(v, cfg: DPConfig, rng: np.random.Generator) -> np.ndarray:
    """``clip(v + z)`` when enabled, otherwise ``v`` unchanged."""
    v = np.asarray(v, dtype=np.float64)
    if not cfg.enabled:
        return v
    return clip_l2(v + sample_noise(v.shape[0], cfg.eta, rng), cfg.clip)
