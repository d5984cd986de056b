"""Sobol quasi-random draws of the random effects."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .model import RandomEffects, RandomEffectsDistribution


@dataclass(frozen=True)
class QmcConfig:
    """``scramble`` is 0 for the plain sequence, otherwise an Owen-scrambling seed."""

    draws: int
    dimension: int
    skip: int = 1
    scramble: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("need at least one draw")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if self.scramble == 0 and self.skip < 1:
            raise ValueError("the unscrambled sequence starts at 0; skip at least one point")


@lru_cache(maxsize=32)
def _standard_normal_points(draws: int, dimension: int, skip: int, scramble: int) -> np.ndarray:
    engine = qmc.Sobol(dimension, scramble=bool(scramble), seed=scramble or None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # balance properties need 2^m points
        u = engine.random(draws + skip)[skip:]
    z = ndtri(u)
    z.setflags(write=False)
    return z


def standard_normal_points(cfg: QmcConfig) -> np.ndarray:
    """(draws, dimension) array of inverse-normal-mapped Sobol points."""
    return _standard_normal_points(cfg.draws, cfg.dimension, cfg.skip, cfg.scramble)


def sobol_normal_draws(cfg: QmcConfig, distribution: RandomEffectsDistribution) -> RandomEffects:
    chol = np.asarray(distribution.chol, dtype=float)
    if distribution.mask is not None:
        chol = np.where(distribution.mask, chol, 0.0)
    if chol.shape[0] != cfg.dimension:
        raise ValueError(f"QMC dimension {cfg.dimension} does not match covariance size {chol.shape[0]}")
    u = standard_normal_points(cfg) @ chol.T
    return RandomEffects.from_vector(u, cfg.dimension - 2)
