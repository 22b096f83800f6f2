"""Per-cluster second-level quotas from first-level NN probabilities."""
from __future__ import annotations

import warnings

import numpy as np

from .errors import ParameterError

GAMMAS = ("none", "sum", "std", "exp")


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def gamma_sum(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    s = p.sum()
    if s == 0:
        warnings.warn("gamma_sum: all-zero probabilities, using uniform weights", RuntimeWarning)
        return np.full(p.shape, 1.0 / p.size)
    return p / s


def gamma_std(p) -> np.ndarray:
    """Z-scores with the population standard deviation; all zeros when p is constant."""
    p = np.asarray(p, dtype=np.float64)
    if p.size < 2:
        raise ParameterError("gamma_std needs at least two probabilities")
    sigma = p.std()
    if sigma == 0:
        return np.zeros_like(p)
    return (p - p.mean()) / sigma


def gamma_exp(p) -> np.ndarray:
    """exp(-(1 - p) / rho) with rho = 1 - mean(p)."""
    p = np.asarray(p, dtype=np.float64)
    rho = 1.0 - p.mean()
    if rho <= 0:
        warnings.warn("gamma_exp: rho <= 0, falling back to one-hot at the largest probability", RuntimeWarning)
        out = np.zeros_like(p)
        out[np.argmax(p)] = 1.0
        return out
    return np.exp(-(1.0 - p) / rho)


_GAMMA_FUNCS = {"sum": gamma_sum, "std": gamma_std, "exp": gamma_exp}


def allocate(p, gamma: str, T: int, N: int) -> np.ndarray:
    """Subcluster quota S_r = min(N, round(g_r / sum(g) * T)) for each ranked cluster.

    ``gamma="none"`` splits T evenly. Negative gamma values are clamped to 0
    before the ratio; an all-zero result also falls back to the even split.
    """
    p = np.asarray(p, dtype=np.float64)
    R = p.size
    if R < 1 or T < 1 or N < 1:
        raise ParameterError(f"allocate needs R, T, N >= 1 (got R={R}, T={T}, N={N})")
    even = np.full(R, min(N, int(round_half_away(T / R))), dtype=np.int64)
    if gamma == "none":
        return even
    if gamma not in _GAMMA_FUNCS:
        raise ParameterError(f"unknown gamma {gamma!r}; expected one of {GAMMAS}")
    if R == 1:  # a single cluster takes the whole budget
        return np.array([min(N, T)], dtype=np.int64)
    g = np.maximum(_GAMMA_FUNCS[gamma](p), 0.0)
    total = g.sum()
    if total == 0:
        return even
    return np.minimum(N, round_half_away(g / total * T))
