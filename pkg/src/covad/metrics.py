"""Figures of merit: detection error rates, ROC, estimation errors, entropy bound."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class RocPoint:
    nu: float
    p_md: float
    p_fa: float

    def __post_init__(self):
        if not (0.0 <= self.p_md <= 1.0 and 0.0 <= self.p_fa <= 1.0):
            raise InvalidArgument("probabilities must lie in [0, 1]")


def md_fa(estimated_set, true_set, ktot: int, ka: Optional[int] = None):
    """Per-trial misdetection and false-alarm fractions.

    ``p_md = 1 - |K_a & est| / Ka`` and ``p_fa = |est - K_a| / (Ktot - Ka)``.
    ``p_fa`` is 0 when every user is active.
    """
    est = set(int(i) for i in estimated_set)
    true = set(int(i) for i in true_set)
    ka = len(true) if ka is None else ka
    if ka < 1:
        raise InvalidArgument("misdetection rate needs at least one active user")
    if ktot < ka:
        raise InvalidArgument("ktot must be at least ka")
    p_md = 1.0 - len(est & true) / ka
    p_fa = len(est - true) / (ktot - ka) if ktot > ka else 0.0
    return p_md, p_fa


def default_nu_grid(points: int = 601) -> np.ndarray:
    """Logarithmic grid over ``[1e-4, 1e2]`` (in units of ``sigma2``)."""
    return np.logspace(-4, 2, points)


def _rates(gamma_hat, active_mask, thresholds):
    # Counts of estimates strictly above each threshold, per class.
    act = np.sort(gamma_hat[active_mask])
    ina = np.sort(gamma_hat[~active_mask])
    above_act = act.size - np.searchsorted(act, thresholds, side="right")
    above_ina = ina.size - np.searchsorted(ina, thresholds, side="right")
    p_md = 1.0 - above_act / act.size if act.size else np.zeros(thresholds.size)
    p_fa = above_ina / ina.size if ina.size else np.zeros(thresholds.size)
    return p_md, p_fa


def _breakpoints(gamma_hats, sigma2) -> np.ndarray:
    return np.unique(np.concatenate([np.asarray(g, dtype=float) for g in gamma_hats]) / sigma2)


def roc_curve(gamma_hats, true_sets, sigma2: float = 1.0, nu_grid=None) -> List[RocPoint]:
    """ROC averaged over trials for the rule ``gamma_hat_i > nu * sigma2``.

    Without an explicit grid the default logarithmic grid is merged with
    every value ``gamma_hat_i / sigma2`` (plus ``0``), so that each step of
    the empirical curves is represented exactly.
    """
    gamma_hats = [np.asarray(g, dtype=float) for g in gamma_hats]
    if len(gamma_hats) != len(true_sets) or not gamma_hats:
        raise InvalidArgument("need one true set per estimate and at least one trial")
    if nu_grid is None:
        grid = np.union1d(np.concatenate([[0.0], default_nu_grid()]), _breakpoints(gamma_hats, sigma2))
    else:
        grid = np.asarray(nu_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) < 0):
            raise InvalidArgument("nu_grid must be a non-empty ascending sequence")
    md = np.zeros(grid.size)
    fa = np.zeros(grid.size)
    for g, truth in zip(gamma_hats, true_sets):
        mask = np.zeros(g.size, dtype=bool)
        mask[np.asarray(list(truth), dtype=np.int64)] = True
        p_md, p_fa = _rates(g, mask, grid * sigma2)
        md += p_md
        fa += p_fa
    n = len(gamma_hats)
    md = np.clip(md / n, 0.0, 1.0)
    fa = np.clip(fa / n, 0.0, 1.0)
    return [RocPoint(float(v), float(a), float(b)) for v, a, b in zip(grid, md, fa)]


def roc_sweep(gamma_hat, true_set, nu_grid=None, sigma2: float = 1.0) -> List[RocPoint]:
    """Single-trial ROC; see :func:`roc_curve`."""
    return roc_curve([gamma_hat], [true_set], sigma2, nu_grid)


@dataclass(frozen=True)
class EqualError:
    """Operating point where ``p_md == p_fa``.

    ``in_grid`` is False when the curves do not cross inside the grid; the
    rate is then taken at the nearest end of the grid.
    """

    rate: float
    nu: float
    in_grid: bool

    def __float__(self):
        return self.rate


def equal_error_point(roc: Sequence[RocPoint]) -> EqualError:
    """Crossing of ``p_md`` and ``p_fa`` by linear interpolation on the grid."""
    if not roc:
        raise InvalidArgument("empty ROC")
    nu = np.array([p.nu for p in roc])
    md = np.array([p.p_md for p in roc])
    fa = np.array([p.p_fa for p in roc])
    diff = md - fa
    zero = np.flatnonzero(diff == 0.0)
    if zero.size:
        # Report the middle of the first run of exact ties (e.g. a separating gap).
        i = j = zero[0]
        while j + 1 < diff.size and diff[j + 1] == 0.0:
            j += 1
        nu_mid = 0.5 * (nu[i] + nu[j + 1]) if j + 1 < diff.size else nu[j]
        return EqualError(float(md[i]), float(nu_mid), True)
    pos = np.flatnonzero(diff > 0.0)
    if pos.size == 0:
        return EqualError(float(0.5 * (md[-1] + fa[-1])), float(nu[-1]), False)
    i = pos[0]
    if i == 0:
        return EqualError(float(0.5 * (md[0] + fa[0])), float(nu[0]), False)
    w = -diff[i - 1] / (diff[i] - diff[i - 1])
    rate = md[i - 1] + w * (md[i] - md[i - 1])
    return EqualError(float(rate), float(nu[i - 1] + w * (nu[i] - nu[i - 1])), True)


def lp_error(gamma_hat, gamma_true, p=1) -> float:
    """Relative error ``||gamma_hat - gamma_true||_p / ||gamma_true||_p`` for p in {1, 2, inf}.

    The inf-norm variant is advisory; estimation guarantees are stated for p in [1, 2].
    """
    if p not in (1, 2, np.inf, "inf"):
        raise InvalidArgument("p must be 1, 2 or inf")
    order = np.inf if p == "inf" else p
    gamma_true = np.asarray(gamma_true, dtype=float)
    ref = np.linalg.norm(gamma_true, order)
    if ref == 0:
        raise InvalidArgument("reference vector has zero norm")
    return float(np.linalg.norm(np.asarray(gamma_hat, dtype=float) - gamma_true, order) / ref)


def covariance_deviation(sigma_hat, sigma_true) -> float:
    """Frobenius distance between sample and population covariance."""
    a = getattr(sigma_hat, "sigma_hat", sigma_hat)
    b = getattr(sigma_true, "sigma_hat", sigma_true)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def expected_deviation_sq(sigma_true, m: int) -> float:
    """Mean squared deviation ``tr(Sigma)^2 / M`` for complex Gaussian samples."""
    b = np.asarray(getattr(sigma_true, "sigma_hat", sigma_true))
    return float(np.trace(b).real ** 2 / m)


def _entropy_from_log(log_p: float) -> float:
    # Binary entropy in bits given log(p); stable for p near 0 or 1.
    if log_p >= 0.0:
        return 0.0
    p = math.exp(log_p)
    q = -math.expm1(log_p)
    if p == 0.0:
        return 0.0
    return (-p * log_p - q * math.log(q)) / math.log(2.0)


def binary_entropy(p: float) -> float:
    """``H2(p)`` in bits."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgument("p must lie in [0, 1]")
    if p in (0.0, 1.0):
        return 0.0
    return (-p * math.log(p) - (1.0 - p) * math.log1p(-p)) / math.log(2.0)


def or_mac_entropy_bound(j: int, ka: int) -> float:
    """Upper bound ``2^J H2((1 - 2^-J)^Ka)`` on the OR-MAC output entropy per slot (bits)."""
    if j < 1 or ka < 0:
        raise InvalidArgument("need j >= 1 and ka >= 0")
    log_p0 = ka * math.log1p(-(2.0 ** -j))
    return (2.0 ** j) * _entropy_from_log(log_p0)


def sum_rate_feasible(ka: int, j: int, r_out: float) -> bool:
    """Necessary condition ``Ka J R_out <= 2^J H2((1 - 2^-J)^Ka)``."""
    return ka * j * r_out <= or_mac_entropy_bound(j, ka)


def mean_and_stderr(values: Iterable[float]):
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
