"""MMV-AMP activity detection with known LSFCs.

The iteration runs on column-normalized pilots ``A / sqrt(L)`` so that the
effective observation of row ``k`` is ``x_k + CN(0, diag(tau2))``.  In that
domain the signal rows are ``sqrt(L) * x_k`` and the prior variance of an
active row entry is ``L * g_k``.  Results are reported in the units of the
original model ``Y = A X + Z``.

Iteration (rows of ``X`` are length-``M`` vectors)::

    R^t     = A^H Z^t + X^t
    X^{t+1} = eta(R^t)
    Z^{t+1} = Y - A X^{t+1} + (Ktot/L) Z^t <eta'(R^t)>^T

with ``X^0 = 0`` and ``Z^0 = Y``; ``<eta'>`` is the mean over rows of the
``M x M`` Jacobians ``d eta_i / d r_j``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument
from .seeding import SeedLike, make_rng
from .system_model import LsfcModel, PilotMatrix, ReceivedBlock, complex_normal

TAU_MODES = ("state_evolution", "empirical")
DERIVATIVE_MODES = ("full", "diagonal")


def _logit(lam: float) -> float:
    if lam <= 0.0:
        return -np.inf
    if lam >= 1.0:
        return np.inf
    return float(np.log(lam) - np.log1p(-lam))


def _log_likelihood_ratio(r2, g, tau2):
    """``log p(r | active) - log p(r | inactive)`` summed over the last axis.

    ``r2`` holds ``|r_i|^2``; ``g`` broadcasts against ``r2`` minus the last axis.
    """
    g = np.asarray(g, dtype=float)[..., None]
    s = g + tau2
    return np.sum(np.log(tau2) - np.log(s) + r2 * g / (tau2 * s), axis=-1)


def _phi(llr, lam: float):
    prior = _logit(lam)
    if prior == np.inf:
        return np.ones_like(llr)
    if prior == -np.inf:
        return np.zeros_like(llr)
    return np.clip(expit(llr + prior), 0.0, 1.0)


def amp_denoise(r, g_k: float, tau2, lam: float):
    """Posterior mean of a Bernoulli-Gaussian row given ``r = x + CN(0, diag(tau2))``.

    ``x`` is zero with probability ``1 - lam`` and ``CN(0, g_k I)`` otherwise.
    Returns ``(phi * g_k / (g_k + tau2) * r, phi)`` where ``phi`` is the
    posterior activity probability, evaluated as a logistic of the
    log-likelihood ratio so it never overflows for large ``M``.
    """
    r = np.asarray(r, dtype=np.complex128)
    tau2 = np.broadcast_to(np.asarray(tau2, dtype=float), r.shape)
    if np.any(tau2 <= 0):
        raise InvalidArgument("tau2 must be positive")
    if not g_k > 0:
        raise InvalidArgument("g_k must be positive")
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgument("lambda must lie in [0, 1]")
    phi = float(_phi(_log_likelihood_ratio(np.abs(r) ** 2, g_k, tau2), lam))
    return phi * (g_k / (g_k + tau2)) * r, phi


def amp_derivative(r, g_k: float, tau2, phi: float, mode: str = "full") -> np.ndarray:
    """Jacobian ``d eta_i / d r_j`` of :func:`amp_denoise` (holomorphic part).

    ``full``: ``phi diag(xi) + (phi - phi^2) (xi r)(xi_t r)^H`` with
    ``xi = g/(g + tau2)`` and ``xi_t = g/(tau2 (g + tau2))``.
    ``diagonal``: only the diagonal of that matrix, returned as a vector.
    """
    if mode not in DERIVATIVE_MODES:
        raise InvalidArgument(f"mode must be one of {DERIVATIVE_MODES}")
    r = np.asarray(r, dtype=np.complex128)
    tau2 = np.broadcast_to(np.asarray(tau2, dtype=float), r.shape)
    xi = g_k / (g_k + tau2)
    xi_t = xi / tau2
    u = xi * r
    v = xi_t * r
    w = phi - phi * phi
    if mode == "diagonal":
        return phi * xi + w * u * v.conj()
    return phi * np.diag(xi).astype(np.complex128) + w * np.outer(u, v.conj())


def _denoise_rows(r, s, tau2, lam):
    """Row-wise denoiser. ``s`` is the per-row prior variance."""
    phi = _phi(_log_likelihood_ratio(np.abs(r) ** 2, s, tau2), lam)
    xi = s[:, None] / (s[:, None] + tau2)
    return phi[:, None] * xi * r, phi, xi


def _jacobian_sum(r, phi, xi, tau2, mode):
    """``sum_k eta'_k`` over rows; full matrix or its diagonal."""
    w = phi - phi * phi
    u = xi * r
    v = (xi / tau2) * r
    if mode == "diagonal":
        return np.sum(phi[:, None] * xi + w[:, None] * u * v.conj(), axis=0)
    return np.diag(phi @ xi).astype(np.complex128) + (w[:, None] * u).T @ v.conj()


@dataclass
class AmpOptions:
    """Controls for :func:`amp_run`.

    ``lam`` is the prior activity fraction ``Ka / Ktot``.  ``lsfc`` is either
    the known LSFC vector (length ``Ktot``) or a scalar used for every user.
    ``early_stop`` ends the run when the residual norm changes by less than
    that relative amount; ``None`` always runs ``max_iters`` iterations.
    ``se_samples`` is the Monte Carlo size for the state-evolution variant.
    """

    lam: float
    lsfc: Union[float, np.ndarray]
    max_iters: int = 50
    tau_mode: str = "empirical"
    derivative_mode: str = "full"
    early_stop: Optional[float] = 1e-6
    se_samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidArgument("lam must lie in [0, 1]")
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if self.tau_mode not in TAU_MODES:
            raise InvalidArgument(f"tau_mode must be one of {TAU_MODES}")
        if self.derivative_mode not in DERIVATIVE_MODES:
            raise InvalidArgument(f"derivative_mode must be one of {DERIVATIVE_MODES}")
        lsfc = np.asarray(self.lsfc, dtype=float)
        if np.any(lsfc <= 0):
            raise InvalidArgument("LSFCs must be positive")


@dataclass
class AmpResult:
    """Output of :func:`amp_run`.

    ``x`` is in the units of ``Y = A X + Z``; ``tau2_trace[t]`` is the
    effective noise (normalized domain) used at iteration ``t``.
    ``mse_trace[t]`` is ``||X^{t+1} - X||_F^2 / (M Ktot)`` and
    ``se_mse_trace[t]`` its state-evolution prediction; both are empty
    unless ground truth was supplied.
    """

    x: np.ndarray
    z: np.ndarray
    tau2: np.ndarray
    phi: np.ndarray
    iterations: int
    diverged: bool
    diverged_at: Optional[int]
    tau2_trace: List[np.ndarray] = field(default_factory=list)
    mse_trace: List[float] = field(default_factory=list)
    se_mse_trace: List[float] = field(default_factory=list)


def state_evolution(
    options: AmpOptions,
    lsfc_model: Union[LsfcModel, np.ndarray, float],
    sigma2: float,
    m: int,
    iters: int,
    mc_samples: Optional[int] = None,
    ktot_over_l: float = 1.0,
    column_energy: float = 1.0,
    seed: SeedLike = 0,
) -> np.ndarray:
    """Isotropic state evolution ``tau2_0, ..., tau2_iters``.

    ``tau2_0 = sigma2 + ratio * lam * c * E[g]`` and
    ``tau2_{t+1} = sigma2 + ratio * E||eta(x + z) - x||^2 / M`` with
    ``ratio = Ktot/L`` and ``c`` the squared column norm of the pilots the
    iteration runs on (prior variance ``c * g``).  The expectation is a
    Monte Carlo average over ``mc_samples`` draws of ``(g, b, h, z)``; ``g``
    comes from an :class:`LsfcModel`, or uniformly from a given LSFC vector.
    """
    mc_samples = options.se_samples if mc_samples is None else mc_samples
    if mc_samples < 1:
        raise InvalidArgument("mc_samples must be >= 1")
    if iters < 0:
        raise InvalidArgument("iters must be >= 0")
    rng = make_rng(seed)
    lam = options.lam
    if isinstance(lsfc_model, LsfcModel):
        g = lsfc_model.sample(rng, mc_samples)
        mean_g = lsfc_model.mean()
    else:
        pool = np.atleast_1d(np.asarray(lsfc_model, dtype=float))
        g = pool[rng.integers(0, pool.size, mc_samples)]
        mean_g = float(pool.mean())
    s = column_energy * g
    active = rng.random(mc_samples) < lam
    x = np.sqrt(s)[:, None] * active[:, None] * complex_normal(rng, (mc_samples, m))
    noise = complex_normal(rng, (mc_samples, m))

    tau2 = np.empty(iters + 1)
    tau2[0] = sigma2 + ktot_over_l * lam * column_energy * mean_g
    for t in range(iters):
        r = x + np.sqrt(tau2[t]) * noise
        est, _, _ = _denoise_rows(r, s, np.full(m, tau2[t]), lam)
        mse = np.sum(np.abs(est - x) ** 2) / (mc_samples * m)
        tau2[t + 1] = sigma2 + ktot_over_l * mse
    return tau2


def se_mse_prediction(tau2_next: float, sigma2: float, ktot_over_l: float, column_energy: float = 1.0) -> float:
    """Per-entry MSE of ``X`` implied by the next state-evolution variance."""
    return (tau2_next - sigma2) / (ktot_over_l * column_energy)


def amp_run(
    block: ReceivedBlock,
    pilots: PilotMatrix,
    options: AmpOptions,
    x_true: Optional[np.ndarray] = None,
    lsfc_model: Optional[LsfcModel] = None,
) -> AmpResult:
    """Run MMV-AMP on ``block``.

    With ``tau_mode="state_evolution"`` the noise variances come from
    :func:`state_evolution` (over ``lsfc_model`` if given, else over the
    known LSFC values); ``"empirical"`` uses ``||Z_{:,i}||^2 / L`` per
    antenna.  Non-finite iterates stop the run with ``diverged=True``.
    """
    y = block.y
    a = pilots.entries
    l, ktot = a.shape
    if y.shape[0] != l:
        raise InvalidArgument(f"block has {y.shape[0]} rows but pilots have {l}")
    m = y.shape[1]
    sigma2 = block.sigma2
    a_n = a / np.sqrt(l)
    ratio = ktot / l
    g = np.broadcast_to(np.asarray(options.lsfc, dtype=float), (ktot,))
    s = l * g
    lam = options.lam

    se_tau2 = None
    if options.tau_mode == "state_evolution" or x_true is not None:
        se_tau2 = state_evolution(
            options, lsfc_model if lsfc_model is not None else g, sigma2, m,
            options.max_iters, ktot_over_l=ratio, column_energy=l, seed=options.seed,
        )
    x_scaled = None if x_true is None else np.sqrt(l) * np.asarray(x_true, dtype=np.complex128)

    x = np.zeros((ktot, m), dtype=np.complex128)
    z = y.astype(np.complex128, copy=True)
    phi = np.zeros(ktot)
    result = AmpResult(x, z, np.empty(m), phi, 0, False, None)
    prev_norm = np.linalg.norm(z)
    for t in range(options.max_iters):
        if options.tau_mode == "state_evolution":
            tau2 = np.full(m, se_tau2[t])
        else:
            tau2 = np.maximum(np.sum(np.abs(z) ** 2, axis=0) / l, np.finfo(float).tiny)
        r = a_n.conj().T @ z + x
        with np.errstate(all="ignore"):
            x_new, phi, xi = _denoise_rows(r, s, tau2, lam)
            jac = _jacobian_sum(r, phi, xi, tau2, options.derivative_mode)
            if options.derivative_mode == "diagonal":
                onsager = z * jac / l
            else:
                onsager = z @ jac.T / l
            z_new = y - a_n @ x_new + onsager
        result.tau2_trace.append(tau2)
        result.iterations = t + 1
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(z_new))):
            result.diverged = True
            result.diverged_at = t + 1
            break
        x, z = x_new, z_new
        result.x, result.z, result.tau2, result.phi = x, z, tau2, phi
        if x_scaled is not None:
            result.mse_trace.append(float(np.sum(np.abs(x - x_scaled) ** 2) / (l * m * ktot)))
            result.se_mse_trace.append(se_mse_prediction(se_tau2[t + 1], sigma2, ratio, l))
        z_norm = np.linalg.norm(z)
        if options.early_stop is not None and abs(z_norm - prev_norm) <= options.early_stop * prev_norm:
            break
        prev_norm = z_norm
    result.x = x / np.sqrt(l)
    return result


def amp_estimate_gamma(x_final, z_final, pilots: PilotMatrix, tau2_final) -> np.ndarray:
    """Row-energy estimate ``max(0, ||R_k||^2/M - mean(tau2))`` of ``gamma``.

    ``R = A^H Z + X`` is formed in the normalized domain and the result is
    rescaled to the units of ``gamma``.
    """
    a = pilots.entries
    l = a.shape[0]
    r = (a / np.sqrt(l)).conj().T @ z_final + np.sqrt(l) * np.asarray(x_final)
    m = r.shape[1]
    energy = np.sum(np.abs(r) ** 2, axis=1) / m
    return np.maximum(0.0, energy - np.mean(tau2_final)) / l


def amp_activity_probability(result: AmpResult) -> np.ndarray:
    """Posterior activity probabilities from the final iteration."""
    return np.asarray(result.phi)


def write_trace_csv(path, runs, seeds) -> None:
    """Per-iteration MSE traces: ``iteration, seed, measured_mse, se_prediction``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "seed", "measured_mse", "se_prediction"])
        for res, seed in zip(runs, seeds):
            for t, (mse, se) in enumerate(zip(res.mse_trace, res.se_mse_trace), start=1):
                writer.writerow([t, seed, repr(mse), repr(se)])
