"""Coordinate-wise ML and NNLS activity detectors.

Both detectors estimate the active-LSFC vector ``gamma`` from the sample
covariance ``sigma_hat`` by exact minimization along one coordinate at a
time, starting from ``gamma = 0`` and ``Sigma = sigma2 I``:

* ML minimizes ``log|Sigma(gamma)| + tr(Sigma(gamma)^{-1} sigma_hat)``,
  keeping ``Sigma^{-1}`` current with Sherman-Morrison rank-1 updates.
* NNLS minimizes ``||Sigma(gamma) - sigma_hat||_F^2``.

Steps are clipped so that ``gamma >= 0`` and, when the true LSFCs are known,
``gamma <= g`` (box constraint).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import InvalidArgument, NumericFailure
from .seeding import make_rng
from .system_model import PilotMatrix, SampleCovariance, covariance_model

ALGORITHMS = ("ml", "nnls")
SCHEDULES = ("random_permutation", "cyclic", "uniform_random")

# Sherman-Morrison denominators at or below this are treated as breakdown.
DENOM_FLOOR = 1e-14


def _as_array(sigma_hat) -> np.ndarray:
    if isinstance(sigma_hat, SampleCovariance):
        return np.asarray(sigma_hat.sigma_hat)
    return np.asarray(sigma_hat, dtype=np.complex128)


def _pilot_array(pilots) -> np.ndarray:
    return pilots.entries if isinstance(pilots, PilotMatrix) else np.asarray(pilots, dtype=np.complex128)


def _hermitian_inverse(mat: np.ndarray) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(mat, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"covariance is not positive definite: {exc}") from exc
    inv = scipy.linalg.cho_solve(c, np.eye(mat.shape[0], dtype=mat.dtype))
    return 0.5 * (inv + inv.conj().T)


def ml_objective(pilots, gamma, sigma2: float, sigma_hat) -> float:
    """Negative log-likelihood (per antenna, up to constants) of ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0):
        raise InvalidArgument("gamma must be non-negative")
    if not sigma2 > 0:
        raise InvalidArgument("sigma2 must be positive")
    sigma = covariance_model(_pilot_array(pilots), gamma, sigma2)
    try:
        c, lower = scipy.linalg.cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("Sigma(gamma) is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(c).real))
    trace = np.trace(scipy.linalg.cho_solve((c, lower), _as_array(sigma_hat))).real
    return float(logdet + trace)


def nnls_objective(pilots, gamma, sigma2: float, sigma_hat) -> float:
    """Squared Frobenius misfit ``||Sigma(gamma) - sigma_hat||_F^2``."""
    sigma = covariance_model(_pilot_array(pilots), np.asarray(gamma, dtype=float), sigma2)
    return float(np.sum(np.abs(sigma - _as_array(sigma_hat)) ** 2))


@dataclass
class DetectorState:
    """Working state of a coordinate-wise run.

    ``sigma`` is the model covariance ``Sigma(gamma)``; ``sigma_inv`` its
    inverse, maintained only for ML runs.
    """

    gamma: np.ndarray
    sigma: np.ndarray
    sigma_inv: Optional[np.ndarray]
    sigma2: float

    @classmethod
    def initial(cls, ktot: int, l: int, sigma2: float, track_inverse: bool = True) -> "DetectorState":
        if not sigma2 > 0:
            raise InvalidArgument("sigma2 must be positive")
        eye = np.eye(l, dtype=np.complex128)
        return cls(
            gamma=np.zeros(ktot),
            sigma=sigma2 * eye,
            sigma_inv=eye / sigma2 if track_inverse else None,
            sigma2=float(sigma2),
        )

    def refresh(self, pilots) -> None:
        """Recompute ``sigma`` (and ``sigma_inv``) from ``gamma`` directly."""
        self.sigma = covariance_model(_pilot_array(pilots), self.gamma, self.sigma2)
        if self.sigma_inv is not None:
            self.sigma_inv = _hermitian_inverse(self.sigma)

    def coherence_error(self, pilots) -> float:
        """``||sigma_inv Sigma(gamma) - I||_F`` against a direct rebuild of Sigma."""
        if self.sigma_inv is None:
            raise InvalidArgument("state does not track the inverse")
        sigma = covariance_model(_pilot_array(pilots), self.gamma, self.sigma2)
        return float(np.linalg.norm(self.sigma_inv @ sigma - np.eye(sigma.shape[0])))


def _clip_step(d: float, gamma_k: float, upper_k: Optional[float]) -> float:
    d = max(d, -gamma_k)
    if upper_k is not None:
        d = min(d, upper_k - gamma_k)
    return d


def ml_coordinate_step(state: DetectorState, sigma_hat, a_k: np.ndarray, k: int, box_upper=None) -> float:
    """Clipped minimizer of the likelihood along coordinate ``k``."""
    if state.sigma_inv is None:
        raise InvalidArgument("ML steps need a state that tracks sigma_inv")
    q = state.sigma_inv @ a_k
    beta = np.vdot(a_k, q).real
    if not beta > 0:
        raise NumericFailure(f"a^H Sigma^-1 a = {beta} is not positive for coordinate {k}")
    alpha = np.vdot(q, _as_array(sigma_hat) @ q).real
    d = (alpha - beta) / beta**2
    return _clip_step(d, state.gamma[k], None if box_upper is None else box_upper[k])


def nnls_coordinate_step(state: DetectorState, sigma_hat, a_k: np.ndarray, k: int, box_upper=None) -> float:
    """Clipped minimizer of the Frobenius misfit along coordinate ``k``."""
    num = np.vdot(a_k, (_as_array(sigma_hat) - state.sigma) @ a_k).real
    d = num / np.vdot(a_k, a_k).real ** 2
    return _clip_step(d, state.gamma[k], None if box_upper is None else box_upper[k])


def apply_rank1_update(state: DetectorState, a_k: np.ndarray, d: float, k: int) -> DetectorState:
    """Add ``d a_k a_k^H`` to the model and update ``gamma_k`` (in place)."""
    if d == 0.0:
        return state
    if state.sigma_inv is not None:
        q = state.sigma_inv @ a_k
        denom = 1.0 + d * np.vdot(a_k, q).real
        if denom <= DENOM_FLOOR:
            raise NumericFailure(f"Sherman-Morrison denominator {denom:.3e} for coordinate {k}")
        state.sigma_inv -= (d / denom) * np.outer(q, q.conj())
    state.sigma += d * np.outer(a_k, a_k.conj())
    state.gamma[k] += d
    return state


@dataclass
class DetectorOptions:
    """Run controls for :func:`run_detector`.

    ``tolerance`` defaults to ``1e-8 * sigma2``; ``inverse_refresh_period``
    (coordinate visits between direct rebuilds of Sigma and its inverse)
    defaults to ``10 * Ktot``.  ``record`` is ``"epoch"`` or ``"step"``;
    per-step traces evaluate the objective directly after every visit and
    force the pure-Python engine, so keep them to small instances.
    """

    max_epochs: int = 1000
    tolerance: Optional[float] = None
    schedule: str = "random_permutation"
    box_upper: Optional[np.ndarray] = None
    inverse_refresh_period: Optional[int] = None
    seed: int = 0
    record: str = "epoch"
    engine: str = "numba"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise InvalidArgument("max_epochs must be >= 1")
        if self.tolerance is not None and self.tolerance < 0:
            raise InvalidArgument("tolerance must be non-negative")
        if self.schedule not in SCHEDULES:
            raise InvalidArgument(f"schedule must be one of {SCHEDULES}")
        if self.box_upper is not None:
            self.box_upper = np.asarray(self.box_upper, dtype=float)
            if np.any(self.box_upper < 0):
                raise InvalidArgument("box_upper must be non-negative")
        if self.record not in ("epoch", "step"):
            raise InvalidArgument("record must be 'epoch' or 'step'")
        if self.engine not in ("numba", "python"):
            raise InvalidArgument("engine must be 'numba' or 'python'")


@dataclass
class Estimate:
    gamma_hat: np.ndarray
    epochs_run: int
    final_objective: float
    objective_trace: List[float]
    converged: bool
    algorithm: str
    refreshes: int = 0

    def csv_row(self, trial_id, errors: Optional[dict] = None) -> dict:
        row = {
            "trial": trial_id,
            "algorithm": self.algorithm,
            "epochs": self.epochs_run,
            "final_objective": self.final_objective,
            "converged": int(self.converged),
        }
        row.update(errors or {})
        return row


def _schedule_order(schedule: str, ktot: int, rng: np.random.Generator) -> np.ndarray:
    if schedule == "cyclic":
        return np.arange(ktot, dtype=np.int64)
    if schedule == "random_permutation":
        return rng.permutation(ktot).astype(np.int64)
    return rng.integers(0, ktot, size=ktot, dtype=np.int64)


class _Problem:
    def __init__(self, pilots, sigma_hat, sigma2, algorithm):
        self.a = np.ascontiguousarray(_pilot_array(pilots))
        self.at = np.ascontiguousarray(self.a.T)
        self.sigma_hat = np.ascontiguousarray(_as_array(sigma_hat))
        self.sigma2 = float(sigma2)
        self.algorithm = algorithm
        l, ktot = self.a.shape
        if self.sigma_hat.shape != (l, l):
            raise InvalidArgument(f"sigma_hat must be {l}x{l}, got {self.sigma_hat.shape}")
        self.norm4 = np.sum(np.abs(self.a) ** 2, axis=0) ** 2

    def objective(self, gamma) -> float:
        if self.algorithm == "ml":
            return ml_objective(self.a, gamma, self.sigma2, self.sigma_hat)
        return nnls_objective(self.a, gamma, self.sigma2, self.sigma_hat)


class _RefreshClock:
    """Counts coordinate visits between direct rebuilds of the cached matrices."""

    def __init__(self, period: int):
        self.period = period
        self.remaining = period
        self.fired = 0

    def tick(self, n: int) -> bool:
        self.remaining -= n
        if self.remaining <= 0:
            self.remaining = self.period
            self.fired += 1
            return True
        return False


def _python_visit(prob: _Problem, state: DetectorState, k: int, upper) -> float:
    step_fn = ml_coordinate_step if prob.algorithm == "ml" else nnls_coordinate_step
    a_k = prob.a[:, k]
    d = step_fn(state, prob.sigma_hat, a_k, k, upper)
    try:
        apply_rank1_update(state, a_k, d, k)
    except NumericFailure:
        state.refresh(prob.a)
        d = step_fn(state, prob.sigma_hat, a_k, k, upper)
        apply_rank1_update(state, a_k, d, k)
    return d


def _epoch_python(prob, state, order, upper, clock, step_trace: Optional[list]) -> float:
    max_step = 0.0
    for k in order:
        d = _python_visit(prob, state, int(k), upper)
        max_step = max(max_step, abs(d))
        if clock.tick(1):
            state.refresh(prob.a)
        if step_trace is not None:
            step_trace.append(prob.objective(state.gamma))
    return max_step


def _ml_chunk(prob, state, chunk, upper_arr, has_upper) -> tuple:
    no_log = np.empty(0)
    max_step = 0.0
    delta = 0.0
    start = 0
    retried_at = -1
    while True:
        pos, step, dobj = _kernels.ml_sweep(
            prob.at, state.sigma_inv, prob.sigma_hat, state.gamma, chunk, start,
            upper_arr, has_upper, DENOM_FLOOR, no_log,
        )
        max_step = max(max_step, step)
        delta += dobj
        if pos == chunk.size:
            return max_step, delta
        if pos == retried_at:
            raise NumericFailure(
                f"rank-1 update broke down at coordinate {chunk[pos]} after a direct refresh"
            )
        # Rebuild the inverse directly and retry this coordinate once.
        state.refresh(prob.a)
        retried_at = start = pos


def _nnls_chunk(prob, state, chunk, upper_arr, has_upper) -> tuple:
    resid = np.ascontiguousarray(prob.sigma_hat - state.sigma)
    _, max_step, delta = _kernels.nnls_sweep(
        prob.at, resid, prob.norm4, state.gamma, chunk, 0, upper_arr, has_upper, np.empty(0)
    )
    state.sigma = prob.sigma_hat - resid
    return max_step, delta


def _epoch_numba(prob, state, order, upper, clock) -> tuple:
    has_upper = upper is not None
    upper_arr = upper if has_upper else np.empty(0)
    chunk_fn = _ml_chunk if prob.algorithm == "ml" else _nnls_chunk
    max_step = 0.0
    delta = 0.0
    pos = 0
    while pos < order.size:
        take = min(order.size - pos, clock.remaining)
        step, dobj = chunk_fn(prob, state, order[pos:pos + take], upper_arr, has_upper)
        max_step = max(max_step, step)
        delta += dobj
        pos += take
        if clock.tick(take):
            state.refresh(prob.a)
    return max_step, delta


def run_detector(
    pilots,
    sigma_hat,
    sigma2: float,
    options: Optional[DetectorOptions] = None,
    algorithm: str = "ml",
) -> Estimate:
    """Coordinate-wise ML or NNLS estimate of ``gamma``.

    Starts from ``gamma = 0``, ``Sigma = sigma2 I`` and sweeps coordinates in
    the order given by ``options.schedule`` until the largest step of an epoch
    drops below the tolerance or ``max_epochs`` is reached.

    With ``record="epoch"`` the trace holds the starting objective and the
    objective after each epoch (accumulated from exact per-step changes);
    with ``record="step"`` it holds a direct evaluation after every visit.
    """
    options = options or DetectorOptions()
    algorithm = algorithm.lower()
    if algorithm not in ALGORITHMS:
        raise InvalidArgument(f"algorithm must be one of {ALGORITHMS}")
    if not sigma2 > 0:
        raise InvalidArgument("sigma2 must be positive")
    prob = _Problem(pilots, sigma_hat, sigma2, algorithm)
    l, ktot = prob.a.shape
    upper = options.box_upper
    if upper is not None and upper.shape != (ktot,):
        raise InvalidArgument(f"box_upper must have length {ktot}")
    tol = options.tolerance if options.tolerance is not None else 1e-8 * sigma2
    clock = _RefreshClock(options.inverse_refresh_period or 10 * ktot)
    rng = make_rng(options.seed)
    per_step = options.record == "step"
    engine = "python" if per_step else options.engine

    state = DetectorState.initial(ktot, l, sigma2, track_inverse=algorithm == "ml")
    obj = prob.objective(state.gamma)
    trace = [obj]
    converged = False
    epoch = 0
    for epoch in range(1, options.max_epochs + 1):
        order = _schedule_order(options.schedule, ktot, rng)
        if engine == "python":
            max_step = _epoch_python(prob, state, order, upper, clock, trace if per_step else None)
            if not per_step:
                trace.append(prob.objective(state.gamma))
        else:
            max_step, delta = _epoch_numba(prob, state, order, upper, clock)
            obj += delta
            trace.append(obj)
        if max_step < tol:
            converged = True
            break
    gamma_hat = np.maximum(state.gamma, 0.0)
    return Estimate(
        gamma_hat=gamma_hat,
        epochs_run=epoch,
        final_objective=prob.objective(gamma_hat),
        objective_trace=trace,
        converged=converged,
        algorithm=algorithm,
        refreshes=clock.fired,
    )


def lifted_operator(pilots) -> np.ndarray:
    """Lifted matrix whose ``k``-th column is ``vec(a_k a_k^H)`` (``L^2 x Ktot``)."""
    a = _pilot_array(pilots)
    l, ktot = a.shape
    return (a[:, None, :] * a.conj()[None, :, :]).reshape(l * l, ktot)


@dataclass
class NnlsResult:
    gamma: np.ndarray
    converged: bool
    iterations: int
    kkt_residual: float
    objective: float


def _polish_on_support(gram, b, gamma):
    # Solve the unconstrained problem on the free set, also trying supports
    # trimmed of tiny entries; return the feasible candidates.
    top = gamma.max(initial=0.0)
    out = []
    for rel in (0.0, 1e-10, 1e-8, 1e-6):
        free = np.flatnonzero(gamma > rel * top)
        if free.size == 0:
            continue
        try:
            sol = np.linalg.lstsq(gram[np.ix_(free, free)], b[free], rcond=None)[0]
        except np.linalg.LinAlgError:
            continue
        if np.all(sol >= 0):
            cand = np.zeros_like(gamma)
            cand[free] = sol
            out.append(cand)
    return out


def nnls_reference_solve(
    pilots,
    sigma_hat,
    sigma2: float,
    max_iter: int = 20000,
    tol: float = 1e-10,
) -> NnlsResult:
    """Reference solver for ``min_{gamma >= 0} ||lifted @ gamma - w||^2``.

    Uses the explicit lifted matrix with ``w = vec(sigma_hat - sigma2 I)``
    and projected gradient with Barzilai-Borwein steps and Armijo
    backtracking, followed by an exact least-squares polish on the detected
    support.  Convergence is certified by the KKT residual
    ``||gamma - max(gamma - grad, 0)||_inf <= tol * scale``; if it is not met
    within ``max_iter`` iterations the result carries ``converged=False`` and
    the last iterate.
    """
    lifted = lifted_operator(pilots)
    l = _pilot_array(pilots).shape[0]
    w = (_as_array(sigma_hat) - sigma2 * np.eye(l)).reshape(-1)
    gram = (lifted.conj().T @ lifted).real
    b = (lifted.conj().T @ w).real
    wnorm2 = float(np.vdot(w, w).real)

    def objective(g):
        return float(g @ (gram @ g) - 2.0 * b @ g + wnorm2)

    def gradient(g):
        return 2.0 * (gram @ g - b)

    scale = max(np.abs(b).max(initial=0.0), 1e-300)

    def kkt(g, grad):
        return float(np.abs(g - np.maximum(g - grad, 0.0)).max(initial=0.0)) / scale

    gamma = np.zeros(gram.shape[0])
    grad = gradient(gamma)
    obj = objective(gamma)
    short_step = 1.0 / max(2.0 * np.linalg.norm(gram, 2), 1e-300)
    step = short_step
    it = 0
    res = kkt(gamma, grad)
    while it < max_iter and res > tol:
        it += 1
        # Armijo backtracking along the projection arc.
        t = step
        while True:
            cand = np.maximum(gamma - t * grad, 0.0)
            cand_obj = objective(cand)
            if cand_obj <= obj + 1e-4 * grad @ (cand - gamma) or t < 1e-300:
                break
            t *= 0.5
        s = cand - gamma
        new_grad = gradient(cand)
        yv = new_grad - grad
        sy = s @ yv
        step = (s @ s) / sy if sy > 0 else short_step
        gamma, grad, obj = cand, new_grad, cand_obj
        res = kkt(gamma, grad)
        if it % 50 == 0 and res > tol:
            for polished in _polish_on_support(gram, b, gamma):
                p_grad = gradient(polished)
                p_res = kkt(polished, p_grad)
                if p_res < res:
                    gamma, grad, obj, res = polished, p_grad, objective(polished), p_res
    return NnlsResult(gamma, res <= tol, it, res, objective(gamma))


def threshold_activity(gamma_hat, nu: float, sigma2: float, relative_to=None) -> np.ndarray:
    """Indices declared active.

    Absolute mode: ``gamma_hat_i > nu * sigma2``.  Relative mode (``relative_to``
    holds the LSFC vector ``g``): ``gamma_hat_i > nu * g_i``.
    """
    if nu < 0:
        raise InvalidArgument("threshold must be non-negative")
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    if relative_to is None:
        return np.flatnonzero(gamma_hat > nu * sigma2)
    return np.flatnonzero(gamma_hat > nu * np.asarray(relative_to, dtype=float))


def constrained_ml_exhaustive(pilots, sigma_hat, sigma2: float, ka: int, lsfc) -> np.ndarray:
    """Support of size ``ka`` minimizing the likelihood cost with known LSFCs.

    Brute force over all ``C(Ktot, ka)`` binary patterns; limited to
    ``Ktot <= 20`` and ``ka <= 4``.
    """
    a = _pilot_array(pilots)
    ktot = a.shape[1]
    if ktot > 20 or ka > 4 or ka < 0:
        raise InvalidArgument("exhaustive search is limited to Ktot <= 20 and 0 <= ka <= 4")
    lsfc = np.asarray(lsfc, dtype=float)
    best, best_val = (), math.inf
    for support in itertools.combinations(range(ktot), ka):
        gamma = np.zeros(ktot)
        gamma[list(support)] = lsfc[list(support)]
        val = ml_objective(a, gamma, sigma2, sigma_hat)
        if val < best_val:
            best, best_val = support, val
    return np.array(best, dtype=np.int64)
