"""Signal model for covariance-based activity detection.

A block of ``L`` signal dimensions is received on ``M`` antennas::

    Y = A diag(gamma)^{1/2} H + Z

with pilot matrix ``A`` (``L x Ktot``, every column of squared norm ``L``),
active-LSFC pattern ``gamma`` (``gamma_k = b_k g_k``), Rayleigh fading
``H ~ CN(0, 1)`` and noise ``Z ~ CN(0, sigma2)``.  ``CN(0, s)`` has real and
imaginary parts i.i.d. ``N(0, s/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import InvalidArgument
from .seeding import SeedLike, make_rng


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """i.i.d. circularly-symmetric ``CN(0, variance)`` samples."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class PilotMatrix:
    """Pilot (or inner codebook) matrix with columns of squared norm ``L``."""

    entries: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=np.complex128)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InvalidArgument("pilot matrix must be a non-empty 2-D array")
        object.__setattr__(self, "entries", _frozen(a))

    @property
    def dim_l(self) -> int:
        return self.entries.shape[0]

    @property
    def dim_ktot(self) -> int:
        return self.entries.shape[1]

    def column(self, k: int) -> np.ndarray:
        return self.entries[:, k]


def generate_pilots(l: int, ktot: int, seed: SeedLike) -> PilotMatrix:
    """Draw ``ktot`` columns i.i.d. uniformly from the complex sphere of radius sqrt(l)."""
    if l < 1 or ktot < 1:
        raise InvalidArgument(f"pilot dimensions must be positive, got l={l}, ktot={ktot}")
    rng = make_rng(seed)
    a = complex_normal(rng, (l, ktot))
    norms = np.linalg.norm(a, axis=0)
    # A zero draw has probability 0; redraw just in case.
    while np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0)
        a[:, bad] = complex_normal(rng, (l, bad.size))
        norms = np.linalg.norm(a, axis=0)
    a *= np.sqrt(l) / norms
    return PilotMatrix(a, seed=seed if isinstance(seed, (int, np.integer)) else None)


@dataclass(frozen=True)
class LsfcModel:
    """Distribution of the large-scale fading coefficients.

    ``kind == "constant"``: every user has ``g_min == g_max``.
    ``kind == "uniform_db"``: ``10 log10 g`` is uniform on
    ``[10 log10 g_min, 10 log10 g_max]``.
    """

    kind: str
    g_min: float
    g_max: float

    def __post_init__(self):
        if self.kind not in ("constant", "uniform_db"):
            raise InvalidArgument(f"unknown LSFC model kind {self.kind!r}")
        if not (self.g_min > 0 and self.g_max > 0):
            raise InvalidArgument("LSFC bounds must be positive")
        if self.g_min > self.g_max:
            raise InvalidArgument("g_min must not exceed g_max")
        if self.kind == "constant" and self.g_min != self.g_max:
            raise InvalidArgument("constant LSFC model needs g_min == g_max")

    @classmethod
    def constant(cls, g: float) -> "LsfcModel":
        return cls("constant", g, g)

    @classmethod
    def uniform_db(cls, g_min: float, g_max: float) -> "LsfcModel":
        return cls("uniform_db", g_min, g_max)

    @classmethod
    def from_snr_db(cls, lo_db: float, hi_db: float, sigma2: float) -> "LsfcModel":
        """LSFCs whose per-user snr ``g / sigma2`` is uniform in dB over ``[lo_db, hi_db]``."""
        g_lo = sigma2 * 10.0 ** (lo_db / 10.0)
        g_hi = sigma2 * 10.0 ** (hi_db / 10.0)
        if lo_db == hi_db:
            return cls.constant(g_lo)
        return cls.uniform_db(g_lo, g_hi)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "constant":
            return np.full(size, self.g_min, dtype=float)
        lo, hi = 10.0 * np.log10(self.g_min), 10.0 * np.log10(self.g_max)
        return 10.0 ** (rng.uniform(lo, hi, size) / 10.0)

    def mean(self) -> float:
        if self.kind == "constant":
            return self.g_min
        # E[10^(U/10)] for U uniform in dB.
        c = np.log(10.0) / 10.0
        lo, hi = 10.0 * np.log10(self.g_min), 10.0 * np.log10(self.g_max)
        return float((self.g_max - self.g_min) / (c * (hi - lo)))


@dataclass(frozen=True)
class GroundTruth:
    """Sparse active-LSFC pattern together with the full LSFC vector."""

    gamma_true: np.ndarray
    active_set: np.ndarray
    lsfc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma_true", _frozen(np.asarray(self.gamma_true, dtype=float)))
        object.__setattr__(self, "active_set", _frozen(np.asarray(self.active_set, dtype=np.int64)))
        object.__setattr__(self, "lsfc", _frozen(np.asarray(self.lsfc, dtype=float)))

    @property
    def ka(self) -> int:
        return int(self.active_set.size)

    @property
    def ktot(self) -> int:
        return int(self.gamma_true.size)


def sample_ground_truth(ktot: int, ka: int, lsfc_model: LsfcModel, seed: SeedLike) -> GroundTruth:
    """Uniformly random size-``ka`` active set with LSFCs drawn for all ``ktot`` users."""
    if ktot < 1:
        raise InvalidArgument("ktot must be positive")
    if ka < 0 or ka > ktot:
        raise InvalidArgument(f"need 0 <= ka <= ktot, got ka={ka}, ktot={ktot}")
    rng = make_rng(seed)
    active = np.sort(rng.choice(ktot, size=ka, replace=False))
    g = lsfc_model.sample(rng, ktot)
    gamma = np.zeros(ktot)
    gamma[active] = g[active]
    return GroundTruth(gamma, active, g)


@dataclass(frozen=True)
class ReceivedBlock:
    y: np.ndarray
    sigma2: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.complex128)
        if y.ndim != 2:
            raise InvalidArgument("received block must be L x M")
        if not self.sigma2 > 0:
            raise InvalidArgument("sigma2 must be positive")
        object.__setattr__(self, "y", _frozen(y))

    @property
    def m_antennas(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class SampleCovariance:
    """Hermitian ``L x L`` covariance; ``m_samples`` is None for an exact covariance."""

    sigma_hat: np.ndarray
    m_samples: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "sigma_hat", _frozen(np.asarray(self.sigma_hat, dtype=np.complex128)))

    @property
    def dim_l(self) -> int:
        return self.sigma_hat.shape[0]


def synthesize_block(
    pilots: PilotMatrix,
    truth: GroundTruth,
    m: int,
    sigma2: float,
    seed: SeedLike,
) -> ReceivedBlock:
    """Draw ``Y = A diag(gamma)^{1/2} H + Z``.

    Fading rows are drawn only for active users; inactive rows are multiplied
    by zero and do not affect ``Y``.
    """
    if truth.ktot != pilots.dim_ktot:
        raise InvalidArgument(
            f"ground truth has {truth.ktot} users but pilot matrix has {pilots.dim_ktot} columns"
        )
    if m < 1:
        raise InvalidArgument("m must be positive")
    if not sigma2 > 0:
        raise InvalidArgument("sigma2 must be positive")
    rng = make_rng(seed)
    active = truth.active_set
    h = complex_normal(rng, (active.size, m))
    z = complex_normal(rng, (pilots.dim_l, m), sigma2)
    amp = np.sqrt(truth.gamma_true[active])
    y = pilots.entries[:, active] @ (amp[:, None] * h) + z
    return ReceivedBlock(y, sigma2)


def _hermitian_part(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.conj().T)


def sample_covariance(block: Union[ReceivedBlock, np.ndarray]) -> SampleCovariance:
    """``(1/M) Y Y^H``, symmetrized to remove floating-point asymmetry."""
    y = block.y if isinstance(block, ReceivedBlock) else np.asarray(block, dtype=np.complex128)
    if y.ndim != 2 or y.shape[1] < 1:
        raise InvalidArgument("need an L x M block with M >= 1")
    m = y.shape[1]
    return SampleCovariance(_hermitian_part(y @ y.conj().T / m), m)


def covariance_model(pilots: Union[PilotMatrix, np.ndarray], gamma: np.ndarray, sigma2: float) -> np.ndarray:
    """``A diag(gamma) A^H + sigma2 I`` as a plain array (no validation)."""
    a = pilots.entries if isinstance(pilots, PilotMatrix) else pilots
    gamma = np.asarray(gamma, dtype=float)
    nz = np.flatnonzero(gamma)
    a_nz = a[:, nz]
    sigma = (a_nz * gamma[nz]) @ a_nz.conj().T
    sigma[np.diag_indices_from(sigma)] += sigma2
    return _hermitian_part(sigma)


def true_covariance(pilots: PilotMatrix, gamma: np.ndarray, sigma2: float) -> SampleCovariance:
    """Population covariance ``sum_k gamma_k a_k a_k^H + sigma2 I``."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (pilots.dim_ktot,):
        raise InvalidArgument(f"gamma must have length {pilots.dim_ktot}")
    if np.any(gamma < 0):
        raise InvalidArgument("gamma entries must be non-negative")
    if sigma2 < 0:
        raise InvalidArgument("sigma2 must be non-negative")
    return SampleCovariance(covariance_model(pilots, gamma, sigma2), None)
