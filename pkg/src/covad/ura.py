"""Unsourced random access: outer tree code over GF(2) plus covariance-based inner decoding.

Each user splits a ``B``-bit payload over ``S`` slots.  Slot ``s`` carries
``b_s = J - p_s`` fresh payload bits followed by ``p_s`` parity bits, each a
mod-2 inner product of all payload bits sent in earlier slots with a
pseudo-random binary vector shared by every user.  The resulting ``J``-bit
block selects the column of a common ``L x 2^J`` codebook sent in that slot.

The receiver runs the ML detector per slot, thresholds the estimate into a
list of active block indices, and stitches the lists back into payloads
along the paths of the tree that satisfy every parity check.

Payloads and blocks are Python ints; payload bits are consumed MSB first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .detectors import DetectorOptions, run_detector
from .errors import InvalidArgument
from .metrics import equal_error_point, roc_curve
from .seeding import SeedLike, derive_seed, make_rng
from .system_model import (
    PilotMatrix,
    ReceivedBlock,
    complex_normal,
    generate_pilots,
    sample_covariance,
)

PATH_CAP = 100_000


@dataclass(frozen=True)
class TreeCodeSpec:
    """Outer tree code.

    ``parity_profile[s]`` parity bits are appended in slot ``s``; the first
    slot carries no parity.  ``payload_bits`` must equal
    ``sum(J - p_s)``.  Parity masks are drawn once from ``parity_seed``.
    """

    s_slots: int
    j_bits: int
    parity_profile: Tuple[int, ...]
    payload_bits: int
    parity_seed: int = 0

    def __post_init__(self):
        prof = tuple(int(p) for p in self.parity_profile)
        object.__setattr__(self, "parity_profile", prof)
        if self.s_slots < 1 or self.j_bits < 1:
            raise InvalidArgument("need at least one slot and one bit per block")
        if len(prof) != self.s_slots:
            raise InvalidArgument(f"parity profile has {len(prof)} entries, expected {self.s_slots}")
        if prof[0] != 0:
            raise InvalidArgument("the first slot carries no parity bits")
        if any(p < 0 or p > self.j_bits for p in prof):
            raise InvalidArgument("parity bits per slot must lie in [0, J]")
        if sum(self.j_bits - p for p in prof) != self.payload_bits:
            raise InvalidArgument(
                f"profile carries {sum(self.j_bits - p for p in prof)} payload bits, "
                f"expected {self.payload_bits}"
            )
        object.__setattr__(self, "_masks", self._draw_masks())

    @property
    def info_bits(self) -> Tuple[int, ...]:
        return tuple(self.j_bits - p for p in self.parity_profile)

    @property
    def outer_rate(self) -> float:
        return self.payload_bits / (self.s_slots * self.j_bits)

    def _draw_masks(self) -> Tuple[Tuple[int, ...], ...]:
        # masks[s][i] selects the earlier payload bits feeding parity bit i of slot s.
        rng = make_rng(int(self.parity_seed))
        masks = []
        used = 0
        for b, p in zip(self.info_bits, self.parity_profile):
            bits = rng.integers(0, 2, size=(p, used), dtype=np.uint8)
            masks.append(tuple(int("".join(map(str, row)) or "0", 2) for row in bits))
            used += b
        return tuple(masks)

    def parity(self, s: int, prefix: int) -> int:
        """Parity bits of slot ``s`` given the payload bits of slots ``< s``."""
        out = 0
        for mask in self._masks[s]:
            out = (out << 1) | ((prefix & mask).bit_count() & 1)
        return out


def table_one_spec(l: int = 100, parity_seed: int = 0) -> TreeCodeSpec:
    """Outer-code presets for slot lengths ``L`` in {100, 200, 320}."""
    presets = {
        100: (32, 12, [0] + [9] * 28 + [12] * 3, 96),
        200: (16, 15, [0, 7, 8, 8] + [9] * 10 + [13, 14], 100),
        320: (10, 19, [0] + [9] * 8 + [19], 99),
    }
    if l not in presets:
        raise InvalidArgument(f"no preset for L={l}; choose from {sorted(presets)}")
    s, j, prof, b = presets[l]
    return TreeCodeSpec(s, j, tuple(prof), b, parity_seed)


@dataclass(frozen=True)
class FrameMessage:
    bits: int
    blocks: Tuple[int, ...]


@dataclass
class SlotLists:
    lists: List[Set[int]]


@dataclass
class DecodedList:
    messages: Set[int]
    surviving_paths_trace: List[int]
    truncated: bool = False


def tree_encode(payload: int, spec: TreeCodeSpec) -> FrameMessage:
    """Split ``payload`` into ``S`` blocks of ``J`` bits with appended parity."""
    payload = int(payload)
    if payload < 0 or payload >> spec.payload_bits:
        raise InvalidArgument(f"payload must fit in {spec.payload_bits} bits")
    remaining = spec.payload_bits
    prefix = 0
    blocks = []
    for s, (b, p) in enumerate(zip(spec.info_bits, spec.parity_profile)):
        remaining -= b
        info = (payload >> remaining) & ((1 << b) - 1)
        blocks.append((info << p) | spec.parity(s, prefix))
        prefix = (prefix << b) | info
    return FrameMessage(payload, tuple(blocks))


def tree_decode(slot_lists, spec: TreeCodeSpec, path_cap: int = PATH_CAP) -> DecodedList:
    """Breadth-first stitching of per-slot lists into payloads.

    A path survives slot ``s`` when the parity part of a listed block equals
    the parity recomputed from the path's payload bits.  If more than
    ``path_cap`` paths survive a slot the extra paths are dropped and the
    result is flagged as truncated.
    """
    lists = slot_lists.lists if isinstance(slot_lists, SlotLists) else list(slot_lists)
    if len(lists) != spec.s_slots:
        raise InvalidArgument(f"need {spec.s_slots} slot lists, got {len(lists)}")
    top = 1 << spec.j_bits
    for entries in lists:
        for v in entries:
            if not 0 <= int(v) < top:
                raise InvalidArgument(f"block index {v} outside [0, 2^J)")
    truncated = False
    paths = sorted(set(int(v) for v in lists[0]))
    if len(paths) > path_cap:
        paths, truncated = paths[:path_cap], True
    trace = [len(paths)]
    for s in range(1, spec.s_slots):
        b, p = spec.info_bits[s], spec.parity_profile[s]
        by_parity: Dict[int, List[int]] = {}
        for v in sorted(set(int(v) for v in lists[s])):
            by_parity.setdefault(v & ((1 << p) - 1), []).append(v >> p)
        extended = []
        for prefix in paths:
            for info in by_parity.get(spec.parity(s, prefix), ()):
                extended.append((prefix << b) | info)
        if len(extended) > path_cap:
            extended, truncated = extended[:path_cap], True
        paths = extended
        trace.append(len(paths))
    return DecodedList(set(paths), trace, truncated)


def inner_encode(block_index: int, codebook: PilotMatrix) -> np.ndarray:
    n = codebook.dim_ktot
    if not 0 <= block_index < n:
        raise InvalidArgument(f"block index {block_index} outside [0, {n})")
    return codebook.column(block_index)


def ura_transmit_slot(
    messages: Sequence[FrameMessage],
    s: int,
    codebook: PilotMatrix,
    lsfc,
    m: int,
    sigma2: float,
    seed: SeedLike,
) -> ReceivedBlock:
    """Slot ``s`` observation ``sum_k sqrt(g_k) a_{i_k(s)} h_k^T + Z`` with fresh fading."""
    if m < 1:
        raise InvalidArgument("m must be positive")
    rng = make_rng(seed)
    l = codebook.dim_l
    idx = np.array([msg.blocks[s] for msg in messages], dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= codebook.dim_ktot):
        raise InvalidArgument("block index outside the codebook")
    g = np.broadcast_to(np.asarray(lsfc, dtype=float), (idx.size,))
    h = complex_normal(rng, (idx.size, m))
    z = complex_normal(rng, (l, m), sigma2) if sigma2 > 0 else np.zeros((l, m), dtype=np.complex128)
    y = codebook.entries[:, idx] @ (np.sqrt(g)[:, None] * h) + z
    # A noiseless block is still a valid observation; give it a token variance.
    return ReceivedBlock(y, sigma2 if sigma2 > 0 else np.finfo(float).tiny)


def ura_default_options(seed: int = 0) -> DetectorOptions:
    return DetectorOptions(max_epochs=30, tolerance=1e-3, seed=seed)


def ura_detect_slot(block: ReceivedBlock, codebook: PilotMatrix, sigma2: float, detector_options=None) -> np.ndarray:
    """ML estimate of the per-codeword received powers in one slot (no box constraint)."""
    opts = detector_options or ura_default_options()
    return run_detector(codebook, sample_covariance(block), sigma2, opts, "ml").gamma_hat


def select_indices(gamma_hat, nu_s: Optional[float] = None, top: Optional[int] = None) -> Set[int]:
    """``{r : gamma_hat_r >= nu_s}``, or the ``top`` largest entries."""
    gamma_hat = np.asarray(gamma_hat)
    if top is not None:
        top = min(top, gamma_hat.size)
        return set(int(i) for i in np.argsort(-gamma_hat, kind="stable")[:top])
    if nu_s is None:
        raise InvalidArgument("need a threshold or a list size")
    return set(int(i) for i in np.flatnonzero(gamma_hat >= nu_s))


def ura_decode_slot(block, codebook, sigma2: float, nu_s: float, detector_options=None) -> Set[int]:
    return select_indices(ura_detect_slot(block, codebook, sigma2, detector_options), nu_s)


def sigma2_from_ebn0(ebn0_db: float, spec: TreeCodeSpec, l: int, g: float = 1.0) -> float:
    """Noise variance giving ``Eb/N0`` for per-symbol energy ``g``: ``g / (R Eb/N0)``, ``R = B/(S L)``."""
    rate = spec.payload_bits / (spec.s_slots * l)
    return g / (rate * 10.0 ** (ebn0_db / 10.0))


def random_payloads(rng: np.random.Generator, count: int, bits: int) -> List[int]:
    nbytes = (bits + 7) // 8
    mask = (1 << bits) - 1
    return [int.from_bytes(rng.bytes(nbytes), "big") & mask for _ in range(count)]


def calibrate_threshold(
    spec: TreeCodeSpec,
    codebook: PilotMatrix,
    ka: int,
    m: int,
    ebn0_db: float,
    seed: SeedLike,
    pilot_slots: int = 4,
    detector_options=None,
    lsfc: float = 1.0,
) -> float:
    """Single global threshold equalizing slot-level misdetection and false alarm.

    Runs the detector on ``pilot_slots`` simulated slots with ``ka`` random
    blocks each and returns the equal-error threshold of the pooled ROC.
    When the two classes separate, the middle of the gap is used.
    """
    rng = make_rng(seed)
    sigma2 = sigma2_from_ebn0(ebn0_db, spec, codebook.dim_l, lsfc)
    hats, truths = [], []
    for _ in range(pilot_slots):
        blocks = rng.integers(0, codebook.dim_ktot, size=ka)
        msgs = [FrameMessage(0, (int(b),)) for b in blocks]
        block = ura_transmit_slot(msgs, 0, codebook, lsfc, m, sigma2, rng)
        hats.append(ura_detect_slot(block, codebook, sigma2, detector_options))
        truths.append(set(int(b) for b in blocks))
    eer = equal_error_point(roc_curve(hats, truths, 1.0))
    return eer.nu


@dataclass
class UraFrameResult:
    p_md: float
    p_fa: float
    decoded: int
    max_paths: int
    truncated: bool
    seed: int = 0

    @property
    def pe(self) -> float:
        return self.p_md + self.p_fa

    def csv_row(self, ka, m, ebn0_db) -> dict:
        return {
            "seed": self.seed, "ka": ka, "m": m, "ebn0_db": ebn0_db,
            "p_md": self.p_md, "p_fa": self.p_fa, "max_paths": self.max_paths,
        }


def message_error_rates(sent: Sequence[int], decoded: Iterable[int]) -> Tuple[float, float]:
    """Per-user misdetection and false-alarm fraction of the output list."""
    out = set(decoded)
    sent_set = set(sent)
    p_md = sum(1 for msg in sent if msg not in out) / len(sent) if sent else 0.0
    p_fa = len(out - sent_set) / len(out) if out else 0.0
    return p_md, p_fa


def ura_end_to_end(
    spec: TreeCodeSpec,
    codebook: Optional[PilotMatrix],
    ka: int,
    m: int,
    ebn0_db: float,
    thresholds,
    seed: int,
    l: Optional[int] = None,
    detector_options=None,
    delta: Optional[int] = None,
    lsfc: float = 1.0,
    noiseless: bool = False,
) -> UraFrameResult:
    """One frame: encode, transmit every slot, detect, stitch, count errors.

    ``codebook=None`` draws a fresh ``l x 2^J`` codebook from the frame seed.
    ``thresholds`` is one value or one per slot; when ``delta`` is given the
    ``ka + delta`` largest entries per slot are kept instead.
    """
    if ka < 0:
        raise InvalidArgument("ka must be non-negative")
    if codebook is None:
        if l is None:
            raise InvalidArgument("need a codebook or its length l")
        codebook = generate_pilots(l, 1 << spec.j_bits, derive_seed(seed, ["codebook"]))
    if codebook.dim_ktot != 1 << spec.j_bits:
        raise InvalidArgument("codebook must have 2^J columns")
    per_slot = np.broadcast_to(np.asarray(thresholds if thresholds is not None else np.nan, dtype=float), (spec.s_slots,))
    if delta is None and np.any(np.isnan(per_slot)):
        raise InvalidArgument("need thresholds or delta")
    rng = make_rng(derive_seed(seed, ["payloads"]))
    payloads = random_payloads(rng, ka, spec.payload_bits)
    msgs = [tree_encode(p, spec) for p in payloads]
    sigma2 = 0.0 if noiseless else sigma2_from_ebn0(ebn0_db, spec, codebook.dim_l, lsfc)
    lists = []
    opts = detector_options or ura_default_options(seed=derive_seed(seed, ["detector"]) & 0xFFFFFFFF)
    for s in range(spec.s_slots):
        if noiseless:
            lists.append(set(msg.blocks[s] for msg in msgs))
            continue
        block = ura_transmit_slot(msgs, s, codebook, lsfc, m, sigma2, derive_seed(seed, ["slot", s]))
        gamma_hat = ura_detect_slot(block, codebook, sigma2, opts)
        top = None if delta is None else ka + delta
        lists.append(select_indices(gamma_hat, per_slot[s], top))
    decoded = tree_decode(SlotLists(lists), spec)
    p_md, p_fa = message_error_rates(payloads, decoded.messages)
    return UraFrameResult(p_md, p_fa, len(decoded.messages), max(decoded.surviving_paths_trace),
                          decoded.truncated, seed)


def write_frames_csv(path, rows: Sequence[dict]) -> None:
    """Frame results: ``seed, ka, m, ebn0_db, p_md, p_fa, max_paths``."""
    cols = ["seed", "ka", "m", "ebn0_db", "p_md", "p_fa", "max_paths"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in cols})
