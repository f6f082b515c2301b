"""Random number generation and seed derivation.

All randomness in the package flows through :func:`make_rng`, which builds a
numpy ``Generator`` on the counter-based Philox bit generator.  Independent
streams for Monte Carlo trials are obtained by hashing a master seed together
with a list of labels (:func:`derive_seed`), so a trial's stream depends only
on its own labels and never on scheduling or worker count.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Union

import numpy as np

SeedLike = Union[int, np.random.Generator]

_U64 = (1 << 64) - 1


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed`` (passes generators through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an int or numpy Generator, got {type(seed).__name__}")
    if seed < 0 or seed > _U64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(int(seed)))


def _encode_label(label) -> bytes:
    # Type-tagged, length-prefixed so that e.g. 1 and "1" never collide.
    if isinstance(label, (bool, np.bool_)):
        return b"b" + (b"\x01" if label else b"\x00")
    if isinstance(label, (int, np.integer)):
        value = int(label)
        raw = value.to_bytes((value.bit_length() + 8) // 8 or 1, "little", signed=True)
        return b"i" + struct.pack("<I", len(raw)) + raw
    if isinstance(label, (float, np.floating)):
        return b"f" + struct.pack("<d", float(label))
    if isinstance(label, str):
        raw = label.encode("utf-8")
        return b"s" + struct.pack("<I", len(raw)) + raw
    raise TypeError(f"unsupported seed label type {type(label).__name__}")


def derive_seed(master: int, labels: Iterable = ()) -> int:
    """Derive a 64-bit seed from ``master`` and a sequence of int/str/float labels.

    Uses BLAKE2b over a canonical byte encoding, so values are identical on
    every platform and Python version.
    """
    if master < 0 or master > _U64:
        raise ValueError("master seed must fit in an unsigned 64-bit integer")
    h = hashlib.blake2b(digest_size=8, person=b"covad-seed-v1")
    h.update(struct.pack("<Q", int(master)))
    for label in labels:
        h.update(_encode_label(label))
    return int.from_bytes(h.digest(), "little")
