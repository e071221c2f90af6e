"""Deterministic random-number plumbing shared across the package.

Every stochastic component draws from a counter-based Philox generator keyed
by a ``(seed, stream_id)`` pair, so a stream's output depends only on those
two integers and never on execution order, chunking, or thread count.  Seeds
for distinct purposes (forward trajectories, reverse paths, training, data
splits) are derived from one master seed by XOR-ing it with a label hash,
which keeps purposes from colliding in the Philox key space.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "keyed_generator", "normal_stream"]

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, purpose: str) -> int:
    """Derive a purpose-specific 64-bit seed from a master seed.

    The rule is ``master_seed XOR h(purpose)`` where ``h`` is the first
    8 bytes (little-endian) of SHA-256 of the UTF-8 label.  The same
    ``(master_seed, purpose)`` pair always yields the same seed, and distinct
    labels decorrelate even for adjacent master seeds.
    """
    if not isinstance(master_seed, int) or isinstance(master_seed, bool):
        raise ValueError("master_seed must be an integer")
    if master_seed < 0 or master_seed > _MASK64:
        raise ValueError("master_seed must fit in 64 unsigned bits")
    label = int.from_bytes(
        hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little"
    )
    return (master_seed ^ label) & _MASK64


def keyed_generator(seed: int, stream_id: int) -> np.random.Generator:
    """Return a Generator over a Philox stream keyed by (seed, stream_id)."""
    if seed < 0 or seed > _MASK64:
        raise ValueError("seed must fit in 64 unsigned bits")
    if stream_id < 0 or stream_id > _MASK64:
        raise ValueError("stream_id must fit in 64 unsigned bits")
    key = np.array([seed, stream_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def normal_stream(seed: int, stream_id: int, shape) -> np.ndarray:
    """Standard-normal draws from the (seed, stream_id) Philox stream.

    Draws fill ``shape`` in C order, so an element's value is addressed by
    (seed, stream_id, flat position) alone; regenerating any prefix of the
    stream reproduces it bit for bit.
    """
    return keyed_generator(seed, stream_id).standard_normal(shape)
