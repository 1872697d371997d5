"""Seed derivation and random generators.

All randomness in the package flows from a single integer seed. Sub-seeds are
derived by hashing the parent seed together with string/int tags (for example
``derive_seed(seed, "mask", utt_id, epoch)``), so the stream an utterance sees
does not depend on batch layout or worker count.

Generators are numpy ``Philox`` instances (a counter-based generator) keyed
directly with the derived 64-bit value.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    """Hash ``parts`` into an unsigned 64-bit seed.

    Parts are rendered with ``repr`` and joined with a unit separator, so
    ``derive_seed(1, "a")`` and ``derive_seed("1", "a")`` differ.
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))
