"""Deterministic RNG substreams.

A single master seed is split into independent, named substreams so that
adding or removing one consumer (say, an extra Monte Carlo evaluation)
never perturbs the draws seen by any other consumer. Streams are derived
through ``numpy.random.SeedSequence`` with the stream name folded into the
entropy, which is stable across platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def _tag_ints(tag: str) -> tuple[int, ...]:
    # encode the tag as a tuple of 8-byte little-endian words
    data = tag.encode("utf-8")
    words = []
    for i in range(0, len(data), 8):
        words.append(int.from_bytes(data[i : i + 8], "little"))
    return tuple(words) if words else (0,)


def substream(seed: int, *tags) -> np.random.Generator:
    """Return a Generator for the substream named by ``tags`` under ``seed``.

    Tags may be strings or integers; the same (seed, tags) always yields the
    same stream, and distinct tag tuples yield statistically independent
    streams.
    """
    entropy: list[int] = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            entropy.extend(_tag_ints(t))
        else:
            entropy.append(int(t) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
