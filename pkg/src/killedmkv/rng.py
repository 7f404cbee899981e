"""Counter-based random streams.

Every draw is addressed by ``(seed, purpose, particle, slot)``. A stream key is
derived from the 64-bit seed and a purpose string with SHA-256; the Philox
counter of particle ``i`` starts at ``i * stride`` so a block of particles can be
generated by any worker in any order and produce the same numbers.

Key derivation: ``sha256(f"{seed}/{purpose}")``, first 16 bytes read as two
little-endian uint64 words, used as the Philox-4x64 key.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import ndtri

_WORDS_PER_COUNTER = 4
_CHUNK = 8192


def derive_key(seed: int, purpose: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(seed) & 0xFFFFFFFFFFFFFFFF}/{purpose}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)


def _counter(start: int) -> np.ndarray:
    words = [(start >> (64 * j)) & 0xFFFFFFFFFFFFFFFF for j in range(4)]
    return np.array(words, dtype=np.uint64)


def _raw_block(key, first, count, per_particle):
    stride = -(-per_particle // _WORDS_PER_COUNTER)
    bitgen = np.random.Philox(key=key, counter=_counter(first * stride))
    raw = bitgen.random_raw(count * stride * _WORDS_PER_COUNTER)
    return raw.reshape(count, stride * _WORDS_PER_COUNTER)[:, :per_particle]


def uniforms(seed, purpose, n_particles, per_particle, threads=1):
    """Open-interval uniforms of shape ``(n_particles, per_particle)``."""
    key = derive_key(seed, purpose)
    out = np.empty((n_particles, per_particle))
    starts = list(range(0, n_particles, _CHUNK))

    def fill(s):
        e = min(s + _CHUNK, n_particles)
        raw = _raw_block(key, s, e - s, per_particle)
        out[s:e] = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    return out


def normals(seed, purpose, n_particles, per_particle, threads=1):
    """Standard normals by inverse CDF of :func:`uniforms`."""
    return ndtri(uniforms(seed, purpose, n_particles, per_particle, threads))


def generator(seed, purpose) -> np.random.Generator:
    """Sequential generator for small auxiliary draws (probe points, trials)."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, purpose)))
