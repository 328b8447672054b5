"""
Counter-based normal variates.

Every Gaussian increment is a pure function of ``(seed, stream, index)``: the
Philox4x32-10 block cipher (Salmon et al., SC'11) maps a 128-bit counter under a
64-bit key to four 32-bit words, which a Box-Muller transform turns into two
standard normals. Paths therefore draw the same numbers no matter how they are
batched or which worker simulates them.

Counter layout: ``(pair_lo, pair_hi, stream_lo, stream_hi)`` where ``pair`` is
``index // 2``; the key is the seed.
"""
from __future__ import annotations

import numpy as np

__all__ = ["philox4x32", "normals", "uniforms", "derive_seed"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_LO = np.uint64(0xFFFFFFFF)
_SH = np.uint64(32)
_MASK64 = (1 << 64) - 1


def philox4x32(c0, c1, c2, c3, key: int, rounds: int = 10):
    """Philox4x32 bijection on broadcastable 32-bit counter words.

    Returns four ``uint64`` arrays holding 32-bit outputs.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in (c0, c1, c2, c3)))
    c0, c1, c2, c3 = (c.copy() for c in (c0, c1, c2, c3))
    k0 = int(key) & 0xFFFFFFFF
    k1 = (int(key) >> 32) & 0xFFFFFFFF
    p0 = np.empty_like(c0)
    p1 = np.empty_like(c0)
    for _ in range(rounds):
        np.multiply(c0, _M0, out=p0)
        np.multiply(c2, _M1, out=p1)
        # new = (hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0)
        np.right_shift(p1, _SH, out=c0)
        c0 ^= c1
        c0 ^= np.uint64(k0)
        np.bitwise_and(p1, _LO, out=c1)
        np.right_shift(p0, _SH, out=c2)
        c2 ^= c3
        c2 ^= np.uint64(k1)
        np.bitwise_and(p0, _LO, out=c3)
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def _unit(hi, lo):
    # 53-bit uniform on the open interval (0, 1)
    return ((hi >> np.uint64(5)).astype(np.float64) * 67108864.0
            + (lo >> np.uint64(6)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def _stream_words(streams):
    s = np.asarray(streams, dtype=np.uint64)
    return s & _LO, s >> _SH


def uniforms(seed: int, streams, start: int, count: int) -> np.ndarray:
    """Open-interval uniforms ``U[start:start+count]`` per stream; shape (count, n_streams)."""
    s_lo, s_hi = _stream_words(streams)
    idx = np.arange(start, start + count, dtype=np.uint64)[:, None]
    w = philox4x32(idx & _LO, idx >> _SH, s_lo[None, :], s_hi[None, :] | np.uint64(1 << 31),
                   seed & _MASK64)
    return _unit(w[0], w[1])


def normals(seed: int, streams, start: int, count: int) -> np.ndarray:
    """Standard normals ``Z[start:start+count]`` for each stream.

    Parameters
    ----------
    seed : int
        64-bit key.
    streams : array_like of int
        Stream identifiers (< 2**63), one column of output per stream.
    start, count : int
        Range of per-stream variate indices.

    Returns
    -------
    ndarray of shape (count, len(streams))
    """
    streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
    if count <= 0:
        return np.empty((0, streams.size))
    s_lo, s_hi = _stream_words(streams)
    p_start = start // 2
    p_stop = (start + count + 1) // 2
    pairs = np.arange(p_start, p_stop, dtype=np.uint64)[:, None]
    w0, w1, w2, w3 = philox4x32(pairs & _LO, pairs >> _SH, s_lo[None, :], s_hi[None, :],
                                seed & _MASK64)
    u1 = _unit(w0, w1)
    u2 = _unit(w2, w3)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty((2 * len(pairs), streams.size))
    z[0::2] = r * np.cos(ang)
    z[1::2] = r * np.sin(ang)
    off = start - 2 * p_start
    return z[off:off + count]


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 64-bit key for a sub-computation labelled by integer tags."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
