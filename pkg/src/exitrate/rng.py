"""Counter-based normal variates keyed by ``(seed, path_index, step_index)``.

Philox4x32-10 (Salmon et al., SC'11) maps a 128-bit counter and a 64-bit key
to 128 random bits with no state.  Each call feeds one Box-Muller pair, so
step ``2k`` and ``2k + 1`` of a path share a counter.  Any path can be
regenerated in isolation, independent of how paths are scheduled.
"""

import numba as nb
import numpy as np

_MASK = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_S32 = np.uint64(32)
_TWO_PI = 2.0 * np.pi


@nb.njit(nogil=True, cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds; every argument is a uint64 holding 32 bits."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = (p1 >> _S32) ^ c1 ^ k0
        n2 = (p0 >> _S32) ^ c3 ^ k1
        c0, c1, c2, c3 = n0, p1 & _MASK, n2, p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(nogil=True, cache=True)
def normal_pair(seed, path_index, pair_index):
    """Two independent N(0, 1) draws for steps ``2*pair_index`` and ``+1``."""
    s = np.uint64(seed)
    p = np.uint64(path_index)
    q = np.uint64(pair_index)
    w0, w1, w2, w3 = philox4x32(q & _MASK, q >> _S32, p & _MASK, p >> _S32,
                                s & _MASK, s >> _S32)
    # 53-bit uniforms; u1 in (0, 1] keeps the log finite
    u1 = 1.0 - ((w0 >> np.uint64(5)) * 67108864.0 + (w1 >> np.uint64(6))) / 9007199254740992.0
    u2 = ((w2 >> np.uint64(5)) * 67108864.0 + (w3 >> np.uint64(6))) / 9007199254740992.0
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)


@nb.njit(nogil=True, cache=True)
def _standard_normals(seed, path_index, start, count):
    """``count`` normals for steps ``start, start+1, ...`` of one path."""
    out = np.empty(count)
    for i in range(count):
        step = start + i
        z0, z1 = normal_pair(seed, path_index, step >> 1)
        out[i] = z0 if (step & 1) == 0 else z1
    return out


def standard_normals(seed: int, path_index: int, start: int, count: int) -> np.ndarray:
    """``count`` normals for steps ``start, start+1, ...`` of one path."""
    return _standard_normals(np.uint64(seed), np.uint64(path_index), start, count)


def normal(seed: int, path_index: int, step_index: int) -> float:
    # uint64 keys: seeds up to 2**64 - 1 do not fit numba's default int64
    z0, z1 = normal_pair(np.uint64(seed), np.uint64(path_index), np.uint64(step_index >> 1))
    return z0 if step_index % 2 == 0 else z1
