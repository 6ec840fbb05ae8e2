"""Counter-based random number generation.

Every stochastic draw in the package is a pure function of
``(master_seed, stream_id, step_key, mode_index)``.  The generator is
Philox4x32-10, evaluated lane-parallel in numpy, so ensemble members never
contend and a draw can be reproduced bit-for-bit from its key alone.
Normals come from the inverse CDF applied to a 53-bit uniform built from
two output words.

Step keys are unsigned.  Path steps use ``STEP_KEY_OFFSET + absolute step
index`` so that negative absolute indices (pullback starts far in the
past) stay representable; initial-condition draws use a disjoint key
range below the offset.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# Philox4x32 multipliers and Weyl key increments.
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)

#: Path draws at absolute step n are keyed STEP_KEY_OFFSET + n.
STEP_KEY_OFFSET = 1 << 62
#: Key used for initial-ensemble draws; disjoint from any path key.
INIT_DRAW_KEY = 1 << 61
#: Key used for test-function / probe draws; disjoint from the above.
PROBE_DRAW_KEY = 3 << 59


def philox4x32(c0, c1, c2, c3, key0, key1):
    """One Philox4x32-10 block per lane.

    Counter words are uint64 arrays holding 32-bit values; the key is a
    pair of scalar 32-bit values.  Returns the four 32-bit output words.
    """
    x0 = np.asarray(c0, dtype=np.uint64) & _MASK32
    x1 = np.asarray(c1, dtype=np.uint64) & _MASK32
    x2 = np.asarray(c2, dtype=np.uint64) & _MASK32
    x3 = np.asarray(c3, dtype=np.uint64) & _MASK32
    k0 = np.uint64(key0) & _MASK32
    k1 = np.uint64(key1) & _MASK32
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * x0
        p1 = _M1 * x2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        x0 = hi1 ^ x1 ^ k0
        x1 = lo1
        x2 = hi0 ^ x3 ^ k1
        x3 = lo0
    return x0, x1, x2, x3


def _uniforms(master_seed, step_key, stream_ids, mode_ids):
    """53-bit uniforms in (0, 1), one per (stream, mode) lane pair."""
    seed = np.uint64(master_seed)
    key0 = seed & _MASK32
    key1 = (seed >> np.uint64(32)) & _MASK32
    step = np.uint64(step_key)
    streams = np.asarray(stream_ids, dtype=np.uint64)
    modes = np.asarray(mode_ids, dtype=np.uint64)
    if np.any(streams > _MASK32):
        raise ValueError("stream_id exceeds 32-bit range")
    c0 = np.broadcast_to(modes, np.broadcast_shapes(streams.shape, modes.shape))
    c1 = np.broadcast_to(streams, c0.shape)
    c2 = np.full(c0.shape, step & _MASK32, dtype=np.uint64)
    c3 = np.full(c0.shape, (step >> np.uint64(32)) & _MASK32, dtype=np.uint64)
    y0, y1, _, _ = philox4x32(c0, c1, c2, c3, key0, key1)
    bits = (y0 << np.uint64(32)) | y1
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def normal_block(master_seed, step_key, n_streams, n_modes, scale=1.0,
                 stream_offset=0):
    """(n_streams, n_modes) array of N(0, scale^2) draws.

    Row ``j`` is bit-identical to the draws of stream ``stream_offset + j``
    in isolation, so block and per-stream sampling agree exactly.
    """
    streams = (np.arange(n_streams, dtype=np.uint64)
               + np.uint64(stream_offset))[:, None]
    modes = np.arange(n_modes, dtype=np.uint64)[None, :]
    u = _uniforms(master_seed, step_key, streams, modes)
    return ndtri(u) * float(scale)


def normals_for_stream(master_seed, step_key, stream_id, n_modes, scale=1.0):
    """N(0, scale^2) draws for a single stream; one value per mode."""
    return normal_block(master_seed, step_key, 1, n_modes, scale,
                        stream_offset=stream_id)[0]


def uniform_block(master_seed, step_key, n_streams, n_modes, low=0.0, high=1.0):
    """(n_streams, n_modes) uniforms on [low, high), same keying scheme."""
    streams = np.arange(n_streams, dtype=np.uint64)[:, None]
    modes = np.arange(n_modes, dtype=np.uint64)[None, :]
    u = _uniforms(master_seed, step_key, streams, modes)
    return low + (high - low) * u


def path_step_key(step_index):
    """Key for the path draw at (possibly negative) absolute step index."""
    n = int(step_index)
    if not -(1 << 60) < n < (1 << 60):
        raise ValueError("absolute step index out of keyable range")
    return STEP_KEY_OFFSET + n
