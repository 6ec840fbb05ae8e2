import numpy as np

from mvfhn import rng
from mvfhn.fields import sample_increment_block, sample_increments


def test_philox_reference_vectors():
    # published Philox4x32-10 reference outputs
    y = rng.philox4x32([0], [0], [0], [0], 0, 0)
    assert [int(v[0]) for v in y] == [0x6627E8D5, 0xE169C58D,
                                      0xBC57AC4C, 0x9B00DBD8]
    m = 0xFFFFFFFF
    y = rng.philox4x32([m], [m], [m], [m], m, m)
    assert [int(v[0]) for v in y] == [0x408F276D, 0x41C83B0E,
                                      0xA20BC7C6, 0x6D5451FD]
    y = rng.philox4x32([0x243F6A88], [0x85A308D3], [0x13198A2E],
                       [0x03707344], 0xA4093822, 0x299F31D0)
    assert [int(v[0]) for v in y] == [0xD16CFE09, 0x94FDCCEB,
                                      0x5001E420, 0x24126EA1]


def test_increments_deterministic():
    a = sample_increments(8, 1e-3, stream_id=3, step_index=17, master_seed=9)
    b = sample_increments(8, 1e-3, stream_id=3, step_index=17, master_seed=9)
    assert np.array_equal(a.dW, b.dW)
    c = sample_increments(8, 1e-3, stream_id=3, step_index=18, master_seed=9)
    assert not np.array_equal(a.dW, c.dW)


def test_block_rows_match_streams():
    block = sample_increment_block(8, 1e-3, 16, step_index=5, master_seed=2)
    for j in (0, 7, 15):
        single = sample_increments(8, 1e-3, j, 5, 2)
        assert np.array_equal(block[j], single.dW)


def test_negative_step_indices_supported():
    a = sample_increments(4, 1e-2, 0, -40000, 11)
    b = sample_increments(4, 1e-2, 0, -39999, 11)
    assert np.all(np.isfinite(a.dW)) and not np.array_equal(a.dW, b.dW)


def test_moments_match_normal_law():
    # one mode, many steps: CLT bounds on mean and variance
    dt = 0.25
    n = 10**6
    draws = rng.normal_block(7, rng.path_step_key(0), n, 1,
                             np.sqrt(dt))[:, 0]
    assert abs(draws.mean()) < 4.0 * np.sqrt(dt / n)
    assert abs(draws.var() / dt - 1.0) < 0.02


def test_streams_uncorrelated():
    n = 10**5
    block = rng.normal_block(13, rng.path_step_key(3), 2, n)
    corr = np.corrcoef(block[0], block[1])[0, 1]
    assert abs(corr) < 0.01
