import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.rng import derive_seed, normals, philox4x32, uniforms

U = np.uint64

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), 0, (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, 0xFFFFFFFFFFFFFFFF, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), 0x299F31D0A4093822,
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr, key, expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = philox4x32(*(U(c) for c in ctr), key)
    assert tuple(int(v) for v in out) == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**40), st.integers(0, 500),
       st.integers(1, 40), st.integers(0, 40))
def test_normals_independent_of_window(seed, stream, start, count, shift):
    """Variate ``i`` of a stream is the same however the range is cut."""
    whole = normals(seed, [stream], start, count + shift)
    part = normals(seed, [stream], start + shift, count)
    np.testing.assert_array_equal(whole[shift:], part)


def test_normals_independent_of_stream_batch():
    a = normals(7, [3, 11, 12], 10, 5)
    b = normals(7, [11], 10, 5)
    np.testing.assert_array_equal(a[:, 1], b[:, 0])


def test_normal_moments():
    z = normals(123, np.arange(200), 0, 1000).ravel()
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / z.size)
    assert abs(np.mean(z ** 4) - 3) < 0.05


def test_uniforms_open_interval():
    u = uniforms(5, np.arange(64), 0, 512)
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)


def test_streams_and_seeds_differ():
    assert not np.array_equal(normals(1, [0], 0, 8), normals(1, [1], 0, 8))
    assert not np.array_equal(normals(1, [0], 0, 8), normals(2, [0], 0, 8))


def test_derive_seed_deterministic_and_distinct():
    assert derive_seed(9, 1) == derive_seed(9, 1)
    assert len({derive_seed(9, 1), derive_seed(9, 2), derive_seed(10, 1), derive_seed(9)}) == 4
