import math

import numpy as np

from zsal.rng import SplitMix64, fnv1a64

M64 = (1 << 64) - 1


def sequential_splitmix(seed, n):
    """Textbook stateful SplitMix64 on Python ints."""
    state, out = seed, []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def test_known_first_output():
    assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


def test_matches_sequential_reference_across_calls():
    gen = SplitMix64(123456789)
    got = [int(v) for v in gen.next_u64(5)] + [int(v) for v in gen.next_u64(7)]
    assert got == sequential_splitmix(123456789, 12)


def test_uniform_and_normal_derivation():
    raw = sequential_splitmix(42, 4)
    u = [(z >> 11) * 2.0**-53 for z in raw]
    assert np.array_equal(SplitMix64(42).uniform(4), u)
    r = math.sqrt(-2.0 * math.log1p(-u[0]))
    expected = [r * math.cos(2 * math.pi * u[1]), r * math.sin(2 * math.pi * u[1])]
    np.testing.assert_allclose(SplitMix64(42).normal(2), expected, rtol=1e-15)


def test_odd_normal_counts_are_prefixes():
    a = SplitMix64(7).normal(5)
    b = SplitMix64(7).normal(6)
    assert np.array_equal(a, b[:5])


def test_fnv1a64_vectors():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C
