import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from aabcos.pooling import (PoolKind, PoolVariant, binomial_kernel, blurpool, flcpool, flcpool_fft,
                            highfreq_energy, strided_reduce)
from aabcos.tensor import Tensor

from conftest import check_grads

F64 = np.float64


def T(a):
    return Tensor(np.asarray(a, dtype=F64), dtype=F64)


def checkerboard(n):
    return np.where(np.add.outer(np.arange(n), np.arange(n)) % 2 == 0, 1.0, -1.0)


def pink_noise(seed, n=32):
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    r[0, 0] = 1.0
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / r
    return np.fft.ifft2(spec).real


@pytest.mark.parametrize("pool", [blurpool, flcpool])
def test_dc_preservation(pool):
    out = pool(T(np.full((1, 2, 16, 16), 0.7)))
    assert out.shape == (1, 2, 8, 8)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-12)


def test_blurpool_checkerboard_exactly_zero():
    out = blurpool(T(checkerboard(16)[None, None]))
    assert np.all(out.data == 0.0)


def test_blurpool_impulse_matches_direct_conv():
    x = np.zeros((9, 9))
    x[4, 4] = 1.0
    k = binomial_kernel()
    ref = ndimage.correlate(x, k, mode="mirror")[::2, ::2]  # numpy-style reflect
    out = blurpool(T(x[None, None])).data[0, 0]
    assert out.shape == (5, 5)
    np.testing.assert_allclose(out, ref, atol=1e-15)
    assert out[2, 2] == pytest.approx(0.25)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(3, 12), w=st.integers(3, 12), stride=st.integers(2, 3))
def test_blurpool_direct_conv_oracle(seed, h, w, stride):
    x = np.random.default_rng(seed).standard_normal((h, w))
    ref = ndimage.correlate(x, binomial_kernel(), mode="mirror")[::stride, ::stride]
    np.testing.assert_allclose(blurpool(T(x[None, None]), stride=stride).data[0, 0], ref, atol=1e-12)


def test_flc_super_nyquist_removed():
    x = np.tile(np.array([1.0, -1.0]), (16, 8))  # period-2 horizontal stripes
    out = flcpool(T(x[None, None])).data
    assert np.sum(out ** 2) < 1e-6 * np.sum(x ** 2)


@pytest.mark.parametrize("seed", range(20))
def test_flc_random_super_nyquist(seed):
    rng = np.random.default_rng(seed)
    n = 16
    yy, xx = np.mgrid[:n, :n]
    x = np.zeros((n, n))
    for _ in range(5):
        fy, fx = rng.integers(0, n // 2 + 1, size=2)
        if max(fy, fx) < 4:  # keep only content outside the retained block
            fx = rng.integers(4, n // 2 + 1)
        x += rng.standard_normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) / n + rng.uniform(0, 2 * np.pi))
    out = flcpool(T(x[None, None])).data
    assert np.sum(out ** 2) < 1e-6 * np.sum(x ** 2)


def test_flc_sub_nyquist_sinusoid():
    n = 16
    j = np.arange(n)
    x = np.tile(np.cos(2 * np.pi * j / 8 + 0.3), (n, 1))  # period 8
    out = flcpool(T(x[None, None])).data[0, 0]
    expected = x[::2, ::2]
    assert np.linalg.norm(out - expected) / np.linalg.norm(expected) < 1e-5


def test_flc_matrix_route_equals_fft_route(rng):
    x = rng.standard_normal((2, 3, 16, 12))
    np.testing.assert_allclose(flcpool(T(x)).data, flcpool_fft(x), atol=1e-12)


def test_flc_odd_size_reflect_pads():
    out = flcpool(T(np.ones((1, 1, 7, 9))))
    assert out.shape == (1, 1, 4, 5)
    assert out.meta["pad"] == (1, 1)
    np.testing.assert_allclose(out.data, 1.0, atol=1e-12)


@pytest.mark.parametrize("pool", [blurpool, flcpool, strided_reduce])
def test_linearity(pool, rng):
    x, y = rng.standard_normal((2, 1, 2, 16, 16))
    a, b = 1.7, -0.4
    lhs = pool(T(a * x + b * y)).data
    rhs = a * pool(T(x)).data + b * pool(T(y)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_strided_ramp():
    x = np.arange(16.0).reshape(4, 4)
    out = strided_reduce(T(x[None, None])).data[0, 0]
    np.testing.assert_array_equal(out, x[[0, 2]][:, [0, 2]])


def test_strided_checkerboard_aliases_to_constant():
    out = strided_reduce(T(checkerboard(8)[None, None])).data
    assert np.all(out == 1.0)


def test_strided_slicing_oracle(rng):
    x = rng.standard_normal((2, 3, 9, 7))
    np.testing.assert_array_equal(strided_reduce(T(x), 3).data, x[..., ::3, ::3])


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("pool", [blurpool, flcpool, strided_reduce])
def test_pool_grads(pool, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 6 + seed, 8))
    assert check_grads(pool, x, seed=seed) < 1e-3


def test_pool_variant_validation():
    with pytest.raises(ValueError):
        PoolVariant(PoolKind.BLURPOOL, stride=1)
    with pytest.raises(ValueError):
        PoolVariant(PoolKind.BLURPOOL, blur_kernel=np.ones((3, 3)))
    with pytest.raises(ValueError):
        PoolVariant(PoolKind.BLURPOOL, blur_kernel=np.array([[0.5, 0.6], [0.1, -0.2]]))


def test_highfreq_examples():
    assert highfreq_energy(np.full((16, 16), 3.0)) == 0.0
    assert highfreq_energy(checkerboard(16)) == pytest.approx(1.0)
    n = 32
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    bump = np.exp(-(yy ** 2 + xx ** 2) / (2 * (n / 4) ** 2))
    assert highfreq_energy(bump) < 0.05


def test_highfreq_degenerate():
    with pytest.raises(ValueError, match="degenerate map"):
        highfreq_energy(np.zeros((8, 8)))


def shift_inconsistency(pool, x):
    """Relative change of the pooled feature-map norm under a 1-pixel circular shift."""
    base = np.linalg.norm(pool(T(x[None, None])).data)
    diffs = [abs(np.linalg.norm(pool(T(np.roll(x, 1, axis=a)[None, None])).data) - base) / base
             for a in (0, 1)]
    return float(np.mean(diffs))


def test_shift_consistency_ordering():
    seeds = range(100)
    score = {name: np.mean([shift_inconsistency(pool, pink_noise(s)) for s in seeds])
             for name, pool in (("flc", flcpool), ("blur", blurpool), ("strided", strided_reduce))}
    assert score["flc"] <= score["blur"] < score["strided"]
