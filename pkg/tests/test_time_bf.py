import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdbeam.config import ArrayGeometry
from fdbeam.errors import StructuralError
from fdbeam.frames import ChannelFrame
from fdbeam.phantom import Phantom
from fdbeam.time_bf import beamform_time, delay_map


@given(t=st.floats(0, 1e-3), theta=st.floats(-1.5, 1.5))
def test_reference_element_is_identity(t, theta):
    assert delay_map(t, theta, 0.0) == t


def test_broadside_reduction():
    t, g = 80e-6, 7e-6
    assert delay_map(t, 0.0, g) == pytest.approx(0.5 * (t + math.sqrt(t * t + 4 * g * g)), rel=1e-15)


def test_delay_map_against_arbitrary_precision():
    mpmath.mp.dps = 50
    t, g = mpmath.mpf("100e-6"), mpmath.mpf("10e-6")
    th = mpmath.pi / 6
    exact = (t + mpmath.sqrt(t * t - 4 * g * t * mpmath.sin(th) + 4 * g * g)) / 2
    got = delay_map(100e-6, math.pi / 6, 10e-6)
    assert abs(got - float(exact)) <= 1e-12 * float(exact)


@settings(max_examples=60)
@given(gamma=st.floats(-3e-5, 3e-5), theta=st.floats(-1.4, 1.4))
def test_delay_map_bounds_and_monotone(gamma, theta):
    t = np.linspace(2 * abs(gamma), 2 * abs(gamma) + 3e-4, 400)
    tau = delay_map(t, theta, gamma)
    assert np.all(tau >= t / 2 - 1e-18)
    assert np.all(np.diff(tau) >= -1e-18)


def test_single_reference_element_passthrough(rng):
    geom = ArrayGeometry((0.0,), 1540.0, 0)
    from tests.conftest import small_setup
    from fdbeam.config import derive_grid
    cfg, _ = small_setup()
    grid = derive_grid(cfg, geom)
    row = rng.normal(size=(1, grid.num_samples))
    line = beamform_time(ChannelFrame(row, 0.3, grid.sample_rate), geom, grid)
    np.testing.assert_array_equal(line.samples, row[0])


def test_zero_frame_gives_zero_line(small):
    frame = ChannelFrame(np.zeros((8, small.num_samples)), 0.1, small.grid.sample_rate)
    assert not np.any(small.time_line(frame, 1).samples)


def test_shape_mismatch(small):
    frame = ChannelFrame(np.zeros((7, small.num_samples)), 0.0, small.grid.sample_rate)
    with pytest.raises(StructuralError, match="shape"):
        small.time_line(frame)


@pytest.mark.parametrize("upsample", [1, 8])
def test_linearity(small, rng, upsample):
    shape = (8, small.num_samples)
    a, b = rng.normal(size=shape), rng.normal(size=shape)
    alpha = 0.37
    f = lambda x: small.time_line(ChannelFrame(x, 0.2, 16e6), upsample).samples
    np.testing.assert_allclose(f(alpha * a + b), alpha * f(a) + f(b), atol=1e-10)


@pytest.mark.parametrize("theta", [0.0, 0.35, -0.5])
def test_single_scatterer_peak_and_gain(small, theta):
    q = 260
    frame = small.simulate(Phantom([q / small.grid.sample_rate], [1.0]), theta)
    ref_peak = np.max(np.abs(frame.samples[small.geom.reference_index]))
    native = small.time_line(frame, 1).samples
    dense = small.time_line(frame).samples
    assert abs(int(np.argmax(np.abs(native))) - q) <= 1
    assert abs(int(np.argmax(np.abs(dense))) - q) <= 1
    assert np.max(np.abs(dense)) >= 0.9 * ref_peak
    # linear interpolation at the native rate attenuates the carrier by at
    # worst cos(pi f0 / fs), reached at half-sample offsets
    worst = math.cos(math.pi * small.cfg.carrier_f0 / small.grid.sample_rate)
    assert np.max(np.abs(native)) >= worst * ref_peak
