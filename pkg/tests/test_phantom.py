import math

import numpy as np
import pytest

from fdbeam.errors import ConfigError, StructuralError
from fdbeam.frames import BeamformedLine, ChannelFrame, read_frame, read_line, write_frame
from fdbeam.phantom import (Phantom, PulseModel, load_phantom, make_reflector_phantom,
                            make_speckle_phantom, sample_pulse, simulate_channels)


def test_impulse_has_flat_spectrum(small):
    pulse = PulseModel(0.0, 1.0, envelope="impulse")
    h, hk = sample_pulse(pulse, small.grid)
    assert h[0] == 1.0 and np.count_nonzero(h) == 1
    np.testing.assert_allclose(hk, np.ones(small.num_samples))


def test_pulse_energy_outside_band_is_small(paper):
    _, hk = sample_pulse(paper.pulse, paper.grid)
    f = np.abs(paper.grid.frequencies)
    cfg = paper.cfg
    outside = np.abs(f - cfg.carrier_f0) > cfg.envelope_bandwidth / 2
    energy = np.abs(hk) ** 2
    assert energy[outside].sum() < 0.01 * energy.sum()


def test_pulse_spectrum_edge_level(paper):
    p = paper.pulse
    # amplitude spectrum of the Gaussian envelope at half the bandwidth
    level = math.exp(-0.5 * (p.bandwidth / 2 / p.sigma_f) ** 2)
    assert 20 * math.log10(level) == pytest.approx(-p.edge_db)


def test_reference_element_sees_reference_delay(small):
    geom, grid = small.geom, small.grid
    delay = 200 / grid.sample_rate
    for theta in (0.0, 0.4):
        frame = small.simulate(Phantom([delay], [1.0]), theta)
        row = frame.samples[geom.reference_index]
        expected = small.pulse(grid.time - delay)
        np.testing.assert_allclose(row, expected, atol=1e-15)


def test_on_axis_arrival_times(small):
    geom, grid = small.geom, small.grid
    t_l = 10e-6
    frame = small.simulate(Phantom([t_l], [1.0]), 0.0)
    m = 0
    gamma = geom.gammas[m]
    center = t_l / 2 + math.sqrt((t_l / 2) ** 2 + gamma ** 2)
    expected = small.pulse(grid.time - center)
    np.testing.assert_allclose(frame.samples[m], expected, atol=1e-12)


def test_superposition(small):
    a = Phantom([5e-6], [0.7])
    b = Phantom([20e-6], [-0.3])
    fa, fb = small.simulate(a, 0.2), small.simulate(b, 0.2)
    fab = small.simulate(a + b, 0.2)
    assert np.max(np.abs(fab.samples - fa.samples - fb.samples)) < 1e-12


def test_linearity_in_amplitude(small):
    a = make_speckle_phantom(1, 3.0, 0.2, small.grid, 1540.0)
    b = make_reflector_phantom(2, 2, small.grid, 2 * small.pulse.half_support)
    alpha = -1.7
    lhs = small.simulate(a.scaled(alpha) + b, 0.1).samples
    rhs = alpha * small.simulate(a, 0.1).samples + small.simulate(b, 0.1).samples
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_channel_rows_are_band_limited(small):
    ph = make_reflector_phantom(3, 2, small.grid, 2 * small.pulse.half_support)
    frame = small.simulate(ph, 0.3)
    spec = np.abs(np.fft.fft(frame.samples, axis=1)) ** 2
    f = np.abs(small.grid.frequencies)
    guard = 0.5e6
    inside = np.abs(f - small.cfg.carrier_f0) <= small.cfg.envelope_bandwidth / 2 + guard
    assert np.all(spec[:, inside].sum(axis=1) > 0.99 * spec.sum(axis=1))


def test_out_of_window_scatterer_reports_index(small):
    ph = Phantom([1e-6, 2 * small.grid.period], [1.0, 1.0])
    with pytest.raises(ConfigError, match="scatterer 1"):
        small.simulate(ph, 0.0)


def test_speckle_determinism_and_empty(small):
    a = make_speckle_phantom(7, 5.0, 0.1, small.grid, 1540.0)
    b = make_speckle_phantom(7, 5.0, 0.1, small.grid, 1540.0)
    np.testing.assert_array_equal(a.delays, b.delays)
    np.testing.assert_array_equal(a.amplitudes, b.amplitudes)
    assert len(make_speckle_phantom(7, 0.0, 0.1, small.grid, 1540.0)) == 0


def test_speckle_count_within_poisson_bound(paper):
    density = 5.0
    mean = density * 0.5 * 1540.0 * paper.grid.period * 1e3
    counts = [len(make_speckle_phantom(s, density, 0.1, paper.grid, 1540.0)) for s in range(100)]
    # the average of 100 Poisson draws has std sqrt(mean / 100)
    assert abs(np.mean(counts) - mean) < 3 * math.sqrt(mean / 100)
    assert all(abs(c - mean) < 5 * math.sqrt(mean) for c in counts)


def test_reflectors_are_separated(small):
    sep = 2 * small.pulse.half_support
    ph = make_reflector_phantom(4, 3, small.grid, sep)
    assert np.all(np.diff(ph.delays) > sep)
    assert np.all((ph.amplitudes >= 0.5) & (ph.amplitudes <= 1.0))


def test_load_phantom(tmp_path, small):
    p = tmp_path / "ph.toml"
    p.write_text('[[scatterer]]\nrange = "1 cm"\namplitude = 0.5\n\n'
                 '[[scatterer]]\ndelay = "12 us"\n\n[speckle]\nseed = 3\ndensity_per_mm = 1.0\n')
    ph = load_phantom(p, small.geom, small.grid)
    assert ph.delays[0] == pytest.approx(2 * 0.01 / 1540.0)
    assert ph.delays[1] == pytest.approx(12e-6)
    assert ph.amplitudes[0] == 0.5
    assert len(ph) > 2
    p.write_text('[[scatterer]]\namplitude = 1.0\n')
    with pytest.raises(ConfigError, match="scatterer\\[0\\]"):
        load_phantom(p, small.geom, small.grid)


def test_frame_round_trip(tmp_path, rng):
    samples = rng.normal(size=(3, 17)).astype(np.float32).astype(float)
    frame = ChannelFrame(samples, 0.25, 16e6)
    path = tmp_path / "f.snqb"
    write_frame(path, frame)
    back = read_frame(path)
    np.testing.assert_array_equal(back.samples, samples)
    assert back.theta == 0.25 and back.sample_rate == 16e6 and back.provenance == "file"
    raw = path.read_bytes()
    assert raw[:4] == b"SNQB"
    write_frame(path, BeamformedLine(samples[0], 0.25, 16e6))
    np.testing.assert_array_equal(read_line(path).samples, samples[0])


def test_frame_format_errors(tmp_path):
    path = tmp_path / "f.snqb"
    write_frame(path, ChannelFrame(np.zeros((2, 4)), 0.0, 1.0))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(StructuralError, match="expected"):
        read_frame(path)
    path.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(StructuralError, match="magic"):
        read_frame(path)
    write_frame(path, ChannelFrame(np.zeros((2, 4)), 0.0, 1.0))
    with pytest.raises(StructuralError, match="1 x N"):
        read_line(path)
