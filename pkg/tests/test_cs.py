import numpy as np
import pytest

from fdbeam.cs import (build_measurement, choose_mu, delay_transform, noise_epsilon,
                       recover_analysis_l1, recover_omp)
from fdbeam.errors import ConfigError, StructuralError
from fdbeam.freq_bf import BeamSpectrum, synthesize_line
from fdbeam.image import envelope
from fdbeam.phantom import make_reflector_phantom


def _line_spectrum(pipe, delays, amps):
    n = pipe.num_samples
    q = np.asarray(delays)
    c = pipe.hk[pipe.kappa] * (np.exp(-2j * np.pi * np.outer(pipe.kappa, q) / n) @ np.asarray(amps))
    return BeamSpectrum(pipe.kappa, c, n, 0.0, pipe.grid.sample_rate)


def test_single_reflector_measurement_is_exponential(paper):
    q, b = 1234, 0.8
    mu = paper.mu(100)
    meas = build_measurement(_line_spectrum(paper, [q], [b]), paper.hk, mu)
    expected = b * np.exp(-2j * np.pi * mu * q / paper.num_samples)
    np.testing.assert_allclose(meas.values, expected, rtol=1e-9)


def test_zero_spectrum(paper):
    mu = paper.mu(100)
    spec = BeamSpectrum(paper.kappa, np.zeros(paper.kappa.size), paper.num_samples, 0.0)
    meas = build_measurement(spec, paper.hk, mu)
    assert not np.any(meas.values)
    sol = recover_omp(meas, 5)
    assert sol.support.size == 0 and sol.residual_norm == 0.0


def test_small_pulse_bins_rejected(paper):
    hk = paper.hk.copy()
    mu = paper.mu(100)
    hk[mu[3]] = 1e-9 * np.abs(hk).max()
    spec = _line_spectrum(paper, [500], [1.0])
    meas = build_measurement(spec, hk, mu)
    assert meas.rejected.tolist() == [mu[3]]
    assert meas.mu.size == 99


def test_mu_must_be_in_spectrum(paper):
    spec = _line_spectrum(paper, [500], [1.0])
    with pytest.raises(StructuralError):
        build_measurement(spec, paper.hk, [0, 1])


def test_choose_mu(paper):
    kappa = paper.kappa
    np.testing.assert_array_equal(choose_mu(kappa, kappa.size, "central", paper.hk), kappa)
    mu = choose_mu(kappa, 101, "central", paper.hk)
    peak = kappa[np.argmax(np.abs(paper.hk[kappa]))]
    assert mu[50] == peak and mu.size == 101
    assert np.all(np.diff(mu) == 1)
    uni = choose_mu(kappa, 10, "uniform")
    assert uni[0] == kappa[0] and uni[-1] == kappa[-1] and np.unique(uni).size == 10
    for bad in (0, -3, kappa.size + 1):
        with pytest.raises(ConfigError):
            choose_mu(kappa, bad)
    with pytest.raises(ConfigError):
        choose_mu(kappa, 10, "random")


def test_omp_single_reflector_exact(paper):
    mu = paper.mu(100)
    for q, b in [(400, 0.9), (1700, -0.55), (3000, 0.61)]:
        meas = build_measurement(_line_spectrum(paper, [q], [b]), paper.hk, mu)
        corr = np.abs(meas.atoms(np.arange(paper.num_samples)).conj().T @ meas.values)
        # brute force: the true delay is the unique maximizer
        assert np.argmax(corr) == q and np.sum(corr >= corr[q] * (1 - 1e-12)) == 1
        sol = recover_omp(meas, 1)
        assert sol.support.tolist() == [q]
        assert abs(sol.amplitudes[0] - b) < 1e-6 * abs(b)


def test_omp_residual_non_increasing(paper):
    mu = paper.mu(100)
    ph = make_reflector_phantom(5, 8, paper.grid, 2 * paper.pulse.half_support, on_grid=True)
    q = np.round(ph.delays * paper.grid.sample_rate).astype(int)
    meas = build_measurement(_line_spectrum(paper, q, ph.amplitudes), paper.hk, mu)
    sol = recover_omp(meas, 25)
    assert np.all(np.diff(sol.residual_history) <= 1e-12)
    assert sol.support.size == np.unique(sol.support).size <= 25


@pytest.mark.xfail(strict=True, reason="standard OMP misplaces atoms by a few samples when "
                   "neighbouring replicas overlap the sinc-like main lobe; see decisions log")
def test_omp_many_reflectors_exact(paper):
    mu = paper.mu(100)
    ph = make_reflector_phantom(9, 25, paper.grid, 2 * paper.pulse.half_support, on_grid=True)
    q = np.round(ph.delays * paper.grid.sample_rate).astype(int)
    sol = recover_omp(build_measurement(_line_spectrum(paper, q, ph.amplitudes), paper.hk, mu), 25)
    assert set(sol.support.tolist()) == set(q.tolist())


def test_omp_guards(paper):
    meas = build_measurement(_line_spectrum(paper, [500], [1.0]), paper.hk, paper.mu(10))
    with pytest.raises(ConfigError):
        recover_omp(meas, 0)
    with pytest.raises(ConfigError):
        recover_omp(meas, 6)


def test_omp_rank_deficiency_flag(paper, monkeypatch):
    import fdbeam.cs as cs
    real = np.linalg.lstsq
    calls = []

    def fake(a, b, rcond=None):
        sol, res, rank, sv = real(a, b, rcond=rcond)
        calls.append(a.shape[1])
        return sol, res, (rank - 1 if a.shape[1] == 2 else rank), sv

    monkeypatch.setattr(cs.np.linalg, "lstsq", fake)
    meas = build_measurement(_line_spectrum(paper, [500, 2000], [1.0, 0.7]), paper.hk,
                             paper.mu(100))
    sol = recover_omp(meas, 2)
    assert sol.rank_deficient and sol.support.size == 1


def test_analysis_fixed_point(paper, rng):
    c = rng.normal(size=paper.kappa.size) + 1j * rng.normal(size=paper.kappa.size)
    spec = BeamSpectrum(paper.kappa, c * paper.hk[paper.kappa], paper.num_samples, 0.0)
    meas = build_measurement(spec, paper.hk, paper.kappa)
    sol = recover_analysis_l1(meas, paper.kappa, 0.0)
    assert np.abs(sol.coeffs - c).max() <= 1e-8 * np.abs(c).max()
    assert sol.feasible


def test_analysis_single_reflector_peak(paper):
    q = 1500
    meas = build_measurement(_line_spectrum(paper, [q], [1.0]), paper.hk, paper.mu(100))
    sol = recover_analysis_l1(meas, paper.kappa, 0.0)
    env = envelope(synthesize_line(sol.spectrum(paper.hk, paper.num_samples)))
    assert abs(int(np.argmax(env)) - q) <= 1
    assert sol.feasible and sol.residual <= 1e-9


def test_analysis_feasible_with_radius(paper, rng):
    mu = paper.mu(100)
    spec = _line_spectrum(paper, [700, 2100], [1.0, -0.6])
    meas = build_measurement(spec, paper.hk, mu)
    eps = 0.05 * np.linalg.norm(meas.values)
    sol = recover_analysis_l1(meas, paper.kappa, eps)
    assert sol.feasible and sol.residual <= eps + 1e-9
    hist = sol.objective_history
    assert sol.objective == pytest.approx(np.abs(delay_transform(sol.coeffs, paper.kappa,
                                                                 paper.num_samples)).sum())
    assert hist.size == sol.iterations + 1
    with pytest.raises(ConfigError):
        recover_analysis_l1(meas, paper.kappa, -1.0)


def test_analysis_iteration_cap_reported(paper):
    meas = build_measurement(_line_spectrum(paper, [700], [1.0]), paper.hk, paper.mu(100))
    sol = recover_analysis_l1(meas, paper.kappa, 0.0, max_iter=3)
    assert sol.iterations == 3


def test_noise_epsilon():
    assert noise_epsilon(0.5, 8) == pytest.approx(2.0)
