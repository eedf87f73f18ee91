"""Beamforming in the frequency domain.

Channel data enter only through their DFT coefficients on the index set
``nu``. Beamformed coefficients on the pulse band ``kappa`` are formed with
the retained kernel entries, and the line is recovered by a zero-padded
inverse DFT.

Scaling convention: DFT everywhere. With ``Q`` the length-N DFT of the
sampled kernel, ``c_k = (1/(M N)) sum_m sum_{n in nu(k)} phi_m[n] Q_{k,m}[k - n]``
so ``c_k`` is the DFT of the time-domain beamformed line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .config import GridSpec, ImagingConfig
from .errors import ConfigError, NumericalError, StructuralError
from .frames import BeamformedLine, ChannelFrame
from .kernel import QKernelTable
from .phantom import PulseModel, sample_pulse

__all__ = [
    "band_select",
    "channel_band",
    "pulse_bands",
    "ChannelSpectra",
    "BeamSpectrum",
    "channel_dft",
    "beamform_freq",
    "synthesize_line",
    "budget_row",
]

_ENERGY_COVERAGE = 0.999


def band_select(hk, threshold, coverage=_ENERGY_COVERAGE) -> np.ndarray:
    """One-sided pulse band ``kappa``.

    Bins ``0..N//2`` with ``|h_k| >= threshold * max|h_k|`` are closed to a
    contiguous range, which is then widened one bin at a time on the side
    with more energy until it holds ``coverage`` of the one-sided energy.

    Raises
    ------
    ConfigError
        If ``threshold`` is outside (0, 1) or no bin passes it.
    """
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold: must lie in (0, 1), got {threshold}")
    hk = np.asarray(hk)
    mag = np.abs(hk[: hk.size // 2 + 1])
    peak = mag.max() if mag.size else 0.0
    if peak <= 0:
        raise ConfigError("band: pulse spectrum is identically zero")
    above = np.flatnonzero(mag >= threshold * peak)
    lo, hi = int(above[0]), int(above[-1])
    power = mag ** 2
    total = power.sum()
    inside = power[lo:hi + 1].sum()
    while inside < coverage * total:
        left = power[lo - 1] if lo > 0 else -1.0
        right = power[hi + 1] if hi + 1 < mag.size else -1.0
        if left >= right:
            lo -= 1
            inside += left
        else:
            hi += 1
            inside += right
    return np.arange(lo, hi + 1)


def channel_band(hk, threshold):
    """Inclusive ``(lo, hi)`` range of channel bins that can carry echo energy."""
    kappa = band_select(hk, threshold)
    return int(kappa[0]), int(kappa[-1])


def pulse_bands(cfg: ImagingConfig, grid: GridSpec, pulse: PulseModel | None = None):
    """``(hk, kappa, channel_range)`` for a configuration."""
    pulse = pulse or PulseModel.from_config(cfg)
    _, hk = sample_pulse(pulse, grid)
    return hk, band_select(hk, cfg.band_threshold), channel_band(hk, cfg.channel_threshold)


@dataclass(frozen=True)
class ChannelSpectra:
    """Per-element DFT coefficients ``values[m, i] = phi_m[nu[i]]``."""

    nu: np.ndarray
    values: np.ndarray
    num_samples: int
    theta: float = 0.0

    def columns(self, indices) -> np.ndarray:
        """Positions of ``indices`` in ``nu``; a missing index is a structural error."""
        indices = np.asarray(indices, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.nu, indices), 0, max(self.nu.size - 1, 0))
        if self.nu.size == 0:
            missing = np.unique(indices)
        else:
            missing = np.unique(indices[self.nu[pos] != indices])
        if missing.size:
            raise StructuralError(
                f"channel spectra miss {missing.size} required bins: {missing[:20].tolist()}")
        return pos


@dataclass(frozen=True)
class BeamSpectrum:
    """Beamformed-line DFT coefficients ``coeffs`` on the bins ``indices``."""

    indices: np.ndarray
    coeffs: np.ndarray
    num_samples: int
    theta: float
    sample_rate: float = 1.0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_samples):
            raise StructuralError("spectrum indices outside 0..N-1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=complex))

    def restrict(self, indices) -> "BeamSpectrum":
        pos = np.searchsorted(self.indices, indices)
        return BeamSpectrum(np.asarray(indices), self.coeffs[pos], self.num_samples,
                            self.theta, self.sample_rate)

    @classmethod
    def of_line(cls, line: BeamformedLine, indices) -> "BeamSpectrum":
        """DFT of a line restricted to ``indices``."""
        spec = np.fft.fft(line.samples)
        idx = np.asarray(indices, dtype=np.int64)
        return cls(idx, spec[idx], line.samples.size, line.theta, line.sample_rate)


def channel_dft(frame: ChannelFrame, nu) -> ChannelSpectra:
    """Length-N DFT of every element row, kept on ``nu`` only."""
    nu = np.unique(np.asarray(nu, dtype=np.int64))
    n = frame.num_samples
    if nu.size and (nu[0] < 0 or nu[-1] >= n):
        raise StructuralError(f"nu: indices must lie in 0..{n - 1}")
    full = scipy.fft.fft(frame.samples, axis=1)
    return ChannelSpectra(nu, full[:, nu], n, frame.theta)


def beamform_freq(spectra: ChannelSpectra, table: QKernelTable, kappa=None,
                  sample_rate: float = 1.0) -> BeamSpectrum:
    """Beamformed coefficients on ``kappa`` (all table bins by default).

    Raises
    ------
    StructuralError
        If the spectra lack a bin some ``nu(k)`` needs, or the element counts differ.
    """
    if spectra.values.shape[0] != table.num_elements:
        raise StructuralError(
            f"spectra have {spectra.values.shape[0]} elements, table {table.num_elements}")
    if spectra.num_samples != table.num_samples:
        raise StructuralError("spectra and kernel table disagree on N")
    rows = np.arange(table.kappa.size) if kappa is None else table.rows_for(kappa)
    needed = table.nu(rows)
    spectra.columns(needed)
    m_count, n = table.num_elements, table.num_samples
    out = np.empty(rows.size, dtype=complex)
    for out_i, i in enumerate(rows):
        cols = spectra.columns(table.channel_indices(i))
        out[out_i] = np.vdot(np.conj(table.block(i)).ravel(), spectra.values[:, cols].ravel())
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite beamformed coefficients at theta={table.theta:.6g}")
    return BeamSpectrum(table.kappa[rows], out / (m_count * n), n, table.theta, sample_rate)


def synthesize_line(spec: BeamSpectrum) -> BeamformedLine:
    """Real line from one-sided band coefficients.

    Bins above N/2 are folded onto their conjugate partners; the DC and
    Nyquist bins keep only their real part. Everything outside the band is
    zero.
    """
    n = spec.num_samples
    half = np.zeros(n // 2 + 1, dtype=complex)
    idx, vals = spec.indices, spec.coeffs
    upper = idx > n // 2
    half[idx[~upper]] = vals[~upper]
    half[n - idx[upper]] = np.conj(vals[upper])
    line = scipy.fft.irfft(half, n=n)
    return BeamformedLine(line, spec.theta, spec.sample_rate)


def budget_row(table: QKernelTable, mu=None) -> dict:
    """Sample-budget entry: theta, |kappa|, |nu|, ratio, N, reduction factor."""
    return table.stats(mu)
