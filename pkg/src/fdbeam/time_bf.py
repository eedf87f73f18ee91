"""Delay-and-sum beamforming in the time domain.

This is the reference path the frequency-domain beamformer is checked
against. Each element signal is read at the aligned time ``tau_m(t)`` and the
aligned signals are averaged without apodization.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ArrayGeometry, GridSpec
from .errors import StructuralError
from .frames import BeamformedLine, ChannelFrame

__all__ = ["delay_map", "beamform_time"]


def delay_map(t, theta, gamma):
    """Aligned read time ``tau(t) = (t + sqrt(t^2 - 4 gamma t sin(theta) + 4 gamma^2)) / 2``.

    ``gamma`` is the element offset divided by the speed of sound. The
    square root is evaluated as ``hypot(t - 2 gamma sin, 2 gamma cos)``, a sum
    of squares without underflow, so ``gamma = 0`` returns ``t`` exactly.
    """
    t = np.asarray(t, dtype=float)
    s, c = math.sin(theta), math.cos(theta)
    return 0.5 * (t + np.hypot(t - 2.0 * gamma * s, 2.0 * gamma * c))


def _upsample(rows, factor):
    """Band-limited (periodic) interpolation of each row by an integer factor."""
    n = rows.shape[1]
    spec = np.fft.rfft(rows, axis=1)
    return np.fft.irfft(spec, n=n * factor, axis=1) * factor


def beamform_time(frame: ChannelFrame, geom: ArrayGeometry, grid: GridSpec, theta=None,
                  upsample: int = 1) -> BeamformedLine:
    """Average the delay-aligned element signals.

    Fractional read positions use linear interpolation between samples;
    reads outside the recorded window contribute zero. With ``upsample > 1``
    each row is first interpolated onto a finer grid by zero-padding its
    spectrum, so the linear step acts on a densely sampled signal.

    Raises
    ------
    StructuralError
        If the frame does not have one row per element and N samples per row.
    """
    m_count, n_count = geom.num_elements, grid.num_samples
    if frame.samples.shape != (m_count, n_count):
        raise StructuralError(
            f"frame shape {frame.samples.shape} does not match ({m_count}, {n_count})")
    if theta is None:
        theta = frame.theta
    rows = frame.samples if upsample == 1 else _upsample(frame.samples, upsample)
    length = rows.shape[1]
    n = np.arange(n_count, dtype=float)
    out = np.zeros(n_count)
    # positions are computed in samples so the reference element reads n exactly
    for m, gamma in enumerate(geom.gammas * grid.sample_rate):
        pos = delay_map(n, theta, gamma) * upsample
        inside = (pos >= 0) & (pos <= length - 1)
        i0 = np.floor(pos[inside]).astype(np.int64)
        frac = pos[inside] - i0
        i1 = np.minimum(i0 + 1, length - 1)
        row = rows[m]
        out[inside] += (1.0 - frac) * row[i0] + frac * row[i1]
    return BeamformedLine(out / m_count, float(theta), grid.sample_rate)
