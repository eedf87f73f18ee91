"""Pulse model and point-scatterer channel simulation.

Scatterers are placed along the transmit beam. A scatterer with reference
delay ``t_l`` sits at range ``c t_l / 2``; its echo reaches element ``m`` at
``t_l / 2 + d_m / c`` where ``d_m`` is the receive path length. Channel samples
are evaluated from the closed-form pulse at fractional times, so the
simulation carries no interpolation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ArrayGeometry, GridSpec, ImagingConfig, parse_quantity
from .errors import ConfigError
from .frames import ChannelFrame

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "PulseModel",
    "Phantom",
    "sample_pulse",
    "simulate_channels",
    "make_speckle_phantom",
    "make_reflector_phantom",
    "load_phantom",
]

# Gaussian envelope is truncated at this many standard deviations (g < 3e-11).
_SUPPORT_SIGMAS = 7.0


@dataclass(frozen=True)
class PulseModel:
    """Transmit pulse ``h(t) = g(t) cos(2 pi f0 t)`` centered at ``t = 0``.

    With the Gaussian envelope, the amplitude spectrum of ``g`` drops to
    ``-edge_db`` at ``+-bandwidth/2``. ``envelope="impulse"`` gives a unit
    sample at ``t = 0`` (flat spectrum), useful for checks.
    """

    carrier_f0: float
    bandwidth: float
    edge_db: float = 40.0
    envelope: str = "gaussian"

    def __post_init__(self):
        if self.envelope not in ("gaussian", "impulse"):
            raise ConfigError(f"envelope: unknown shape {self.envelope!r}")
        if self.envelope == "gaussian" and not (self.bandwidth > 0 and self.edge_db > 0):
            raise ConfigError("bandwidth: gaussian envelope needs positive bandwidth and edge level")

    @classmethod
    def from_config(cls, cfg: ImagingConfig):
        return cls(cfg.carrier_f0, cfg.envelope_bandwidth, cfg.pulse_edge_db)

    @property
    def sigma_f(self) -> float:
        """Standard deviation of the Gaussian amplitude spectrum, Hz."""
        return 0.5 * self.bandwidth / math.sqrt(2.0 * math.log(10.0 ** (self.edge_db / 20.0)))

    @property
    def sigma_t(self) -> float:
        return 1.0 / (2.0 * math.pi * self.sigma_f)

    @property
    def half_support(self) -> float:
        """Half-width beyond which the envelope is treated as zero, seconds."""
        if self.envelope == "impulse":
            return 0.0
        return _SUPPORT_SIGMAS * self.sigma_t

    def envelope_at(self, t):
        t = np.asarray(t, dtype=float)
        if self.envelope == "impulse":
            return (t == 0).astype(float)
        g = np.exp(-0.5 * (t / self.sigma_t) ** 2)
        return np.where(np.abs(t) <= self.half_support, g, 0.0)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.envelope_at(t) * np.cos(2.0 * np.pi * self.carrier_f0 * t)


def sample_pulse(pulse: PulseModel, grid: GridSpec):
    """Sample the pulse on the line grid, wrapped periodically around ``n = 0``.

    Returns ``(h, hk)``: ``h[n] = h(t_n)`` with ``t_n = n/fs`` for the first
    half of the window and ``(n - N)/fs`` for the second, so a replica
    delayed by ``q`` samples is ``h[(n - q) mod N]``; ``hk`` is its length-N DFT.
    """
    n = np.arange(grid.num_samples)
    wrapped = np.where(n < (grid.num_samples + 1) // 2, n, n - grid.num_samples)
    h = pulse(wrapped / grid.sample_rate)
    return h, np.fft.fft(h)


@dataclass(frozen=True)
class Phantom:
    """Point scatterers for one transmit direction.

    ``delays`` are reference-element round-trip times in seconds.
    ``lateral`` (meters, optional) displaces a scatterer perpendicular to the
    beam axis; on-axis scatterers follow the single-line model exactly.
    """

    delays: np.ndarray
    amplitudes: np.ndarray
    lateral: np.ndarray | None = None

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.delays, dtype=float))
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        if d.shape != a.shape or d.ndim != 1:
            raise ConfigError("phantom: delays and amplitudes must be 1-D and equally long")
        if not np.all(np.isfinite(a)):
            raise ConfigError("phantom: amplitudes must be finite")
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "amplitudes", a)
        if self.lateral is not None:
            lat = np.atleast_1d(np.asarray(self.lateral, dtype=float))
            if lat.shape != d.shape:
                raise ConfigError("phantom: lateral offsets must match delays")
            object.__setattr__(self, "lateral", lat)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0))

    @classmethod
    def from_ranges(cls, ranges, amplitudes, speed_of_sound, lateral=None):
        return cls(2.0 * np.asarray(ranges, dtype=float) / speed_of_sound, amplitudes, lateral)

    def __len__(self):
        return self.delays.size

    def lateral_or_zero(self):
        return np.zeros_like(self.delays) if self.lateral is None else self.lateral

    def __add__(self, other):
        lateral = None
        if self.lateral is not None or other.lateral is not None:
            lateral = np.concatenate([self.lateral_or_zero(), other.lateral_or_zero()])
        return Phantom(np.concatenate([self.delays, other.delays]),
                       np.concatenate([self.amplitudes, other.amplitudes]), lateral)

    def scaled(self, alpha):
        return Phantom(self.delays, alpha * self.amplitudes, self.lateral)

    def check_window(self, grid: GridSpec):
        bad = np.nonzero(~((self.delays > 0) & (self.delays < grid.period)))[0]
        if bad.size:
            i = int(bad[0])
            raise ConfigError(
                f"phantom: scatterer {i} delay {self.delays[i]:.6g} s outside (0, {grid.period:.6g})")


def _arrival_times(phantom, geom, theta):
    """Echo arrival time at every element, shape (L, M)."""
    c = geom.speed_of_sound
    rho = 0.5 * c * phantom.delays
    lat = phantom.lateral_or_zero()
    s, co = math.sin(theta), math.cos(theta)
    x = rho * s + lat * co
    z = rho * co - lat * s
    d = np.hypot(x[:, None] - geom.offsets[None, :], z[:, None])
    return rho[:, None] / c + d / c, d


def simulate_channels(phantom: Phantom, pulse: PulseModel, geom: ArrayGeometry, grid: GridSpec,
                      theta: float, spreading: bool = False, noise_snr_db=None, seed=None,
                      chunk: int = 256) -> ChannelFrame:
    """Synthesize the raw element signals for one transmit direction.

    Parameters
    ----------
    spreading : bool
        Scale each echo by ``1 cm / d_m`` (spherical spreading on receive).
    noise_snr_db : float, optional
        Add white Gaussian noise at this SNR relative to the mean frame power.
    seed : int, optional
        Seed for the noise generator.
    """
    phantom.check_window(grid)
    m_count, n_count = geom.num_elements, grid.num_samples
    fs = grid.sample_rate
    out = np.zeros(m_count * n_count)
    half = pulse.half_support
    width = 2 * int(math.ceil(half * fs)) + 2
    taps = np.arange(width)
    rows = np.arange(m_count)[None, :, None] * n_count

    for lo in range(0, len(phantom), chunk):
        part = Phantom(phantom.delays[lo:lo + chunk], phantom.amplitudes[lo:lo + chunk],
                       None if phantom.lateral is None else phantom.lateral[lo:lo + chunk])
        centers, dist = _arrival_times(part, geom, theta)
        amp = part.amplitudes[:, None] * np.ones_like(centers)
        if spreading:
            amp = amp * (1e-2 / dist)
        start = np.ceil((centers - half) * fs).astype(np.int64)
        n = start[..., None] + taps
        vals = amp[..., None] * pulse(n / fs - centers[..., None])
        keep = (n >= 0) & (n < n_count)
        flat = (rows + n)[keep]
        out += np.bincount(flat, weights=vals[keep], minlength=out.size)

    samples = out.reshape(m_count, n_count)
    if noise_snr_db is not None:
        power = np.mean(samples ** 2)
        sigma = math.sqrt(power / 10.0 ** (noise_snr_db / 10.0)) if power > 0 else 0.0
        samples = samples + np.random.default_rng(seed).normal(0.0, sigma, samples.shape)
    return ChannelFrame(samples, theta, fs)


def make_speckle_phantom(seed, density, amp_std, grid: GridSpec, speed_of_sound: float) -> Phantom:
    """Diffuse scatterers with ``density`` per mm of range over the window.

    The count is Poisson with mean ``density * (c * period / 2 in mm)``;
    delays are uniform over the window and amplitudes zero-mean normal.
    """
    if density < 0:
        raise ConfigError(f"density: must be non-negative, got {density}")
    if density == 0:
        return Phantom.empty()
    rng = np.random.default_rng(seed)
    range_mm = 0.5 * speed_of_sound * grid.period * 1e3
    count = rng.poisson(density * range_mm)
    delays = rng.uniform(0.0, grid.period, count)
    delays = delays[delays > 0]
    amps = rng.normal(0.0, amp_std, delays.size)
    return Phantom(delays, amps)


def make_reflector_phantom(seed, count, grid: GridSpec, min_separation: float,
                           amp_range=(0.5, 1.0), margin=None, on_grid=False) -> Phantom:
    """``count`` strong reflectors, consecutive delays more than ``min_separation`` apart.

    ``margin`` keeps reflectors that far from both window edges (defaults to
    ``min_separation``); ``on_grid`` puts delays on whole samples. Placements
    are uniform over all admissible configurations: sorted uniform slack plus
    the fixed gaps.
    """
    rng = np.random.default_rng(seed)
    if count == 0:
        return Phantom.empty()
    if margin is None:
        margin = min_separation
    fs = grid.sample_rate
    if on_grid:
        lo = int(math.ceil(margin * fs))
        hi = int(math.floor((grid.period - margin) * fs))
        gap = int(math.floor(min_separation * fs)) + 1
        slack = hi - lo - (count - 1) * gap
        if slack < 0:
            raise ConfigError(f"phantom: cannot place {count} reflectors {min_separation:g} s apart")
        offsets = np.sort(rng.integers(0, slack + 1, count))
        delays = (lo + offsets + np.arange(count) * gap) / fs
    else:
        lo, hi = margin, grid.period - margin
        gap = min_separation * (1 + 1e-9)
        slack = hi - lo - (count - 1) * gap
        if slack < 0:
            raise ConfigError(f"phantom: cannot place {count} reflectors {min_separation:g} s apart")
        delays = lo + np.sort(rng.uniform(0.0, slack, count)) + np.arange(count) * gap
    amps = rng.uniform(amp_range[0], amp_range[1], count)
    return Phantom(delays, amps)


def load_phantom(path, geom: ArrayGeometry, grid: GridSpec) -> Phantom:
    """Read a TOML scatterer list.

    Each ``[[scatterer]]`` gives ``range`` or ``delay`` (with units),
    ``amplitude`` and optionally ``lateral``. An optional ``[speckle]`` table
    with ``seed``, ``density_per_mm`` and ``amp_std`` adds diffuse scatterers.
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    c = geom.speed_of_sound
    delays, amps, lateral = [], [], []
    for i, entry in enumerate(doc.get("scatterer", [])):
        name = f"scatterer[{i}]"
        if "delay" in entry:
            delays.append(parse_quantity(entry["delay"], "time", name + ".delay"))
        elif "range" in entry:
            delays.append(2.0 * parse_quantity(entry["range"], "length", name + ".range") / c)
        else:
            raise ConfigError(f"{name}: needs 'range' or 'delay'")
        amps.append(float(entry.get("amplitude", 1.0)))
        lat = entry.get("lateral")
        lateral.append(0.0 if lat is None else parse_quantity(lat, "length", name + ".lateral"))
    phantom = Phantom(np.array(delays), np.array(amps),
                      np.array(lateral) if any(lateral) else None)
    speckle = doc.get("speckle")
    if speckle:
        phantom = phantom + make_speckle_phantom(
            int(speckle.get("seed", 0)), float(speckle.get("density_per_mm", 0.0)),
            float(speckle.get("amp_std", 0.1)), grid, c)
    phantom.check_window(grid)
    return phantom
