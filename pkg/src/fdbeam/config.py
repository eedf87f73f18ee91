"""Imaging setup: array geometry, acquisition parameters and the sampling grid.

All quantities are SI (meters, seconds, Hz, radians). Config files carry an
explicit unit on every dimensional value, e.g. ``carrier = 3.1 MHz``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError

__all__ = [
    "ArrayGeometry",
    "ImagingConfig",
    "GridSpec",
    "derive_grid",
    "parse_quantity",
    "load_config",
    "default_config_path",
    "paper_setup",
]


@dataclass(frozen=True)
class ArrayGeometry:
    """Linear array along x with the reference element at the origin.

    Parameters
    ----------
    element_offsets : tuple of float
        Signed distance of each element from the reference element, meters.
    speed_of_sound : float
        Propagation speed, m/s.
    reference_index : int
        Index of the reference element; its offset must be exactly zero.
    """

    element_offsets: tuple
    speed_of_sound: float
    reference_index: int

    def __post_init__(self):
        offsets = tuple(float(d) for d in self.element_offsets)
        object.__setattr__(self, "element_offsets", offsets)
        if len(offsets) < 1:
            raise ConfigError("elements: need at least one element")
        if not self.speed_of_sound > 0:
            raise ConfigError(f"speed_of_sound: must be positive, got {self.speed_of_sound}")
        if not 0 <= self.reference_index < len(offsets):
            raise ConfigError(f"reference_index: {self.reference_index} outside 0..{len(offsets) - 1}")
        if offsets[self.reference_index] != 0.0:
            raise ConfigError("reference_index: reference element offset must be exactly 0")

    @classmethod
    def linear(cls, num_elements, pitch, speed_of_sound, reference_index=None):
        """Uniform array; the reference defaults to element ``num_elements // 2``."""
        if num_elements < 1:
            raise ConfigError(f"elements: need at least one element, got {num_elements}")
        if reference_index is None:
            reference_index = num_elements // 2
        offsets = (np.arange(num_elements) - reference_index) * float(pitch)
        return cls(tuple(offsets), speed_of_sound, reference_index)

    @property
    def num_elements(self) -> int:
        return len(self.element_offsets)

    @property
    def offsets(self) -> np.ndarray:
        return np.asarray(self.element_offsets)

    @property
    def gammas(self) -> np.ndarray:
        """Element offsets expressed as one-way travel times, seconds."""
        return self.offsets / self.speed_of_sound


@dataclass(frozen=True)
class ImagingConfig:
    depth: float
    carrier_f0: float
    envelope_bandwidth: float
    sample_rate: float
    directions: tuple
    dynamic_range_db: float = 60.0
    # pulse spectrum level at carrier +- bandwidth/2
    pulse_edge_db: float = 40.0
    # kappa: one-sided bins within this many dB of the pulse spectrum peak
    band_floor_db: float = 30.0
    # bins where channel data can carry energy, used when sizing nu(k)
    channel_floor_db: float = 60.0
    kernel_eps: float = 1e-2
    time_upsample: int = 8

    def __post_init__(self):
        object.__setattr__(self, "directions", tuple(float(t) for t in self.directions))

    @property
    def thetas(self) -> np.ndarray:
        return np.asarray(self.directions)

    @property
    def band_threshold(self) -> float:
        return 10.0 ** (-self.band_floor_db / 20.0)

    @property
    def channel_threshold(self) -> float:
        return 10.0 ** (-self.channel_floor_db / 20.0)


@dataclass(frozen=True)
class GridSpec:
    """Sampling grid of one receive line.

    ``duration`` is the physical two-way window 2r/c. ``period`` is the DFT
    period N/fs actually covered by the samples; every Fourier relation uses
    ``period`` so that bin k is exactly frequency k/period.
    """

    duration: float
    num_samples: int
    sample_rate: float
    time: np.ndarray = field(repr=False, compare=False)

    @property
    def period(self) -> float:
        return self.num_samples / self.sample_rate

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.fftfreq(self.num_samples, 1.0 / self.sample_rate)

    def bin_of(self, frequency):
        """Nearest DFT bin index of a frequency in Hz."""
        return int(round(frequency * self.period))


def _validate(cfg: ImagingConfig, geom: ArrayGeometry):
    c = geom.speed_of_sound
    for name, value in (("depth", cfg.depth), ("sample_rate", cfg.sample_rate),
                        ("speed_of_sound", c)):
        if not (value > 0 and math.isfinite(value)):
            raise ConfigError(f"{name}: must be positive and finite, got {value}")
    if cfg.carrier_f0 < 0:
        raise ConfigError(f"carrier: must be non-negative, got {cfg.carrier_f0}")
    if not cfg.envelope_bandwidth > 0:
        raise ConfigError(f"bandwidth: must be positive, got {cfg.envelope_bandwidth}")
    if not cfg.carrier_f0 + cfg.envelope_bandwidth / 2 < cfg.sample_rate / 2:
        raise ConfigError(
            "bandwidth: passband carrier + bandwidth/2 = "
            f"{cfg.carrier_f0 + cfg.envelope_bandwidth / 2:g} Hz is not below "
            f"Nyquist {cfg.sample_rate / 2:g} Hz")
    th = cfg.thetas
    if th.size and (np.any(np.abs(th) >= np.pi / 2)):
        raise ConfigError("directions: every direction must lie in (-pi/2, pi/2)")
    if th.size > 1 and np.any(np.diff(th) <= 0):
        raise ConfigError("directions: must be strictly increasing")
    if not 0 < cfg.kernel_eps < 1:
        raise ConfigError(f"kernel_eps: must lie in (0, 1), got {cfg.kernel_eps}")
    if cfg.time_upsample < 1:
        raise ConfigError(f"time_upsample: must be >= 1, got {cfg.time_upsample}")
    if not cfg.dynamic_range_db > 0:
        raise ConfigError(f"dynamic_range: must be positive, got {cfg.dynamic_range_db}")


def derive_grid(cfg: ImagingConfig, geom: ArrayGeometry) -> GridSpec:
    """Derive the window length and sample grid of one line.

    ``N = floor(T * fs)`` with ``T = 2 r / c``. A relative slack of 1e-9 in the
    floor keeps exact products such as 210 us * 16 MHz from landing one
    sample short through rounding.
    """
    _validate(cfg, geom)
    duration = 2.0 * cfg.depth / geom.speed_of_sound
    n = int(math.floor(duration * cfg.sample_rate * (1 + 1e-9)))
    if n < 2:
        raise ConfigError(f"depth: window holds {n} samples, need at least 2")
    time = np.arange(n) / cfg.sample_rate
    time.flags.writeable = False
    return GridSpec(duration, n, float(cfg.sample_rate), time)


# -- config files -----------------------------------------------------------

_UNITS = {
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3, "um": 1e-6},
    "frequency": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9},
    "speed": {"m/s": 1.0, "mm/us": 1e3},
    "angle": {"rad": 1.0, "deg": math.pi / 180.0},
    "level": {"dB": 1.0},
}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


def parse_quantity(text: str, kind: str, name: str = "value") -> float:
    """Parse ``"3.1 MHz"`` into SI. ``kind`` selects the admissible units."""
    m = _QUANTITY.match(str(text))
    if not m:
        raise ConfigError(f"{name}: cannot parse {text!r}")
    number, unit = float(m.group(1)), m.group(2)
    if kind == "scalar":
        if unit:
            raise ConfigError(f"{name}: expected a plain number, got unit {unit!r}")
        return number
    units = _UNITS[kind]
    if not unit:
        raise ConfigError(f"{name}: missing unit (expected one of {', '.join(units)})")
    if unit not in units:
        raise ConfigError(f"{name}: unit {unit!r} is not a {kind} unit ({', '.join(units)})")
    return number * units[unit]


def _parse_int(text, name):
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"{name}: expected an integer, got {text!r}") from None


_KEYS = {
    "elements": "int", "pitch": "length", "reference_index": "int",
    "speed_of_sound": "speed", "depth": "length", "carrier": "frequency",
    "bandwidth": "frequency", "sample_rate": "frequency",
    "sector_min": "angle", "sector_max": "angle", "lines": "int",
    "dynamic_range": "level", "pulse_edge": "level", "band_floor": "level",
    "channel_floor": "level", "kernel_eps": "scalar", "time_upsample": "int",
}


def _read_pairs(text):
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def _build(pairs):
    unknown = set(pairs) - set(_KEYS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
    required = ("elements", "speed_of_sound", "depth", "carrier", "bandwidth", "sample_rate",
                "sector_min", "sector_max", "lines")
    for key in required:
        if key not in pairs:
            raise ConfigError(f"{key}: missing from config")
    val = {}
    for key, value in pairs.items():
        kind = _KEYS[key]
        if key == "pitch" and value.strip() == "half-wavelength":
            val[key] = None
        elif kind == "int":
            val[key] = _parse_int(value, key)
        else:
            val[key] = parse_quantity(value, kind, key)

    c = val["speed_of_sound"]
    pitch = val.get("pitch")
    if pitch is None:
        pitch = c / (2.0 * val["carrier"])
    geom = ArrayGeometry.linear(val["elements"], pitch, c, val.get("reference_index"))

    lines = val["lines"]
    if lines < 1:
        raise ConfigError(f"lines: need at least one direction, got {lines}")
    if lines == 1:
        directions = (0.5 * (val["sector_min"] + val["sector_max"]),)
    else:
        directions = tuple(np.linspace(val["sector_min"], val["sector_max"], lines))

    optional = {
        "dynamic_range": "dynamic_range_db", "pulse_edge": "pulse_edge_db",
        "band_floor": "band_floor_db", "channel_floor": "channel_floor_db",
        "kernel_eps": "kernel_eps", "time_upsample": "time_upsample",
    }
    extra = {attr: val[key] for key, attr in optional.items() if key in val}
    cfg = ImagingConfig(val["depth"], val["carrier"], val["bandwidth"], val["sample_rate"],
                        directions, **extra)
    return cfg, geom


def default_config_path():
    return resources.files("fdbeam") / "data" / "paper_setup.cfg"


def load_config(path=None, overrides=None):
    """Read a ``key = value unit`` file; ``overrides`` maps keys to raw strings.

    Returns ``(ImagingConfig, ArrayGeometry)``; the grid is validated eagerly.
    """
    if path is None:
        text = default_config_path().read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    pairs = _read_pairs(text)
    for key, value in (overrides or {}).items():
        pairs[key] = str(value)
    cfg, geom = _build(pairs)
    derive_grid(cfg, geom)
    return cfg, geom


def paper_setup(num_lines=64, sector=math.pi / 6, **changes):
    """The cardiac acquisition setup used throughout the tests and docs.

    64 elements at half-wavelength pitch, r = 16 cm, c = 1540 m/s,
    f0 = 3.1 MHz, 2 MHz band, fs = 16 MHz, ``num_lines`` directions over
    ``[-sector, sector]``.
    """
    c = 1540.0
    geom = ArrayGeometry.linear(64, c / (2 * 3.1e6), c)
    if num_lines == 1:
        directions = (0.0,)
    else:
        directions = tuple(np.linspace(-sector, sector, num_lines))
    cfg = ImagingConfig(0.16, 3.1e6, 2e6, 16e6, directions)
    if changes:
        cfg = replace(cfg, **changes)
    return cfg, geom
