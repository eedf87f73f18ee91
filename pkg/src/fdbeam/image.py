"""B-mode image formation: envelope, log compression and scan conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import hilbert

from .errors import ConfigError, StructuralError
from .frames import BeamformedLine

__all__ = [
    "envelope",
    "log_compress",
    "BModeImage",
    "scan_convert",
    "render_lines",
    "write_pgm",
    "read_pgm",
    "write_png",
    "nrmse",
    "envelope_nrmse",
]


def envelope(line) -> np.ndarray:
    """Magnitude of the analytic signal of a line (array or :class:`BeamformedLine`)."""
    x = line.samples if isinstance(line, BeamformedLine) else np.asarray(line, dtype=float)
    if x.size == 0:
        return np.zeros(0)
    return np.abs(hilbert(x, axis=-1))


def log_compress(env, dynamic_range_db: float = 60.0, reference=None) -> np.ndarray:
    """Map an envelope to 8-bit gray levels.

    ``20 log10(env / reference)`` is clipped to ``[-DR, 0]`` and mapped
    affinely onto ``[0, 255]``, rounding halves up. ``reference`` defaults
    to ``max(env)``; an all-zero envelope gives all zeros.
    """
    if not dynamic_range_db > 0:
        raise ConfigError(f"dynamic_range: must be positive, got {dynamic_range_db}")
    env = np.asarray(env, dtype=float)
    ref = float(env.max()) if reference is None and env.size else reference
    if not ref or ref <= 0:
        return np.zeros(env.shape, dtype=np.uint8)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(np.maximum(env, 0.0) / ref)
    level = (np.clip(db, -dynamic_range_db, 0.0) + dynamic_range_db) * (255.0 / dynamic_range_db)
    # small slack so exact halves survive the log/scale round trip
    return np.floor(level + 0.5 + 1e-9).astype(np.uint8)


@dataclass(frozen=True)
class BModeImage:
    """Gray image on a Cartesian grid; ``extent = (x_min, x_max, z_min, z_max)`` in meters."""

    pixels: np.ndarray
    extent: tuple
    dynamic_range_db: float
    mask: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise StructuralError(f"image must be 2-D and non-empty, got {self.pixels.shape}")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def pixel_of(self, x, z):
        """(row, column) of the pixel whose center is nearest to ``(x, z)``."""
        x0, x1, z0, z1 = self.extent
        col = round((x - x0) / (x1 - x0) * self.width - 0.5)
        row = round((z - z0) / (z1 - z0) * self.height - 0.5)
        return int(row), int(col)


def _pixel_centers(extent, size):
    width, height = size
    x0, x1, z0, z1 = extent
    x = x0 + (np.arange(width) + 0.5) * (x1 - x0) / width
    z = z0 + (np.arange(height) + 0.5) * (z1 - z0) / height
    return np.meshgrid(x, z)


def scan_convert(envelopes, thetas, sample_rate: float, speed_of_sound: float,
                 out_size=(512, 512), dynamic_range_db: float = 60.0) -> BModeImage:
    """Interpolate per-direction envelopes onto a Cartesian grid and compress.

    ``envelopes`` has one row per direction in ``thetas`` (radians, sorted).
    Sample ``n`` sits at range ``c n / (2 fs)``. Interpolation is bilinear in
    ``(theta, range)``; pixels outside the sector are 0.
    """
    env = np.asarray(envelopes, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    width, height = (int(v) for v in out_size)
    if width < 2 or height < 2:
        raise ConfigError(f"size: at least 2x2 pixels required, got {width}x{height}")
    if env.ndim != 2 or env.shape[0] != thetas.size:
        raise StructuralError(f"need one envelope row per direction, got {env.shape}")
    if thetas.size < 2:
        raise ConfigError("scan conversion needs at least two directions")
    if np.any(np.diff(thetas) <= 0):
        raise ConfigError("directions must be strictly increasing")
    n = env.shape[1]
    ranges = 0.5 * speed_of_sound * np.arange(n) / sample_rate
    r_max = ranges[-1]
    x_lo = r_max * min(math.sin(thetas[0]), 0.0)
    x_hi = r_max * max(math.sin(thetas[-1]), 0.0)
    z_lo = 0.0
    extent = (x_lo, x_hi, z_lo, r_max)
    xx, zz = _pixel_centers(extent, (width, height))
    rr = np.hypot(xx, zz)
    tt = np.arctan2(xx, zz)
    mask = (tt >= thetas[0]) & (tt <= thetas[-1]) & (rr <= r_max)
    interp = RegularGridInterpolator((thetas, ranges), env, method="linear",
                                     bounds_error=False, fill_value=0.0)
    values = np.zeros(xx.shape)
    values[mask] = interp(np.column_stack([tt[mask], rr[mask]]))
    ref = env.max() if env.size else 0.0
    pixels = log_compress(values, dynamic_range_db, reference=ref)
    pixels[~mask] = 0
    return BModeImage(pixels, extent, float(dynamic_range_db), mask)


def render_lines(lines, speed_of_sound: float, out_size=(512, 512),
                 dynamic_range_db: float = 60.0) -> BModeImage:
    """Envelope-detect a sequence of :class:`BeamformedLine` and scan convert."""
    lines = sorted(lines, key=lambda ln: ln.theta)
    if not lines:
        raise ConfigError("render: no lines")
    env = np.vstack([envelope(ln) for ln in lines])
    return scan_convert(env, [ln.theta for ln in lines], lines[0].sample_rate,
                        speed_of_sound, out_size, dynamic_range_db)


def write_pgm(path, image) -> None:
    """Binary 8-bit PGM (P5)."""
    pixels = image.pixels if isinstance(image, BModeImage) else np.asarray(image)
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise StructuralError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise StructuralError(f"{path}: only 8-bit PGM is supported")
    data = parts[4]
    if len(data) != w * h:
        raise StructuralError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_png(path, image) -> None:
    """PNG output; requires Pillow (``pip install artifact[png]``)."""
    try:
        from PIL import Image
    except ImportError:
        raise ConfigError("PNG output needs Pillow; install the 'png' extra") from None
    pixels = image.pixels if isinstance(image, BModeImage) else np.asarray(image)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def nrmse(estimate, reference) -> float:
    """``||estimate - reference|| / ||reference||``."""
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    denom = np.linalg.norm(reference)
    if denom == 0:
        return 0.0 if np.linalg.norm(estimate) == 0 else math.inf
    return float(np.linalg.norm(estimate - reference) / denom)


def envelope_nrmse(line, reference) -> float:
    """NRMSE between the envelopes of two lines, normalized by the reference envelope."""
    return nrmse(envelope(line), envelope(reference))
