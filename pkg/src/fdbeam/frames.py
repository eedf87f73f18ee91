"""Channel frames, beamformed lines and their little-endian binary format.

File layout::

    magic   4 bytes  b"SNQB"
    version u16      1
    M       u32      rows
    N       u32      samples per row
    theta   f64      radians
    fs      f64      Hz
    data    M*N f32  row-major

A beamformed line is stored as a 1 x N frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StructuralError

MAGIC = b"SNQB"
VERSION = 1
_HEADER = struct.Struct("<4sHIIdd")


@dataclass(frozen=True)
class ChannelFrame:
    samples: np.ndarray
    theta: float
    sample_rate: float
    provenance: str = "simulated"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2:
            raise StructuralError(f"channel frame must be 2-D, got shape {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def num_elements(self):
        return self.samples.shape[0]

    @property
    def num_samples(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class BeamformedLine:
    samples: np.ndarray
    theta: float
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1:
            raise StructuralError(f"beamformed line must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise StructuralError("beamformed line contains non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    def as_frame(self) -> ChannelFrame:
        return ChannelFrame(self.samples[None, :], self.theta, self.sample_rate, "beamformed")


def write_frame(path, frame) -> None:
    """Write a :class:`ChannelFrame` or :class:`BeamformedLine`."""
    if isinstance(frame, BeamformedLine):
        frame = frame.as_frame()
    m, n = frame.samples.shape
    header = _HEADER.pack(MAGIC, VERSION, m, n, float(frame.theta), float(frame.sample_rate))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frame.samples, dtype="<f4").tobytes())


def read_frame(path) -> ChannelFrame:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StructuralError(f"{path}: truncated header")
    magic, version, m, n, theta, fs = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StructuralError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StructuralError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * m * n
    if len(raw) != expected:
        raise StructuralError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(m, n)
    return ChannelFrame(data.astype(float), theta, fs, "file")


def read_line(path) -> BeamformedLine:
    frame = read_frame(path)
    if frame.num_elements != 1:
        raise StructuralError(f"{path}: expected a 1 x N line, found {frame.samples.shape}")
    return BeamformedLine(frame.samples[0], frame.theta, frame.sample_rate)
