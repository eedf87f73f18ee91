"""Distortion kernels that map element spectra to beamformed-line spectra.

For element ``m`` and output bin ``k`` the kernel ``q_{k,m}(t)`` folds the
delay alignment, its Jacobian and the output Fourier exponential into one
function of the element's own time axis. Its DFT ``Q_{k,m}[j]`` is what each
channel coefficient ``phi_m[k - j]`` gets multiplied by.

Coefficients are stored by offset ``j = k - n``, in a contiguous window
``[j_lo(k), j_hi(k)]`` shared by all elements, so ``nu(k) = {k - j}``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .config import ArrayGeometry, GridSpec
from .errors import ConfigError, StructuralError
from .time_bf import delay_map

__all__ = [
    "eval_q",
    "kernel_rows",
    "QKernelTable",
    "build_kernel_table",
    "build_kernel_tables",
    "kernel_cache_key",
    "save_table",
    "load_table",
    "cached_kernel_table",
]

# Above this many bytes the per-element candidate coefficients are not kept
# between the selection and extraction passes; the FFTs are recomputed instead.
_KEEP_LIMIT = 512 * 2**20


def _support(gamma, theta, period):
    return abs(gamma), min(float(delay_map(period, theta, gamma)), period)


def eval_q(t, k, gamma, theta, period):
    """Evaluate ``q_{k,m}(t; theta)`` for an element with travel offset ``gamma``.

    The indicator ``[|gamma|, tau(period))`` is applied first, so the rational
    terms are never evaluated where their denominator could vanish. ``period``
    is the Fourier period of the line (``GridSpec.period``).
    """
    t = np.asarray(t, dtype=float)
    lo, hi = _support(gamma, theta, period)
    inside = (t >= lo) & (t < hi)
    out = np.zeros(t.shape, dtype=complex)
    if gamma == 0:
        out[inside] = 1.0
        return out
    s, c = math.sin(theta), math.cos(theta)
    u = t[inside]
    den = u - gamma * s
    amp = 1.0 + (gamma * c) ** 2 / den ** 2
    phase = (2.0 * np.pi * k / period) * gamma * (gamma - u * s) / den
    out[inside] = amp * np.exp(1j * phase)
    return out


def kernel_rows(gamma, theta, grid: GridSpec, kappa) -> np.ndarray:
    """Grid-sampled ``q_{k,m}`` for every ``k`` in ``kappa``, shape (K, N)."""
    kappa = np.asarray(kappa, dtype=np.int64)
    t = grid.time
    lo, hi = _support(gamma, theta, grid.period)
    inside = (t >= lo) & (t < hi)
    q = np.zeros((kappa.size, t.size), dtype=complex)
    if gamma == 0:
        q[:, inside] = 1.0
        return q
    s, c = math.sin(theta), math.cos(theta)
    u = t[inside]
    den = u - gamma * s
    amp = 1.0 + (gamma * c) ** 2 / den ** 2
    base = (2.0 * np.pi / grid.period) * gamma * (gamma - u * s) / den
    if kappa.size > 1 and np.all(np.diff(kappa) == 1):
        # consecutive k: advance the phase by one factor of exp(i*base) per row
        rows = np.empty((kappa.size, u.size), dtype=complex)
        rows[0] = amp * np.exp(1j * kappa[0] * base)
        rows[1:] = np.exp(1j * base)
        np.cumprod(rows, axis=0, out=rows)
    else:
        rows = amp * np.exp(1j * np.outer(kappa, base))
    q[:, inside] = rows
    return q


@dataclass(frozen=True)
class QKernelTable:
    """Retained kernel coefficients for one direction.

    ``coeffs[:, starts[i]:starts[i+1]]`` holds ``Q_{k,m}[j]`` (DFT scaling, so
    the reference element has ``Q = N delta``) for ``k = kappa[i]`` and
    ``j = j_lo[i] .. j_hi[i]``, one row per element.
    """

    theta: float
    eps: float
    num_samples: int
    kappa: np.ndarray
    j_lo: np.ndarray
    j_hi: np.ndarray
    coeffs: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    band: tuple | None = None
    key: str = ""

    @property
    def num_elements(self):
        return self.coeffs.shape[0]

    def offsets(self, i):
        return np.arange(self.j_lo[i], self.j_hi[i] + 1)

    def channel_indices(self, i):
        """``nu(k)`` for ``k = kappa[i]``, in the order of :meth:`block` columns."""
        return (self.kappa[i] - self.offsets(i)) % self.num_samples

    def block(self, i):
        return self.coeffs[:, self.starts[i]:self.starts[i + 1]]

    def nu(self, indices=None) -> np.ndarray:
        """Union of ``nu(k)`` over all (or the selected) table rows, sorted."""
        rows = range(self.kappa.size) if indices is None else indices
        parts = [self.channel_indices(i) for i in rows]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def rows_for(self, ks) -> np.ndarray:
        """Row positions of the bins ``ks``; every bin must be in the table."""
        ks = np.asarray(ks, dtype=np.int64)
        pos = np.searchsorted(self.kappa, ks)
        pos = np.clip(pos, 0, self.kappa.size - 1)
        missing = ks[self.kappa[pos] != ks]
        if missing.size:
            raise StructuralError(f"bins not in kernel table: {missing[:10].tolist()}")
        return pos

    def subset(self, ks) -> "QKernelTable":
        rows = self.rows_for(ks)
        blocks = [self.block(i) for i in rows]
        widths = np.array([b.shape[1] for b in blocks], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(widths)])
        coeffs = np.concatenate(blocks, axis=1) if blocks else self.coeffs[:, :0]
        return QKernelTable(self.theta, self.eps, self.num_samples, self.kappa[rows].copy(),
                            self.j_lo[rows].copy(), self.j_hi[rows].copy(), coeffs, starts,
                            self.band, self.key)

    def stats(self, ks=None) -> dict:
        """Sample budget: |kappa|, |nu|, their ratio and N/|nu|."""
        rows = None if ks is None else self.rows_for(ks)
        k_count = self.kappa.size if rows is None else rows.size
        nu = self.nu(rows).size
        return {
            "theta": float(self.theta),
            "eps": float(self.eps),
            "N": int(self.num_samples),
            "kappa": int(k_count),
            "nu": int(nu),
            "ratio": nu / k_count if k_count else float("nan"),
            "reduction": self.num_samples / nu if nu else float("nan"),
        }


def _candidate_starts(kappa, n, band):
    """First candidate offset per row and the candidate count."""
    if band is None:
        width = n
        start = np.full(kappa.size, -((n - 1) // 2), dtype=np.int64)
    else:
        b0, b1 = band
        width = b1 - b0 + 1
        start = kappa - b1
    return start, width


def _select(power, eps_values):
    """Per row, the contiguous column range holding the greedy (1-eps) energy set."""
    k_count, width = power.shape
    order = np.argsort(-power, axis=1, kind="stable")
    cum = np.cumsum(np.take_along_axis(power, order, axis=1), axis=1)
    total = cum[:, -1:]
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(width), order.shape), axis=1)
    result = {}
    for eps in eps_values:
        count = np.minimum((cum < (1.0 - eps) * total).sum(axis=1) + 1, width)
        chosen = rank < count[:, None]
        lo = chosen.argmax(axis=1)
        hi = width - 1 - chosen[:, ::-1].argmax(axis=1)
        empty = total[:, 0] <= 0
        lo[empty], hi[empty] = width, -1
        result[eps] = (lo, hi)
    return result


def build_kernel_tables(geom: ArrayGeometry, grid: GridSpec, theta, kappa, eps_values,
                        band=None) -> dict:
    """Kernel tables for several thresholds from one pass over the elements.

    Parameters
    ----------
    kappa : array of int
        Output bins, sorted.
    eps_values : sequence of float
        Energy thresholds in (0, 1). For each ``(k, m)`` the dropped
        coefficient energy is at most ``eps`` times the total; the window is
        grown greedily by magnitude and then closed to a contiguous range.
    band : (int, int), optional
        Inclusive channel-bin range over which energy is accounted. Channel
        data has no energy outside it, so coefficients there never contribute.
        ``None`` accounts over all N offsets.
    """
    eps_values = [float(e) for e in eps_values]
    for eps in eps_values:
        if not 0 < eps < 1:
            raise ConfigError(f"kernel_eps: must lie in (0, 1), got {eps}")
    kappa = np.asarray(kappa, dtype=np.int64)
    if kappa.size == 0:
        raise ConfigError("kappa: empty bin set")
    n = grid.num_samples
    if kappa.min() < 0 or kappa.max() >= n or np.any(np.diff(kappa) <= 0):
        raise StructuralError("kappa: bins must be sorted, distinct and within 0..N-1")
    if band is not None:
        band = (int(band[0]), int(band[1]))
        if not 0 <= band[0] <= band[1] < n:
            raise StructuralError(f"band {band} outside 0..{n - 1}")
    start, width = _candidate_starts(kappa, n, band)
    idx = (start[:, None] + np.arange(width)[None, :]) % n
    rows = np.arange(kappa.size)[:, None]
    gammas = geom.gammas
    m_count = gammas.size

    keep = m_count * kappa.size * width * 16 <= _KEEP_LIMIT
    kept = []
    lo = {e: np.full(kappa.size, width, dtype=np.int64) for e in eps_values}
    hi = {e: np.full(kappa.size, -1, dtype=np.int64) for e in eps_values}
    for gamma in gammas:
        spectrum = scipy.fft.fft(kernel_rows(gamma, theta, grid, kappa), axis=1)
        cand = spectrum[rows, idx]
        if keep:
            kept.append(cand)
        for eps, (l, h) in _select(np.abs(cand) ** 2, eps_values).items():
            np.minimum(lo[eps], l, out=lo[eps])
            np.maximum(hi[eps], h, out=hi[eps])

    if not keep:
        kept = (scipy.fft.fft(kernel_rows(g, theta, grid, kappa), axis=1)[rows, idx]
                for g in gammas)
        kept = list(kept) if len(eps_values) > 1 else kept

    tables = {}
    windows = {eps: (lo[eps], hi[eps]) for eps in eps_values}
    for eps in eps_values:
        if np.any(hi[eps] < lo[eps]):
            raise StructuralError("kernel support is empty for some bins")
    extracted = {eps: [] for eps in eps_values}
    for cand in kept:
        for eps, (l, h) in windows.items():
            extracted[eps].append(np.concatenate([cand[i, l[i]:h[i] + 1]
                                                  for i in range(kappa.size)]))
    for eps, (l, h) in windows.items():
        widths = h - l + 1
        starts = np.concatenate([[0], np.cumsum(widths)])
        coeffs = np.vstack(extracted[eps])
        key = kernel_cache_key(geom, grid, theta, kappa, eps, band)
        tables[eps] = QKernelTable(float(theta), eps, n, kappa.copy(), start + l, start + h,
                                   coeffs, starts, band, key)
    return tables


def build_kernel_table(geom: ArrayGeometry, grid: GridSpec, theta, kappa, eps, band=None):
    """Single-threshold form of :func:`build_kernel_tables`."""
    return build_kernel_tables(geom, grid, theta, kappa, [eps], band)[float(eps)]


# -- cache ------------------------------------------------------------------

_MAGIC = b"SNQK"
_VERSION = 1
_HEADER = struct.Struct("<4sH32sIIIdddqq")


def kernel_cache_key(geom, grid, theta, kappa, eps, band) -> str:
    h = hashlib.sha256()
    h.update(b"fdbeam-kernel-v1")
    h.update(np.asarray(geom.element_offsets, dtype="<f8").tobytes())
    h.update(struct.pack("<dqqdddd", geom.speed_of_sound, geom.reference_index,
                         grid.num_samples, grid.sample_rate, grid.period, float(theta), float(eps)))
    h.update(np.asarray(kappa, dtype="<i8").tobytes())
    h.update(struct.pack("<qq", *(band if band is not None else (-1, -1))))
    return h.hexdigest()


def save_table(path, table: QKernelTable) -> None:
    band = table.band if table.band is not None else (-1, -1)
    header = _HEADER.pack(_MAGIC, _VERSION, bytes.fromhex(table.key), table.num_elements,
                          table.kappa.size, table.num_samples, table.theta, table.eps,
                          float(table.coeffs.shape[1]), band[0], band[1])
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (table.kappa, table.j_lo, table.j_hi):
            fh.write(np.asarray(arr, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(table.coeffs, dtype="<c16").tobytes())


def load_table(path, expected_key=None) -> QKernelTable:
    raw = Path(path).read_bytes()
    magic, version, digest, m, k, n, theta, eps, total, b0, b1 = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise StructuralError(f"{path}: not a kernel cache file")
    key = digest.hex()
    if expected_key is not None and key != expected_key:
        raise StructuralError(f"{path}: cache key mismatch")
    total = int(total)
    off = _HEADER.size
    arrays = []
    for _ in range(3):
        arrays.append(np.frombuffer(raw, dtype="<i8", count=k, offset=off).astype(np.int64))
        off += 8 * k
    coeffs = np.frombuffer(raw, dtype="<c16", count=m * total, offset=off).reshape(m, total)
    kappa, j_lo, j_hi = arrays
    starts = np.concatenate([[0], np.cumsum(j_hi - j_lo + 1)])
    band = None if b0 < 0 else (int(b0), int(b1))
    return QKernelTable(theta, eps, n, kappa, j_lo, j_hi, coeffs.astype(complex), starts, band, key)


def cached_kernel_table(cache_dir, geom, grid, theta, kappa, eps, band=None) -> QKernelTable:
    """Load the table from ``cache_dir`` if present, otherwise build and store it."""
    if cache_dir is None:
        return build_kernel_table(geom, grid, theta, kappa, eps, band)
    key = kernel_cache_key(geom, grid, theta, kappa, eps, band)
    path = Path(cache_dir) / f"{key[:24]}.snqk"
    if path.exists():
        return load_table(path, key)
    table = build_kernel_table(geom, grid, theta, kappa, eps, band)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_table(tmp, table)
    tmp.replace(path)
    return table
