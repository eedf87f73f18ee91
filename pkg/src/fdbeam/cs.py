"""Recovery of a beamformed line from a sub-band of its DFT coefficients.

The measurement holds ``c_k / h_k`` for ``k`` in ``mu``. For a line made of
pulse replicas at integer delays ``q_l`` this is ``sum_l b_l exp(-2i pi k q_l / N)``,
so the atoms are complex exponentials restricted to ``mu``.

Two recoveries are provided:

* :func:`recover_omp` assumes a few strong replicas (synthesis sparsity).
* :func:`recover_analysis_l1` fills in all of ``kappa`` with the coefficient
  vector whose delay-domain transform has the smallest l1 norm while staying
  within ``eps`` of the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ConfigError, StructuralError
from .freq_bf import BeamSpectrum

__all__ = [
    "PartialMeasurement",
    "SparseSolution",
    "AnalysisSolution",
    "choose_mu",
    "build_measurement",
    "recover_omp",
    "recover_analysis_l1",
    "noise_epsilon",
    "delay_transform",
]

H_FLOOR = 1e-6


@dataclass(frozen=True)
class PartialMeasurement:
    """Normalized coefficients ``values = c_mu / h_mu``.

    ``rejected`` lists requested bins dropped because ``|h_k|`` was below
    ``1e-6 * max|h|``.
    """

    mu: np.ndarray
    values: np.ndarray
    num_samples: int
    h: np.ndarray
    rejected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    theta: float = 0.0
    sample_rate: float = 1.0

    def atoms(self, support) -> np.ndarray:
        """Dictionary columns ``exp(-2i pi k q / N)`` for the delays in ``support``."""
        support = np.asarray(support, dtype=float)
        return np.exp(-2j * np.pi * np.outer(self.mu, support) / self.num_samples)


@dataclass(frozen=True)
class SparseSolution:
    support: np.ndarray
    amplitudes: np.ndarray
    residual_norm: float
    residual_history: np.ndarray
    rank_deficient: bool = False

    def spectrum(self, indices, hk, num_samples, theta=0.0, sample_rate=1.0) -> BeamSpectrum:
        """Line spectrum ``h_k sum_l b_l exp(-2i pi k q_l / N)`` on ``indices``."""
        indices = np.asarray(indices, dtype=np.int64)
        phase = np.exp(-2j * np.pi * np.outer(indices, self.support) / num_samples)
        coeffs = np.asarray(hk)[indices] * (phase @ self.amplitudes) if self.support.size \
            else np.zeros(indices.size, dtype=complex)
        return BeamSpectrum(indices, coeffs, num_samples, theta, sample_rate)


@dataclass(frozen=True)
class AnalysisSolution:
    """Full-band normalized coefficients on ``kappa``.

    ``objective`` is ``||D* c||_1`` with ``D* c = N ifft`` of the zero-padded
    coefficients; ``residual`` is ``||c_mu - y||_2``.
    """

    kappa: np.ndarray
    coeffs: np.ndarray
    objective: float
    residual: float
    iterations: int
    feasible: bool
    objective_history: np.ndarray = field(repr=False, default=None)

    def spectrum(self, hk, num_samples, theta=0.0, sample_rate=1.0) -> BeamSpectrum:
        return BeamSpectrum(self.kappa, np.asarray(hk)[self.kappa] * self.coeffs,
                            num_samples, theta, sample_rate)


def choose_mu(kappa, count, strategy="central", hk=None) -> np.ndarray:
    """Pick ``count`` bins of ``kappa``.

    ``"central"`` takes a contiguous run centered on the bin of largest
    ``|h_k|`` (the middle of ``kappa`` when ``hk`` is not given), shifted
    inward at the band edges. ``"uniform"`` spreads the bins evenly.
    """
    kappa = np.asarray(kappa, dtype=np.int64)
    if count <= 0:
        raise ConfigError(f"m: must be positive, got {count}")
    if count > kappa.size:
        raise ConfigError(f"m: {count} exceeds |kappa| = {kappa.size}")
    if strategy == "central":
        if hk is None:
            peak = (kappa.size - 1) // 2
        else:
            peak = int(np.argmax(np.abs(np.asarray(hk)[kappa])))
        start = min(max(peak - (count - 1) // 2, 0), kappa.size - count)
        return kappa[start:start + count].copy()
    if strategy == "uniform":
        pos = np.round(np.linspace(0, kappa.size - 1, count)).astype(np.int64)
        return kappa[pos]
    raise ConfigError(f"mu strategy: expected 'central' or 'uniform', got {strategy!r}")


def build_measurement(spec: BeamSpectrum, hk, mu) -> PartialMeasurement:
    """Divide the coefficients on ``mu`` by the pulse spectrum."""
    hk = np.asarray(hk)
    mu = np.asarray(mu, dtype=np.int64)
    pos = np.searchsorted(spec.indices, mu)
    pos = np.clip(pos, 0, max(spec.indices.size - 1, 0))
    missing = mu[spec.indices[pos] != mu] if spec.indices.size else mu
    if missing.size:
        raise StructuralError(f"mu bins not in spectrum: {missing[:20].tolist()}")
    h = hk[mu]
    ok = np.abs(h) >= H_FLOOR * np.abs(hk).max()
    return PartialMeasurement(mu[ok], spec.coeffs[pos[ok]] / h[ok], spec.num_samples, h[ok],
                              mu[~ok], spec.theta, spec.sample_rate)


def _correlate(meas: PartialMeasurement, r) -> np.ndarray:
    """``a_q^H r`` for every delay q in 0..N-1."""
    full = np.zeros(meas.num_samples, dtype=complex)
    full[meas.mu] = r
    return meas.num_samples * scipy.fft.ifft(full)


def recover_omp(meas: PartialMeasurement, max_atoms: int, tol: float = 1e-10) -> SparseSolution:
    """Orthogonal matching pursuit over the N on-grid delays.

    Stops after ``max_atoms`` atoms or once ``||r|| <= tol ||y||``. Equal
    correlation magnitudes resolve to the lowest delay index. If a least
    squares refit is rank deficient the newest atom is dropped and the
    solution is flagged.
    """
    if max_atoms < 1:
        raise ConfigError(f"L: must be at least 1, got {max_atoms}")
    if 2 * max_atoms > meas.mu.size:
        raise ConfigError(f"L: 2*{max_atoms} exceeds |mu| = {meas.mu.size}")
    y = meas.values
    y_norm = float(np.linalg.norm(y))
    history = [y_norm]
    support: list[int] = []
    amps = np.zeros(0, dtype=complex)
    r = y.copy()
    flagged = False
    if y_norm == 0:
        return SparseSolution(np.zeros(0, dtype=np.int64), amps, 0.0, np.array(history))
    while len(support) < max_atoms and history[-1] > tol * y_norm:
        corr = np.abs(_correlate(meas, r))
        corr[support] = -1.0
        q = int(np.argmax(corr))
        trial = support + [q]
        a = meas.atoms(trial)
        sol, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
        if rank < len(trial):
            flagged = True
            break
        support, amps = trial, sol
        r = y - a @ amps
        history.append(float(np.linalg.norm(r)))
    return SparseSolution(np.asarray(support, dtype=np.int64), amps, history[-1],
                          np.asarray(history), flagged)


def delay_transform(coeffs, kappa, num_samples) -> np.ndarray:
    """``D* c``: zero-padded inverse DFT of coefficients on ``kappa``, times N."""
    full = np.zeros(num_samples, dtype=complex)
    full[kappa] = coeffs
    return num_samples * scipy.fft.ifft(full)


def _soft(z, thresh):
    mag = np.abs(z)
    scale = np.maximum(1.0 - thresh / np.maximum(mag, 1e-300), 0.0)
    return z * scale


def recover_analysis_l1(meas: PartialMeasurement, kappa, eps: float = 0.0,
                        max_iter: int = 5000, tol: float = 1e-6, window: int = 10,
                        rho: float | None = None) -> AnalysisSolution:
    """Minimize ``||D* c||_1`` over coefficients on ``kappa`` with ``||c_mu - y|| <= eps``.

    ADMM on the split ``x = U c`` with ``U = D*/sqrt(N)``, which has
    orthonormal columns. The c-step is then an exact projection onto the
    constraint set, so every iterate is feasible; the x-step is complex soft
    thresholding. Iteration stops when the objective changes by less than
    ``tol`` (relative) over ``window`` iterations, or at ``max_iter``.
    """
    if eps < 0:
        raise ConfigError(f"eps: must be non-negative, got {eps}")
    kappa = np.asarray(kappa, dtype=np.int64)
    pos = np.searchsorted(kappa, meas.mu)
    pos = np.clip(pos, 0, kappa.size - 1)
    if np.any(kappa[pos] != meas.mu):
        raise StructuralError("mu must be a subset of kappa")
    n = meas.num_samples
    root_n = math.sqrt(n)
    y = meas.values

    def project(c):
        d = c[pos] - y
        norm = np.linalg.norm(d)
        if norm > eps:
            c[pos] = y + d * (eps / norm) if eps > 0 else y
        return c

    def forward(c):
        full = np.zeros(n, dtype=complex)
        full[kappa] = c
        return scipy.fft.ifft(full, norm="ortho")

    def adjoint(v):
        return scipy.fft.fft(v, norm="ortho")[kappa]

    c = project(np.zeros(kappa.size, dtype=complex))
    x = forward(c)
    if rho is None:
        level = np.mean(np.abs(x))
        rho = 1.0 / level if level > 0 else 1.0
    u = np.zeros(n, dtype=complex)
    objectives = [float(np.abs(x).sum())]
    it = 0
    for it in range(1, max_iter + 1):
        c = project(adjoint(x - u))
        uc = forward(c)
        x = _soft(uc + u, 1.0 / rho)
        u += uc - x
        objectives.append(float(np.abs(uc).sum()))
        if it >= window:
            old = objectives[-1 - window]
            if abs(objectives[-1] - old) <= tol * max(abs(old), 1e-300):
                break
    residual = float(np.linalg.norm(c[pos] - y))
    history = np.asarray(objectives) * root_n
    return AnalysisSolution(kappa, c, float(history[-1]), residual, it,
                            residual <= eps + 1e-9, history)


def noise_epsilon(sigma: float, count: int) -> float:
    """Constraint radius ``sigma * sqrt(2 |mu|)`` for a given noise level."""
    return float(sigma) * math.sqrt(2.0 * count)
