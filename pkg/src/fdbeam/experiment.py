"""End-to-end experiments: simulate, beamform, recover, render, report.

An experiment is described by a small TOML file::

    config = "scan.cfg"          # optional, defaults to the packaged setup
    methods = ["time", "freq", "l1"]
    output = "run1"
    seed = 7                     # or: phantom = "phantom.toml"
    reflectors = 10
    speckle_density = 5.0        # scatterers per mm
    m = 100                      # |mu| for omp / l1
    mu = "central"
    L = 25
    eps = 0.0

    [set]                        # config overrides, same syntax as the config file
    lines = "16"

The report is plain JSON with sorted keys and no timings, so identical
inputs give byte-identical output.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ArrayGeometry, GridSpec, ImagingConfig, derive_grid, load_config
from .cs import (build_measurement, choose_mu, noise_epsilon, recover_analysis_l1,
                 recover_omp)
from .errors import ConfigError, NumericalError, StructuralError
from .frames import BeamformedLine, ChannelFrame, write_frame
from .freq_bf import beamform_freq, channel_dft, pulse_bands, synthesize_line
from .image import envelope, envelope_nrmse, render_lines, write_pgm
from .kernel import QKernelTable, cached_kernel_table
from .phantom import (Phantom, PulseModel, load_phantom, make_reflector_phantom,
                      make_speckle_phantom, simulate_channels)
from .time_bf import beamform_time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "METHODS",
    "REPORT_SCHEMA",
    "ExperimentSpec",
    "load_experiment",
    "Pipeline",
    "run_experiment",
    "reflector_peaks",
]

METHODS = ("time", "freq", "omp", "l1")
METRICS = ("nrmse", "budget", "image")
REPORT_SCHEMA = 1


@dataclass(frozen=True)
class ExperimentSpec:
    methods: tuple
    output: Path
    config: Path | None = None
    overrides: dict = field(default_factory=dict)
    phantom: Path | None = None
    seed: int = 0
    reflectors: int = 10
    speckle_density: float = 5.0
    speckle_std: float = 0.1
    noise_snr_db: float | None = None
    m: int = 100
    mu: str = "central"
    L: int = 25
    eps: float | None = None
    metrics: tuple = METRICS
    image_size: tuple = (512, 512)
    cache_dir: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "output", Path(self.output))

    def validate(self):
        if not self.methods:
            raise ConfigError("methods: the method chain is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"methods: unknown method {bad[0]!r} (expected {', '.join(METHODS)})")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods: duplicate entries")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise ConfigError(f"metrics: unknown metric {bad[0]!r}")
        for name in ("config", "phantom"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name}: file not found: {path}")
        if self.mu not in ("central", "uniform"):
            raise ConfigError(f"mu: expected 'central' or 'uniform', got {self.mu!r}")


def load_experiment(path, output=None) -> ExperimentSpec:
    """Read an experiment TOML file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"experiment: cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"experiment: {path}: {exc}") from None
    base = path.parent

    def resolve(value):
        return None if value is None else (base / value)

    known = {"config", "methods", "output", "phantom", "seed", "reflectors", "speckle_density",
             "speckle_std", "noise_snr_db", "m", "mu", "L", "eps", "metrics", "image_size",
             "cache_dir", "set"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown experiment key")
    out = output if output is not None else resolve(doc.get("output", "experiment_out"))
    size = doc.get("image_size", [512, 512])
    spec = ExperimentSpec(
        methods=tuple(doc.get("methods", ())),
        output=Path(out),
        config=resolve(doc.get("config")),
        overrides={k: str(v) for k, v in doc.get("set", {}).items()},
        phantom=resolve(doc.get("phantom")),
        seed=int(doc.get("seed", 0)),
        reflectors=int(doc.get("reflectors", 10)),
        speckle_density=float(doc.get("speckle_density", 5.0)),
        speckle_std=float(doc.get("speckle_std", 0.1)),
        noise_snr_db=doc.get("noise_snr_db"),
        m=int(doc.get("m", 100)),
        mu=str(doc.get("mu", "central")),
        L=int(doc.get("L", 25)),
        eps=doc.get("eps"),
        metrics=tuple(doc.get("metrics", METRICS)),
        image_size=(int(size[0]), int(size[1])),
        cache_dir=resolve(doc.get("cache_dir")),
    )
    spec.validate()
    return spec


class Pipeline:
    """Shared per-configuration state: grid, pulse, bands and kernel tables."""

    def __init__(self, cfg: ImagingConfig, geom: ArrayGeometry, cache_dir=None):
        self.cfg, self.geom = cfg, geom
        self.grid: GridSpec = derive_grid(cfg, geom)
        self.pulse = PulseModel.from_config(cfg)
        self.hk, self.kappa, self.band = pulse_bands(cfg, self.grid, self.pulse)
        self.cache_dir = cache_dir
        self._tables: dict = {}

    @property
    def num_samples(self):
        return self.grid.num_samples

    def table(self, theta, eps=None) -> QKernelTable:
        eps = self.cfg.kernel_eps if eps is None else eps
        key = (float(theta), float(eps))
        if key not in self._tables:
            self._tables[key] = cached_kernel_table(self.cache_dir, self.geom, self.grid, theta,
                                                    self.kappa, eps, self.band)
        return self._tables[key]

    def add_tables(self, tables):
        for t in tables:
            self._tables[(float(t.theta), float(t.eps))] = t

    def simulate(self, phantom: Phantom, theta, noise_snr_db=None, seed=None) -> ChannelFrame:
        return simulate_channels(phantom, self.pulse, self.geom, self.grid, theta,
                                 noise_snr_db=noise_snr_db, seed=seed)

    def time_line(self, frame, upsample=None) -> BeamformedLine:
        up = self.cfg.time_upsample if upsample is None else upsample
        return beamform_time(frame, self.geom, self.grid, upsample=up)

    def freq_spectrum(self, frame, table=None, ks=None):
        table = table or self.table(frame.theta)
        rows = None if ks is None else table.rows_for(ks)
        spectra = channel_dft(frame, table.nu(rows))
        return beamform_freq(spectra, table, ks, self.grid.sample_rate)

    def freq_line(self, frame, table=None) -> BeamformedLine:
        return synthesize_line(self.freq_spectrum(frame, table))

    def mu(self, count, strategy="central"):
        return choose_mu(self.kappa, count, strategy, self.hk)

    def measurement_eps(self, channel_sigma, meas):
        """Constraint radius for white channel noise of std ``channel_sigma``.

        Averaging M channels and taking an N-point DFT gives complex noise of
        variance ``sigma^2 N / M`` per bin, further divided by ``|h_k|``.
        """
        per_bin = channel_sigma * math.sqrt(self.num_samples / self.geom.num_elements)
        scale = np.sqrt(np.mean(1.0 / np.abs(meas.h) ** 2))
        return noise_epsilon(per_bin * scale / math.sqrt(2.0), meas.mu.size)

    def recover(self, frame, method, mu, L=25, eps=None, noise_sigma=None, table=None):
        """Recovered line and a summary dict for ``method`` in {"omp", "l1"}.

        ``noise_sigma`` is the channel noise std; it sets the l1 radius when
        ``eps`` is not given.
        """
        spec = self.freq_spectrum(frame, table, mu)
        meas = build_measurement(spec, self.hk, mu)
        n = self.num_samples
        if method == "omp":
            sol = recover_omp(meas, L)
            full = sol.spectrum(self.kappa, self.hk, n, frame.theta, self.grid.sample_rate)
            info = {"iterations": int(sol.support.size), "residual": sol.residual_norm,
                    "rank_deficient": bool(sol.rank_deficient)}
        elif method == "l1":
            if eps is None:
                eps = 0.0 if noise_sigma is None else self.measurement_eps(noise_sigma, meas)
            sol = recover_analysis_l1(meas, self.kappa, eps)
            full = sol.spectrum(self.hk, n, frame.theta, self.grid.sample_rate)
            info = {"iterations": int(sol.iterations), "residual": sol.residual,
                    "feasible": bool(sol.feasible), "objective": sol.objective, "eps": float(eps)}
        else:
            raise ConfigError(f"method: expected 'omp' or 'l1', got {method!r}")
        if not np.all(np.isfinite(full.coeffs)):
            raise NumericalError(f"{method}: non-finite recovered coefficients")
        info.update({"method": method, "mu": int(meas.mu.size), "rejected": int(meas.rejected.size)})
        return synthesize_line(full), info


def reflector_peaks(line, delays_samples, half_width) -> np.ndarray:
    """Envelope argmax within ``+-half_width`` samples of each expected delay."""
    env = envelope(line)
    out = []
    for d in np.asarray(delays_samples, dtype=float):
        lo = max(int(math.floor(d - half_width)), 0)
        hi = min(int(math.ceil(d + half_width)) + 1, env.size)
        out.append(lo + int(np.argmax(env[lo:hi])))
    return np.asarray(out, dtype=np.int64)


def _phantom_for(spec: ExperimentSpec, pipe: Pipeline, index: int) -> Phantom:
    if spec.phantom is not None:
        return load_phantom(spec.phantom, pipe.geom, pipe.grid)
    sep = 2.0 * pipe.pulse.half_support
    strong = make_reflector_phantom([spec.seed, index, 0], spec.reflectors, pipe.grid, sep)
    weak = make_speckle_phantom([spec.seed, index, 1], spec.speckle_density, spec.speckle_std,
                                pipe.grid, pipe.geom.speed_of_sound)
    return strong + weak


@contextmanager
def _stage(name):
    try:
        yield
    except (ConfigError, StructuralError, NumericalError) as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    except Exception as exc:
        raise NumericalError(f"stage {name}: {type(exc).__name__}: {exc}") from exc


def _round(x):
    return float(f"{x:.10g}")


def _process(spec: ExperimentSpec, pipe: Pipeline, index: int):
    theta = float(pipe.cfg.thetas[index])
    with _stage("phantom"):
        phantom = _phantom_for(spec, pipe, index)
    with _stage("simulate"):
        frame = pipe.simulate(phantom, theta, spec.noise_snr_db, seed=[spec.seed, index, 2])
    with _stage("time"):
        oracle = pipe.time_line(frame)
    lines = {"time": oracle}
    info = {"theta": _round(theta)}
    needs_table = any(m in spec.methods for m in ("freq", "omp", "l1"))
    table = None
    if needs_table:
        with _stage("kernel"):
            table = pipe.table(theta)
        stats = table.stats()
        info.update({"nu": stats["nu"], "ratio": _round(stats["ratio"]),
                     "reduction": _round(stats["reduction"])})
    if "freq" in spec.methods:
        with _stage("freq"):
            lines["freq"] = pipe.freq_line(frame, table)
    noise_sigma = None
    if spec.noise_snr_db is not None:
        power = float(np.mean(frame.samples ** 2))
        noise_sigma = math.sqrt(power / (1.0 + 10 ** (spec.noise_snr_db / 10)))
    for method in ("omp", "l1"):
        if method in spec.methods:
            with _stage(method):
                mu = pipe.mu(spec.m, spec.mu)
                lines[method], rec = pipe.recover(frame, method, mu, spec.L, spec.eps,
                                                  noise_sigma, table)
                mu_stats = table.stats(mu)
            info[method] = {k: (_round(v) if isinstance(v, float) else v) for k, v in rec.items()}
            info.update({"nu_mu": mu_stats["nu"], "reduction_mu": _round(mu_stats["reduction"])})
    for method in spec.methods:
        if method != "time":
            info[f"nrmse_{method}"] = _round(envelope_nrmse(lines[method], oracle))
    return lines, info


def _budget_csv(rows, include_mu) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["theta", "kappa", "nu", "ratio", "N", "reduction"]
    if include_mu:
        header += ["mu", "nu_mu", "reduction_mu"]
    writer.writerow(header)
    for r in rows:
        row = [f"{r['theta']:.10g}", r["kappa"], r["nu"], f"{r['ratio']:.10g}", r["N"],
               f"{r['reduction']:.10g}"]
        if include_mu:
            row += [r["mu"], r["nu_mu"], f"{r['reduction_mu']:.10g}"]
        writer.writerow(row)
    return buf.getvalue()


def _write_manifest(out: Path, artifacts, status, detail=""):
    text = [f"status: {status}"]
    if detail:
        text.append(f"detail: {detail}")
    text += ["artifacts:"] + [f"  {a}" for a in sorted(artifacts)]
    (out / "MANIFEST").write_text("\n".join(text) + "\n")


def run_experiment(spec: ExperimentSpec, threads: int = 1, pipeline: Pipeline | None = None) -> dict:
    """Run the method chain over every configured direction.

    Writes ``report.json``, ``budget.csv`` (when a frequency method runs),
    one ``<method>.pgm`` per method, per-line files under ``lines/`` and a
    ``MANIFEST``. On failure the manifest records the failing stage and the
    error is re-raised.
    """
    spec.validate()
    if pipeline is None:
        with _stage("config"):
            cfg, geom = load_config(spec.config, spec.overrides)
            pipeline = Pipeline(cfg, geom, spec.cache_dir)
    pipe = pipeline
    out = spec.output
    out.mkdir(parents=True, exist_ok=True)
    (out / "lines").mkdir(exist_ok=True)
    artifacts: list[str] = []
    try:
        count = len(pipe.cfg.directions)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda i: _process(spec, pipe, i), range(count)))
        else:
            results = [_process(spec, pipe, i) for i in range(count)]

        with _stage("write"):
            for i, (lines, _) in enumerate(results):
                for method in spec.methods:
                    name = f"lines/{method}_{i:03d}.snqb"
                    write_frame(out / name, lines[method])
                    artifacts.append(name)
        if "image" in spec.metrics:
            with _stage("render"):
                for method in spec.methods:
                    image = render_lines([r[0][method] for r in results], pipe.geom.speed_of_sound,
                                         spec.image_size, pipe.cfg.dynamic_range_db)
                    write_pgm(out / f"{method}.pgm", image)
                    artifacts.append(f"{method}.pgm")

        per_line = [info for _, info in results]
        report = _report(spec, pipe, per_line)
        freq_methods = [m for m in spec.methods if m != "time"]
        if freq_methods and "budget" in spec.metrics:
            include_mu = any(m in spec.methods for m in ("omp", "l1"))
            rows = [dict(info, kappa=int(pipe.kappa.size), N=pipe.num_samples,
                         mu=spec.m if include_mu else 0) for info in per_line]
            (out / "budget.csv").write_text(_budget_csv(rows, include_mu))
            artifacts.append("budget.csv")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        artifacts.append("report.json")
    except Exception as exc:
        _write_manifest(out, artifacts, "incomplete", str(exc))
        raise
    _write_manifest(out, artifacts, "complete")
    return report


def _report(spec, pipe: Pipeline, per_line):
    n = pipe.num_samples
    report = {
        "schema_version": REPORT_SCHEMA,
        "package_version": __version__,
        "methods": list(spec.methods),
        "setup": {
            "elements": pipe.geom.num_elements,
            "directions": len(pipe.cfg.directions),
            "N": n,
            "sample_rate_hz": pipe.grid.sample_rate,
            "kernel_eps": pipe.cfg.kernel_eps,
            "seed": spec.seed,
            "phantom": None if spec.phantom is None else Path(spec.phantom).name,
        },
        "lines": per_line,
    }
    budget = {"N": n, "kappa": int(pipe.kappa.size), "kappa_fraction": _round(pipe.kappa.size / n)}
    if "nu" in per_line[0]:
        nus = [p["nu"] for p in per_line]
        budget.update({"nu_max": max(nus), "ratio_max": _round(max(nus) / pipe.kappa.size),
                       "reduction_min": _round(n / max(nus))})
    if "nu_mu" in per_line[0]:
        nus = [p["nu_mu"] for p in per_line]
        budget.update({"mu": spec.m, "nu_mu_max": max(nus), "reduction_mu_min": _round(n / max(nus))})
    if "budget" in spec.metrics:
        report["budget"] = budget
    if "nrmse" in spec.metrics:
        summary = {}
        for method in spec.methods:
            if method == "time":
                continue
            vals = [p[f"nrmse_{method}"] for p in per_line]
            summary[method] = {"mean": _round(float(np.mean(vals))), "max": _round(max(vals))}
        report["nrmse_vs_time"] = summary
    return report
