import json
from pathlib import Path

import numpy as np
import pytest

from fdbeam.cli import main
from fdbeam.experiment import ExperimentSpec, load_experiment, run_experiment
from fdbeam.errors import ConfigError
from fdbeam.frames import read_frame, read_line
from fdbeam.image import read_pgm

SMALL = ["--set", "lines=3", "--set", "elements=8", "--set", "reference_index=4",
         "--set", "depth=2.464 cm", "--set", "kernel_eps=0.001"]

EXPERIMENT = """
methods = {methods}
output = "run"
seed = 3
reflectors = 3
m = 40
L = 3
image_size = [48, 40]

[set]
lines = "3"
elements = "8"
reference_index = "4"
depth = "2.464 cm"
kernel_eps = "0.001"
"""


def test_print_grid(capsys):
    assert main(["--print-grid"]) == 0
    out = capsys.readouterr().out
    assert "N = 3324" in out and "359 bins" in out


def test_bad_config_value_exit_code(capsys):
    assert main(["--print-grid", "--set", "kernel_eps=3"]) == 2
    assert "kernel_eps" in capsys.readouterr().err


def test_simulate_beamform_render_pipeline(tmp_path, capsys):
    fr, bf = tmp_path / "fr", tmp_path / "bf"
    assert main(["simulate", "-o", str(fr), "--reflectors", "3", *SMALL]) == 0
    frames = sorted(fr.iterdir())
    assert len(frames) == 3
    assert read_frame(frames[0]).samples.shape == (8, 512)
    budget = tmp_path / "budget.csv"
    assert main(["beamform", "--method", "freq", *map(str, frames), "-o", str(bf),
                 "--budget-report", str(budget), *SMALL]) == 0
    header, *rows = budget.read_text().splitlines()
    assert header == "theta,kappa,nu,ratio,N,reduction" and len(rows) == 3
    assert main(["beamform", "--method", "time", *map(str, frames), "-o", str(bf), *SMALL]) == 0
    freq_lines = sorted(bf.glob("*.freq.snqb"))
    assert len(freq_lines) == 3 and read_line(freq_lines[0]).samples.size == 512
    out = tmp_path / "img.pgm"
    assert main(["render", *map(str, freq_lines), "--size", "40x30", "-o", str(out), *SMALL]) == 0
    assert read_pgm(out).shape == (30, 40)
    assert main(["kernel", "stats", "--line", "1", "--m", "40", *SMALL]) == 0
    assert "nu_mu" in capsys.readouterr().out
    assert main(["kernel", "build", "--line", "0", "--cache-dir", str(tmp_path / "k"), *SMALL]) == 0
    assert len(list((tmp_path / "k").glob("*.snqk"))) == 1


def test_recover_writes_report(tmp_path):
    fr = tmp_path / "fr"
    main(["simulate", "-o", str(fr), "--reflectors", "2", "--line", "1", *SMALL])
    frame = next(fr.iterdir())
    assert main(["recover", "--method", "omp", "--m", "40", "--L", "2", str(frame),
                 "-o", str(tmp_path / "rc"), *SMALL]) == 0
    report = json.loads(next((tmp_path / "rc").glob("*.json")).read_text())
    assert report["method"] == "omp" and report["mu"] == 40 and "nrmse_vs_time" in report


def test_missing_input_and_bad_args(tmp_path):
    assert main(["beamform", "--method", "time", str(tmp_path / "nope.snqb"), "-o",
                 str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["beamform", "--method", "cubic", "x", "-o", "y"])
    assert exc.value.code == 2


def test_structural_mismatch_exit_code(tmp_path):
    fr = tmp_path / "fr"
    main(["simulate", "-o", str(fr), "--reflectors", "1", "--line", "0", *SMALL])
    frame = next(fr.iterdir())
    # frame has 8 elements, default config has 64
    assert main(["beamform", "--method", "time", str(frame), "-o", str(tmp_path / "o"),
                 "--set", "depth=2.464 cm"]) == 2


def _write_spec(tmp_path, methods):
    p = tmp_path / "exp.toml"
    p.write_text(EXPERIMENT.format(methods=json.dumps(methods)))
    return p


def test_experiment_is_byte_identical(tmp_path):
    spec_path = _write_spec(tmp_path, ["time", "freq", "omp", "l1"])
    assert main(["experiment", str(spec_path), "-o", str(tmp_path / "a")]) == 0
    assert main(["experiment", str(spec_path), "-o", str(tmp_path / "b"), "--threads", "2"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert Path("report.json") in names and Path("l1.pgm") in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    report = json.loads((a / "report.json").read_text())
    assert report["schema_version"] == 1
    assert report["budget"]["N"] == 512 and report["budget"]["mu"] == 40
    assert set(report["nrmse_vs_time"]) == {"freq", "omp", "l1"}
    assert report["nrmse_vs_time"]["freq"]["max"] <= 0.1
    assert (a / "MANIFEST").read_text().startswith("status: complete")


def test_empty_chain_is_rejected_without_artifacts(tmp_path):
    spec_path = _write_spec(tmp_path, [])
    assert main(["experiment", str(spec_path)]) == 2
    assert not (tmp_path / "run").exists()


def test_unknown_method_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cubic"):
        load_experiment(_write_spec(tmp_path, ["time", "cubic"]))


def test_failed_stage_leaves_manifest(tmp_path):
    spec_path = _write_spec(tmp_path, ["time", "freq"])
    spec = load_experiment(spec_path, tmp_path / "out")
    from dataclasses import replace
    spec = replace(spec, reflectors=50)
    with pytest.raises(ConfigError, match="stage phantom"):
        run_experiment(spec)
    manifest = (tmp_path / "out" / "MANIFEST").read_text()
    assert manifest.startswith("status: incomplete") and "stage phantom" in manifest
