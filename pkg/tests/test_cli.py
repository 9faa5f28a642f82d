import pandas as pd
import pytest

from app.config import RunConfig
from app.main import EXIT_BLOWUP, EXIT_CONFIG, EXIT_OK, main
from app.services.errors import BlowUpError
from app.services.experiments import RUNNERS, ExperimentService
from app.services.snapshot_io import BLOWUP_MARKER, has_blowup_marker, read_basis_summary, read_manifest

SMALL = """
[grid]
n = 2
m = 16

[physics]
eta = 0.05
T = 0.004
dt = 0.001

[noise]
K = 1
seed = 0

[model]
variant = V1_HAMILTONIAN
particles = 3
identity_seeds = 2

[output]
cadence = 2
"""


def _run(command, config_path, output, *extra):
    return main([command, "--config", str(config_path), "--output", str(output), *extra])


def test_basis_check(write_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("basis-check", write_config(SMALL), out) == EXIT_OK
    directory = out / "basis-check"
    summary = read_basis_summary(directory / "basis_audit.csv")
    assert summary["c_K"] == pytest.approx(2.0)
    assert summary["epsilon_K"] == pytest.approx(0.0, abs=1e-14)
    config_text = (directory / "config.ini").read_text()
    assert config_text.startswith("[grid]")
    assert "[derived]" in config_text
    assert "✅ basis-check finished" in capsys.readouterr().out


def test_invalid_configuration_exits_with_two(write_config, tmp_path, capsys):
    path = write_config(SMALL.replace("m = 16", "m = 12"))
    assert _run("reference", path, tmp_path / "out") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "error key=grid.m message=" in err
    assert not (tmp_path / "out").exists()


def test_unknown_subcommand_is_rejected(write_config, tmp_path):
    with pytest.raises(SystemExit):
        _run("forecast", write_config(SMALL), tmp_path)


def test_reference_runs_are_byte_identical(write_config, tmp_path):
    path = write_config(SMALL)
    outputs = []
    for name in ("a", "b"):
        assert _run("reference", path, tmp_path / name) == EXIT_OK
        directory = tmp_path / name / "reference"
        outputs.append({p.name: p.read_bytes() for p in sorted(directory.iterdir())})
    assert outputs[0] == outputs[1]
    assert {"config.ini", "energy.csv", "manifest.json"} <= set(outputs[0])
    table = pd.read_csv(tmp_path / "a" / "reference" / "energy.csv")
    assert list(table.columns) == ["t", "E_d", "heat_flow_deviation", "divergence_max"]
    assert table["t"].tolist() == pytest.approx([0.0, 0.002, 0.004])


def test_ips_tables_do_not_depend_on_workers(write_config, tmp_path):
    path = write_config(SMALL)
    tables = []
    for name, workers in (("one", "1"), ("four", "4")):
        assert _run("ips", path, tmp_path / name, "--workers", workers) == EXIT_OK
        tables.append((tmp_path / name / "ips" / "energy.csv").read_bytes())
    assert tables[0] == tables[1]
    manifest = read_manifest(tmp_path / "one" / "ips")
    assert manifest["variant"] == "V1_HAMILTONIAN"
    assert [entry["step"] for entry in manifest["snapshots"]] == [0, 2, 4]


def test_seed_override_changes_the_particles(write_config, tmp_path):
    path = write_config(SMALL)
    assert _run("ips", path, tmp_path / "s0") == EXIT_OK
    assert _run("ips", path, tmp_path / "s5", "--seed", "5") == EXIT_OK
    first = (tmp_path / "s0" / "ips" / "energy.csv").read_bytes()
    second = (tmp_path / "s5" / "ips" / "energy.csv").read_bytes()
    assert first != second
    assert "seed = 5" in (tmp_path / "s5" / "ips" / "config.ini").read_text()


def test_blowup_keeps_partial_outputs(write_config, tmp_path, monkeypatch, capsys):
    def exploding_reference(u0, eta, dt, T, store_every=1, progress=False, observer=None):
        observer(0, 0.0, u0.components)
        raise BlowUpError("non-finite energy", 1, dt)

    monkeypatch.setattr("app.services.experiments.run_reference", exploding_reference)
    assert _run("reference", write_config(SMALL), tmp_path) == EXIT_BLOWUP
    table = tmp_path / "reference" / "energy.csv"
    assert has_blowup_marker(table)
    lines = table.read_text().splitlines()
    assert len(lines) == 3
    assert lines[-1].startswith(BLOWUP_MARKER + ",")
    assert "error key=blowup" in capsys.readouterr().err


def test_service_clears_stale_artifacts(tmp_path):
    config = RunConfig.from_ini(SMALL).with_overrides(directory=str(tmp_path))
    service = ExperimentService("basis-check", config, workers=1)
    service.directory.mkdir(parents=True)
    (service.directory / "old.csv").write_text("stale")
    summary = service.run()
    assert not (service.directory / "old.csv").exists()
    assert (service.directory / "basis_audit.csv").exists()
    assert summary["basis_count"] == 6
    assert sorted(RUNNERS) == ["basis-check", "circulation", "ips", "meanfield", "picard", "reference"]
