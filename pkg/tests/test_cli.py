import csv
import json

import numpy as np
import pytest

from morphassim import cli
from morphassim.fixtures import write_demo
from morphassim.io import read_fmat, write_fmat

COMMANDS = ["register", "transport", "rsvd", "similar", "pbdw", "pressure", "windkessel", "biomarkers"]


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    return write_demo(tmp_path_factory.mktemp("demo"))


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.mark.filterwarnings("ignore::UserWarning")
@pytest.mark.parametrize("command", COMMANDS)
def test_every_command_runs_and_writes_manifest(demo, command, tmp_path):
    out = tmp_path / command
    assert cli.run([command, "--config", str(demo / f"{command}.toml"), "--output", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == command and man["threads"] == 1
    for name in man["outputs"]:
        assert (out / name).is_file()


def test_manifest_rerun_reproduces_outputs(demo, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["pbdw", "--config", str(demo / "pbdw.toml"), "--output", str(a)]) == 0
    assert cli.run(["pbdw", "--config", str(a / "manifest.json"), "--output", str(b)]) == 0
    for name in json.loads((a / "manifest.json").read_text())["outputs"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_outputs_have_expected_content(demo, tmp_path):
    assert cli.run(["windkessel", "--config", str(demo / "windkessel.toml"), "--output", str(tmp_path / "w")]) == 0
    wk = rows(tmp_path / "w" / "windkessel.csv")
    assert sum(float(r["sigma"]) for r in wk) == pytest.approx(1.0, abs=1e-12)
    hi_snr = ["--set", "noise.snr_ho=1e3", "--set", "noise.snr_he=1e3"]
    assert cli.run(["pbdw", "--config", str(demo / "pbdw.toml"), "--output", str(tmp_path / "p")] + hi_snr) == 0
    truth = read_fmat(demo / "velocity_truth.fmat").reshape(-1)
    state = read_fmat(tmp_path / "p" / "state.fmat").reshape(-1)
    assert np.linalg.norm(state - truth) / np.linalg.norm(truth) < 0.01
    assert cli.run(["biomarkers", "--config", str(demo / "biomarkers.toml"), "--output", str(tmp_path / "b")]) == 0
    osi = [float(r["osi"]) for r in rows(tmp_path / "b" / "wall.csv")]
    assert min(osi) >= 0 and max(osi) <= 0.5


def test_exit_codes(demo, tmp_path, capsys):
    cfg = str(demo / "pbdw.toml")
    assert cli.run(["pbdw", "--config", cfg, "--set", "pbdw.bogus=1", "--output", str(tmp_path / "x")]) == 2
    assert "pbdw.bogus" in capsys.readouterr().err
    assert cli.run(["pbdw", "--config", cfg, "--set", "noise.preset=extreme", "--output", str(tmp_path / "x")]) == 2
    assert cli.run(["pbdw", "--config", str(tmp_path / "none.toml")]) == 2
    bad = tmp_path / "bad.fmat"
    bad.write_bytes(b"nope")
    assert cli.run(["pbdw", "--config", cfg, "--set", f"pbdw.basis='{bad}'", "--output", str(tmp_path / "y")]) == 4
    assert "I/O error" in capsys.readouterr().err
    zero = tmp_path / "zero.fmat"
    write_fmat(zero, np.zeros_like(read_fmat(demo / "velocity_truth.fmat")))
    assert cli.run(["pbdw", "--config", cfg, "--set", f"pbdw.truth='{zero}'", "--output", str(tmp_path / "z")]) == 3
    assert "numerical failure" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.run(["nope"])
