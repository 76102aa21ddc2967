import json
from pathlib import Path

import numpy as np
import pytest

from conftest import decay_counting
from contmeas.cli import EXIT_CONFIG, EXIT_MODEL, EXIT_NUMERIC, main
from contmeas.io import emit_model, read_csv

MODELS = Path(__file__).parent.parent / "models"
FAST = ["--t-max", "0.2", "--dt", "1e-3", "--stride", "50"]


def run(cmd, model, out, *extra):
    return main([cmd, "--model", str(MODELS / model), "--out", str(out), *extra])


@pytest.mark.parametrize("cmd,files", [
    ("master", ["master.csv", "master.json"]),
    ("traj", ["traj.csv", "traj.json"]),
    ("ensemble", ["ensemble.csv", "ensemble.json"]),
    ("moments", ["moments.csv", "moments.json"]),
    ("info", ["info.csv", "info.json"]),
    ("purify", ["purify.csv", "purify.json"]),
])
def test_subcommands_write_outputs(tmp_path, cmd, files):
    extra = FAST if cmd == "master" else FAST + ["--n", "20", "--seed", "3"]
    assert run(cmd, "driven_mixed.json", tmp_path, *extra) == 0
    for name in files:
        assert (tmp_path / name).stat().st_size > 0
    meta = json.loads((tmp_path / files[1]).read_text())
    assert meta["schema_version"] == 1


def test_master_first_row_is_initial_state(tmp_path):
    assert run("master", "decay_homodyne.json", tmp_path, *FAST, "--state", "0") == 0
    cols, body = read_csv(tmp_path / "master.csv")
    assert body[0, 0] == 0.0
    row = dict(zip(cols, body[0]))
    assert row["re_00"] == 1.0 and row["re_11"] == 0.0


def test_check_reports_unobserved_channel(tmp_path, capsys):
    assert run("check", "dephasing_unobserved.json", tmp_path) == 0
    verdict = json.loads((tmp_path / "check.json").read_text())
    assert verdict["quasi_complete"] is False
    assert "quasi_complete" in capsys.readouterr().out


def test_identical_invocations_give_identical_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("ensemble", "decay_counting.json", out, *FAST, "--n", "30", "--seed", "11") == 0
    assert (a / "ensemble.csv").read_bytes() == (b / "ensemble.csv").read_bytes()


def test_model_errors_exit_4(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"H": [[[0, 0], [1, 0]], [[0, 0], [0, 0]]]}')
    assert main(["master", "--model", str(bad), "--out", str(tmp_path)]) == EXIT_MODEL
    bad.write_text("{ not json")
    assert main(["check", "--model", str(bad), "--out", str(tmp_path)]) == EXIT_MODEL


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["master", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert run("master", "decay_homodyne.json", tmp_path, "--state", "5") == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        run("ensemble", "decay_homodyne.json", tmp_path, "--n", "0")
    assert info.value.code == EXIT_CONFIG


def test_numerical_errors_exit_3(tmp_path):
    m = decay_counting()
    fast = type(m)(H=m.H, jumps=[([20 * m.jumps[0].kraus[0]], 1.0)])
    path = tmp_path / "fast.json"
    path.write_text(emit_model(fast))
    code = main(["ensemble", "--model", str(path), "--out", str(tmp_path), "--engine", "posterior",
                 "--t-max", "0.1", "--dt", "1e-2", "--n", "5", "--state", "0"])
    assert code == EXIT_NUMERIC


def test_state_option_accepts_matrix(tmp_path):
    state = json.dumps([[[0.5, 0], [0, 0]], [[0, 0], [0.5, 0]]])
    assert run("master", "qnd_sigmaz.json", tmp_path, *FAST, "--state", state) == 0
    cols, body = read_csv(tmp_path / "master.csv")
    assert np.allclose(body[:, cols.index("re_00")], 0.5)
