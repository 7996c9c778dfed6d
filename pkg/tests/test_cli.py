import csv
import json

import pytest

from madtd.cli import build_parser, cell_name, expand_grid, load_grid, main, resolve_config, sha256_file
from madtd.trainer import PRESETS


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr()


def test_alpha_out_of_range_is_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--alpha", "1.5"])
    assert exc.value.code == 2
    assert "[0, 1]" in capsys.readouterr().err


@pytest.mark.parametrize("flag", [["--utd", "0"], ["--batch-size", "-3"], ["--action-source", "greedy"], ["--steps", "x"]])
def test_bad_train_flags_exit_nonzero(flag):
    with pytest.raises(SystemExit) as exc:
        main(["train", *flag])
    assert exc.value.code != 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "tiny", "utd": 3, "alpha": 0.2}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--alpha", "0.1", "--action-source", "random", "--mpc", "on"])
    c = resolve_config(args)
    assert c.utd == 3 and c.alpha == 0.1
    assert c.hidden == PRESETS["tiny"]["hidden"]
    assert c.action_source == "uniform_random"
    assert c.mpc is True


def test_stability_divergent_example(capsys):
    code, out = run(["stability", "--example", "divergent2state", "--quiet"], capsys)
    assert code == 0
    rep = json.loads(out.out)
    assert rep["diverged"] is True
    assert rep["min_eig_key"] < 0


def test_stability_random_onpolicy_is_positive(capsys):
    code, out = run(["stability", "--random", "--states", "5", "--actions", "2", "--gamma", "0.9", "--onpolicy", "--quiet"], capsys)
    assert code == 0
    assert json.loads(out.out)["min_eig_key"] > 0


def test_stability_same_seed_same_json(tmp_path, capsys):
    argv = ["stability", "--random", "--seed", "4", "--horizon", "5"]
    main(argv + ["--out", str(tmp_path / "a.json")])
    main(argv + ["--out", str(tmp_path / "b.json")])
    capsys.readouterr()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_stability_unknown_example_lists_options(capsys):
    code, out = run(["stability", "--example", "nope"], capsys)
    assert code == 2
    assert "divergent2state" in out.err


def test_regret_command(capsys):
    code, out = run(["regret", "--returns", "0,10", "--r-star", "10"], capsys)
    assert code == 0
    assert json.loads(out.out)["regret"]["returns"] == 5.0


def test_grid_expansion_counts(tmp_path):
    g = tmp_path / "g.json"
    g.write_text(json.dumps({"base": {"preset": "tiny"}, "grid": {"utd": [1, 8], "alpha": [0.0, 0.05]}}))
    base, cells = load_grid(g)
    jobs = expand_grid(base, cells, range(5))
    assert len(jobs) == 20
    assert len({name for name, _ in jobs}) == 4
    assert len({cfg.run_name() for _, cfg in jobs}) == 20


def test_explicit_cells_and_names(tmp_path):
    g = tmp_path / "g.json"
    g.write_text(json.dumps({"base": {"name": "x"}, "cells": [{"utd": 8, "alpha": 0.05, "reset_interval": 100}]}))
    base, cells = load_grid(g)
    assert cells == [{"utd": 8, "alpha": 0.05, "reset_interval": 100}]
    assert cell_name(cells[0]) == "utd8_alpha0.05_reset_interval100"
    (_, cfg), = expand_grid(base, cells, [3])
    assert cfg.run_name() == "x/utd8_alpha0.05_reset_interval100/s3"


def test_train_and_one_cell_sweep_agree(tmp_path, capsys):
    flags = ["--preset", "tiny", "--steps", "600", "--utd", "2", "--seed", "0"]
    code, out = run(["train", *flags, "--name", "single", "--runs-dir", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out.out)["run"] == "single"
    manifest = json.loads((tmp_path / "single" / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert manifest["checksums"]["metrics.csv"] == sha256_file(tmp_path / "single" / "metrics.csv")

    g = tmp_path / "g.json"
    g.write_text(json.dumps({"base": {"preset": "tiny", "steps_total": 600, "name": "sw"}, "grid": {"utd": [2]}}))
    code, out = run(["sweep", "--grid", str(g), "--seeds", "1", "--runs-dir", str(tmp_path)], capsys)
    assert code == 0
    swept = tmp_path / "sw" / "utd2" / "s0" / "metrics.csv"
    assert swept.read_bytes() == (tmp_path / "single" / "metrics.csv").read_bytes()
    with open(tmp_path / "sw" / "table.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["cell"] == "utd2" and rows[0]["n_seeds"] == "1"
    # one seed: zero-width interval
    assert rows[0]["final_return_lo"] == rows[0]["final_return_hi"] == rows[0]["final_return_mean"]


def test_probe_command_on_finished_run(tmp_path, capsys):
    main(["train", "--preset", "tiny", "--name", "p", "--runs-dir", str(tmp_path)])
    capsys.readouterr()
    code, out = run(["probe", str(tmp_path / "p"), "--episodes", "1", "--max-states", "8"], capsys)
    assert code == 0
    rep = json.loads(out.out)
    assert rep["overestimation"] == pytest.approx(rep["q_mean"] - rep["mc_return_mean"])
