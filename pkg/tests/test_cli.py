import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hetgc.cli import main
from hetgc.design import CodeDesign

DEFAULTS = Path(__file__).resolve().parents[1] / "configs" / "defaults.ini"

SMALL = """
[scenario]
seed = 3
[workers]
k = 6
[budget]
l = 32
z_res = 12
[schemes]
run = ideal_sgd, proposed
[loss]
partitions = 10
[optimizer]
lr = 0.05
iterations = 40
trials = 2
"""


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_allocate_rows_and_gaps(tmp_path):
    assert main(["allocate", "--config", str(DEFAULTS), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "allocate.csv")
    assert [r["solver"] for r in rows] == ["dp", "proposed", "greedy", "lagrangian", "equal"]
    assert list(rows[0]) == ["solver", "Z_res", "F", "gap_to_DP", "wall_time_ms"]
    assert float(rows[0]["gap_to_DP"]) == 0.0
    assert all(float(r["gap_to_DP"]) >= 0 for r in rows)


def test_allocate_sweep(tmp_path):
    cfg = write(tmp_path, "[workers]\nk = 4\n[budget]\nl = 64\nz_res = 0 5 9\n")
    assert main(["allocate", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "allocate.csv")
    assert len(rows) == 15
    assert [int(r["Z_res"]) for r in rows[::5]] == [0, 5, 9]
    assert all(float(r["gap_to_DP"]) == 0.0 for r in rows if r["solver"] == "dp")


def test_proposed_beats_greedy_on_most_seeds(tmp_path):
    wins = 0
    for seed in range(20):
        out = tmp_path / str(seed)
        assert main(["allocate", "--config", str(DEFAULTS), "--seed", str(seed), "--out", str(out)]) == 0
        gaps = {r["solver"]: float(r["gap_to_DP"]) for r in read_csv(out / "allocate.csv")}
        wins += gaps["proposed"] <= gaps["greedy"]
    assert wins >= 18


def test_design_dump(tmp_path, capsys):
    assert main(["design", "--config", str(DEFAULTS), "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    load = float(text.split("load d = ")[1].split()[0])
    assert load <= 2.0
    sums = text.split("effective column sums: ")[1].splitlines()[0].split()
    assert len(sums) == 20 and set(sums) == {"1.000000"}
    d = CodeDesign.load(tmp_path / "design.json")
    assert d.k == 10 and d.n == 20
    again = tmp_path / "again"
    assert main(["design", "--config", str(DEFAULTS), "--out", str(again)]) == 0
    assert (again / "design.json").read_bytes() == (tmp_path / "design.json").read_bytes()


def test_design_rejects_ideal(tmp_path):
    assert main(["design", "--config", str(DEFAULTS), "--scheme", "ideal_sgd", "--out", str(tmp_path)]) == 2


def test_run_outputs(tmp_path):
    cfg = write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(a)]) == 0
    assert main(["run", "--config", cfg, "--out", str(b)]) == 0
    assert (a / "run.csv").read_bytes() == (b / "run.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    raw = (a / "run.csv").read_bytes()
    assert b"\r" not in raw
    rows = read_csv(a / "run.csv")
    assert list(rows[0]) == ["scheme", "iteration", "mean_loss", "se_loss", "mean_grad_sq",
                             "mean_dist_sq", "cum_bits"]
    schemes = [r["scheme"] for r in rows]
    assert sorted(set(schemes)) == ["ideal_sgd", "proposed"] and len(rows) == 2 * 41
    for name in ("ideal_sgd", "proposed"):
        cum = [float(r["cum_bits"]) for r in rows if r["scheme"] == name]
        assert np.all(np.diff(cum) >= 0)
    summary = json.loads((a / "summary.json").read_text())
    assert summary["schemes"]["proposed"]["bound_checks"] == {"strongly_convex": None, "smooth": None}
    assert sum(summary["schemes"]["proposed"]["bits_per_worker"]) == 12 + 2 * 6


def test_run_seed_changes_output(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "run.csv").read_bytes() != (tmp_path / "b" / "run.csv").read_bytes()


def test_run_scheme_override(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["run", "--config", cfg, "--scheme", "sgc:d=2", "--out", str(tmp_path)]) == 0
    assert {r["scheme"] for r in read_csv(tmp_path / "run.csv")} == {"sgc:d=2"}


def test_run_reports_bound_checks(tmp_path):
    text = SMALL.replace("lr = 0.05", "schedule = inv_lambda_t").replace("iterations = 40", "iterations = 200")
    cfg = write(tmp_path, text)
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 0
    checks = json.loads((tmp_path / "summary.json").read_text())["schemes"]
    assert checks["proposed"]["bound_checks"]["strongly_convex"] is True
    assert checks["ideal_sgd"]["bound_checks"]["strongly_convex"] is None


def test_run_defaults_proposed_beats_bgc(tmp_path):
    assert main(["run", "--config", str(DEFAULTS), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())["schemes"]
    assert summary["proposed"]["final_mean_loss"] <= summary["bgc:d=2"]["final_mean_loss"]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    cfg = write(tmp_path, "[workers]\nk = 3\n[budget]\nl = 8\nz_res = 2\n")
    monkeypatch.setenv("HETGC_OUT", str(tmp_path / "env"))
    assert main(["allocate", "--config", cfg]) == 0
    assert (tmp_path / "env" / "allocate.csv").exists()
    cfg2 = write(tmp_path, f"[budget]\nl = 8\n[output]\ndir = {tmp_path / 'conf'}\n", "d.ini")
    assert main(["allocate", "--config", cfg2]) == 0
    assert (tmp_path / "conf" / "allocate.csv").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--config", "EMPTY"],
    ["verify", "--config", "EMPTY"],
    ["allocate", "--config", "/nonexistent.ini"],
    ["run", "--config", "DEFAULTS", "--eta", "-1"],
    ["run", "--config", "DEFAULTS", "--scheme", "ehd"],
    ["run", "--config", "DEFAULTS", "--seed", "-3"],
    ["verify", "--only", "nonsense"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    empty = write(tmp_path, "")
    argv = [empty if a == "EMPTY" else str(DEFAULTS) if a == "DEFAULTS" else a for a in argv]
    assert main(argv) == 2
    assert "hetgc:" in capsys.readouterr().err


def test_config_error_shows_line(tmp_path, capsys):
    cfg = write(tmp_path, "[workers]\nk = 4\n\n[budget]\nl = -1\n")
    assert main(["allocate", "--config", cfg]) == 2
    assert f"{cfg}:5:" in capsys.readouterr().err


def test_missing_config_flag_is_argparse_error():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2


def test_verify_subset(capsys):
    assert main(["verify", "--only", "dp_optimality", "design_structure"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2 and "2/2 checks passed" in out
