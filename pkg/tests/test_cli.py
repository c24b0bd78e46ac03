import csv
import json
import os

import pytest

from mimo_outage import cli, matrixio


def write_config(tmp_path, body, name="exp.ini"):
    path = tmp_path / name
    path.write_text(body)
    return str(path)


SMALL_OUTAGE_GRID = """\
[scenario]
name = fig3
output = out
seeds = 1

[network]
users = 3
n_tx = 2
n_rx = 2
streams = 1

[sweep]
snr_db = 15
k_factor_db = 10, inf
rate_points = 4
known_desired = false

[monte_carlo]
trials = 4000
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfigErrors:
    @pytest.mark.parametrize("patch,key", [
        (("trials = 4000", "trial = 4000"), "monte_carlo.trial"),
        (("rate_points = 4", "rate_points = four"), "sweep.rate_points"),
        (("k_factor_db = 10, inf", "k_factor_db = 20, 10"), "k_factor_db"),
        (("name = fig3", "name = fig99"), "scenario.name"),
        (("streams = 1", "streams = 3"), "network.d"),
    ])
    def test_exit_code_two_names_key(self, tmp_path, capsys, patch, key):
        path = write_config(tmp_path, SMALL_OUTAGE_GRID.replace(*patch))
        assert cli.main(["run", path]) == 2
        assert key in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "absent.ini")]) == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["outage"])
        assert exc.value.code == 2

    def test_bad_network_flag(self):
        assert cli.main(["outage", "--rate", "1", "--rho", "2.0"]) == 2


class TestRun:
    def test_artifacts_and_rerun_identical(self, tmp_path):
        path = write_config(tmp_path, SMALL_OUTAGE_GRID)
        assert cli.main(["run", path]) == 0
        out = tmp_path / "out"
        first = (out / "results.csv").read_bytes()
        rows = read_rows(out / "results.csv")
        assert tuple(rows[0].keys()) == tuple(cli.RESULT_COLUMNS)
        assert len(rows) == 2 * 4
        assert {r["k_factor_db"] for r in rows} == {"10", "inf"}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [1]
        assert manifest["checks_passed"] is True
        assert "PASS" in (out / "summary.txt").read_text()

        assert cli.main(["run", path, "--output", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "results.csv").read_bytes() == first

    def test_workers_do_not_change_output(self, tmp_path):
        serial = write_config(tmp_path, SMALL_OUTAGE_GRID, "a.ini")
        pooled = write_config(tmp_path, SMALL_OUTAGE_GRID.replace(
            "seeds = 1", "seeds = 1\nworkers = 2"), "b.ini")
        assert cli.main(["run", serial, "--output", str(tmp_path / "s")]) == 0
        assert cli.main(["run", pooled, "--output", str(tmp_path / "p")]) == 0
        assert ((tmp_path / "s" / "results.csv").read_bytes()
                == (tmp_path / "p" / "results.csv").read_bytes())

    def test_interrupt_keeps_finished_points(self, tmp_path, monkeypatch):
        real = cli._fig3_point

        def stop_at_second(task):
            if task[2] != 10.0:
                raise KeyboardInterrupt
            return real(task)
        monkeypatch.setattr(cli, "_fig3_point", stop_at_second)
        path = write_config(tmp_path, SMALL_OUTAGE_GRID)
        assert cli.main(["run", path]) == 130
        rows = read_rows(tmp_path / "out" / "results.csv")
        assert len(rows) == 4 and {r["k_factor_db"] for r in rows} == {"10"}
        assert json.loads((tmp_path / "out" / "manifest.json").read_text())["interrupted"]
        assert "FAIL" in (tmp_path / "out" / "summary.txt").read_text()

    def test_fig2_scenario(self, tmp_path):
        path = write_config(tmp_path, "[scenario]\nname = fig2\noutput = f2\n"
                                      "[series]\nterms = 5, 10, 15\n")
        assert cli.main(["run", path]) == 0
        rows = read_rows(tmp_path / "f2" / "results.csv")
        assert len(rows) == 3 * 2 * 3


class TestSubcommands:
    def test_outage_prints_json(self, capsys):
        assert cli.main(["outage", "--rate", "1.0", "--k-factor-db", "10",
                         "--trials", "2000"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert 0.0 <= out["probability"] <= 1.0
        assert out["method"].startswith("corollary") or out["method"] == "theorem1"
        assert {"mc", "mc_se", "tau", "terms_used"} <= out.keys()

    def test_series_compare(self, tmp_path, capsys):
        assert cli.main(["series-compare", "--terms", "5", "15",
                         "--output", str(tmp_path)]) == 0
        assert len(read_rows(tmp_path / "results.csv")) == 2 * 2 * 3
        assert "laguerre_mse" in capsys.readouterr().out

    def test_mc_validate_small(self, tmp_path):
        assert cli.main(["mc-validate", "--instances", "3", "--samples", "40000",
                         "--output", str(tmp_path)]) == 0
        assert len(read_rows(tmp_path / "results.csv")) == 30

    def test_sweep(self, tmp_path):
        assert cli.main(["sweep", "--k-factor-db", "20", "--rate-points", "3",
                         "--trials", "2000", "--output", str(tmp_path)]) == 0
        assert len(read_rows(tmp_path / "results.csv")) == 3

    def test_design_twice_identical(self, tmp_path):
        args = ["design", "--designer", "proposed", "--seed", "7"]
        assert cli.main(args + ["--output", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--output", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "results.csv").read_bytes()
        assert a == (tmp_path / "b" / "results.csv").read_bytes()
        beams = matrixio.load_beams(str(tmp_path / "a" / "beams.txt"))
        assert beams.is_unit_norm()
        assert os.path.exists(tmp_path / "a" / "channels.txt")

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip()
