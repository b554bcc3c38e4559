import csv
import json
import shutil

import numpy as np
import pytest
import tomli

from dtcs import cli, report
from dtcs.data import ingest_csv
from dtcs.diagnostics import GS_EQ12, GS_SAMPLE_STD, gs
from dtcs.scheduler import SEARCH_SPACE

TINY = """
[data]
source = "synthetic"
preset = "fig1-bench"

[data.synthetic]
samples_per_domain = 240

[train]
iterations = 40
epoch_length = 10
hidden = [8]
expert_epochs = 2

[experiment]
seeds = [0]
target_domain = 0

[diagnostics]
conflict_every = 5
"""

RUN_FILES = {"config.resolved", "record.jsonl", "diag.json", "summary.csv", "model.ckpt"}
METRICS = ("target_acc", "pooled_val_acc", "total_loss_std", "neg_frac")


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def only_run(out):
    dirs = [d for d in out.iterdir() if d.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


class TestParsing:
    def test_seed_ranges(self):
        assert cli.parse_seeds("0-3,7") == [0, 1, 2, 3, 7]

    def test_grid(self):
        assert cli.parse_grid("lr=0.05,0.01;tau=2") == {"lr": [0.05, 0.01], "tau": [2.0]}

    def test_grid_unknown_key(self):
        with pytest.raises(Exception):
            cli.parse_grid("depth=3")


class TestRun:
    def test_structure(self, config, tmp_path):
        out = tmp_path / "erm"
        assert run("run", "--config", config, "--method", "erm", "--seeds", "0", "--out", out) == 0
        d = only_run(out)
        assert RUN_FILES <= {p.name for p in d.iterdir()}
        assert (out / "aggregate.csv").exists() and (out / "aggregate.md").exists()
        rows = read_csv(d / "summary.csv")
        assert len(rows) == 1 and rows[0]["method"] == "erm"

    def test_erm_equivalence(self, config, tmp_path):
        run("run", "--config", config, "--method", "erm", "--seeds", "0", "--out", tmp_path / "a")
        run("run", "--config", config, "--method", "dtcs", "--prophet", "mp", "--alpha", "1.0", "--no-dcb",
            "--seeds", "0", "--out", tmp_path / "b")
        a = read_csv(only_run(tmp_path / "a") / "summary.csv")[0]
        b = read_csv(only_run(tmp_path / "b") / "summary.csv")[0]
        for key in METRICS:
            assert a[key] == b[key]

    def test_rerun_byte_identical(self, config, tmp_path):
        for name in ("a", "b"):
            run("run", "--config", config, "--seeds", "0", "--out", tmp_path / name)
        a = (only_run(tmp_path / "a") / "record.jsonl").read_bytes()
        b = (only_run(tmp_path / "b") / "record.jsonl").read_bytes()
        assert a == b

    def test_flags_override_file(self, config, tmp_path):
        run("run", "--config", config, "--method", "erm", "--lr", "0.02", "--seeds", "1", "--out", tmp_path)
        resolved = tomli.loads((only_run(tmp_path) / "config.resolved").read_text())
        assert resolved["train"]["lr"] == 0.02 and resolved["experiment"]["seeds"] == [1]

    def test_all_targets(self, config, tmp_path):
        assert run("run", "--config", config, "--method", "erm", "--all-targets", "--out", tmp_path) == 0
        assert len([d for d in tmp_path.iterdir() if d.is_dir()]) == 4

    def test_numeric_failure(self, config, tmp_path):
        text = config.read_text().replace("[experiment]", "[experiment]\nallow_out_of_range = true")
        config.write_text(text)
        with np.errstate(all="ignore"):
            code = run("run", "--config", config, "--method", "erm", "--lr", "1e200", "--out", tmp_path)
        assert code == 1
        d = only_run(tmp_path)
        assert (d / "failure.json").exists() and (d / "record.jsonl").exists()
        assert "iteration" in json.loads((d / "failure.json").read_text())


class TestConfigErrors:
    @pytest.mark.parametrize("text,field", [("[train]\nalpah = 0.1\n", "train.alpah"),
                                            ("[train]\nalpha = 1.5\n", "train.alpha"),
                                            ("[experiment]\nseeds = []\n", "experiment.seeds"),
                                            ("[model]\nx = 1\n", "model")])
    def test_field_level_message(self, tmp_path, capsys, text, field):
        path = tmp_path / "bad.toml"
        path.write_text(text)
        assert run("run", "--config", path, "--out", tmp_path / "o") == 2
        assert field in capsys.readouterr().err

    def test_missing_csv(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text('[data]\nsource = "csv"\ncsv_path = "nowhere.csv"\n')
        assert run("run", "--config", path) == 2
        assert "nowhere.csv" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run("run", "--config", tmp_path / "absent.toml") == 2


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    path = root / "tiny.toml"
    path.write_text(TINY)
    assert run("ablate", "--config", path, "--seeds", "0", "--out", root / "out") == 0
    return path, root


class TestAblate:
    def test_four_rows_and_columns(self, ablation):
        _, root = ablation
        table = read_csv(root / "out" / "ablation.csv")
        assert [r["label"] for r in table] == ["A", "B", "C", "D"]
        md = (root / "out" / "ablation.md").read_text().splitlines()
        header = [c.strip() for c in md[0].strip("|").split("|")]
        acc = [c for c in header if c.startswith("t") and c.endswith("acc")] + [c for c in header if c == "avg_acc"]
        assert len(acc) == 4 + 1 and len(md) == 2 + 4

    def test_row_a_matches_standalone_erm(self, ablation, tmp_path):
        path, root = ablation
        run("run", "--config", path, "--method", "erm", "--seeds", "0", "--target-domain", "0", "--out", tmp_path)
        erm = read_csv(only_run(tmp_path) / "summary.csv")[0]
        row_a = read_csv(root / "out" / "A-t0-s0" / "summary.csv")[0]
        for key in METRICS:
            assert erm[key] == row_a[key]

    def test_report_gs_consistent(self, ablation, tmp_path):
        _, root = ablation
        assert run("report", root / "out", "--out", tmp_path) == 0
        for row in read_csv(tmp_path / "report.csv"):
            accs = [float(row[f"t{t}_acc"]) for t in range(4)]
            assert float(row["gs_sample_std"]) == gs(accs, GS_SAMPLE_STD)
            assert float(row["gs_eq12"]) == gs(accs, GS_EQ12)
        assert (tmp_path / "figures" / "accuracy.png").exists()
        assert (tmp_path / "report.md").exists()


class TestSweep:
    def test_default_grid_cardinality(self):
        assert len(cli.sweep_points(SEARCH_SPACE)) == 4 * 4 * 3 * 2

    def test_points_in_lexicographic_order(self):
        points = cli.sweep_points({"lr": [0.05, 0.01], "tau": [2.0, 1.0]})
        assert [(p["lr"], p["tau"]) for p in points] == [(0.01, 1.0), (0.01, 2.0), (0.05, 1.0), (0.05, 2.0)]

    def test_tie_selects_first(self):
        scores = [({"lr": 0.01}, 80.0), ({"lr": 0.02}, 90.0), ({"lr": 0.03}, 90.0)]
        assert cli.select_best(scores) == 1

    def test_single_point_equals_run(self, config, tmp_path):
        assert run("sweep", "--config", config, "--grid", "lr=0.05", "--out", tmp_path / "s") == 0
        assert run("run", "--config", config, "--lr", "0.05", "--out", tmp_path / "r") == 0
        swept = read_csv(only_run(tmp_path / "s" / "lr0.05") / "summary.csv")[0]
        direct = read_csv(only_run(tmp_path / "r") / "summary.csv")[0]
        assert swept == direct
        assert tomli.loads((tmp_path / "s" / "best.toml").read_text())["train"]["lr"] == 0.05
        rows = read_csv(tmp_path / "s" / "sweep.csv")
        assert len(rows) == 1 and rows[0]["selected"] == "True"


class TestReport:
    @pytest.fixture
    def one_run(self, config, tmp_path):
        out = tmp_path / "runs"
        run("run", "--config", config, "--seeds", "0", "--out", out)
        return only_run(out)

    def test_one_run_equals_summary(self, one_run, tmp_path):
        assert run("report", one_run, "--out", tmp_path / "rep") == 0
        summary = read_csv(one_run / "summary.csv")[0]
        assert read_csv(tmp_path / "rep" / "runs.csv")[0] == summary
        row = read_csv(tmp_path / "rep" / "report.csv")[0]
        assert float(row["t0_acc"]) == 100.0 * float(summary["target_acc"])
        assert float(row["total_loss_std"]) == float(summary["total_loss_std"])

    def test_two_identical_runs_zero_std(self, one_run, tmp_path):
        shutil.copytree(one_run, one_run.parent / "copy")
        assert run("report", one_run.parent, "--out", tmp_path / "rep") == 0
        row = read_csv(tmp_path / "rep" / "report.csv")[0]
        assert row["runs"] == "2" and float(row["t0_std"]) == 0.0 and float(row["total_loss_std_sd"]) == 0.0

    def test_corrupt_directory_skipped(self, one_run, tmp_path):
        bad = one_run.parent / "broken"
        shutil.copytree(one_run, bad)
        (bad / "record.jsonl").write_text("{not json\n")
        with pytest.warns(UserWarning, match="broken"):
            runs = report.load_runs(report.expand_run_dirs([one_run.parent]))
        assert [r.directory.name for r in runs] == [one_run.name]
        with pytest.warns(UserWarning, match="broken"):
            assert run("report", one_run.parent, "--out", tmp_path / "rep") == 0

    def test_no_runs(self, tmp_path):
        with pytest.warns(UserWarning, match="not a directory"):
            assert run("report", tmp_path / "empty", "--out", tmp_path / "rep") == 1

    def test_curves_written(self, one_run, tmp_path):
        run("report", one_run, "--out", tmp_path / "rep")
        rows = read_csv(tmp_path / "rep" / "curves_dtcs-me.csv")
        assert rows and {"iter", "total_loss", "neg_frac", "loss_d0", "weight_d0"} <= set(rows[0])


class TestGenData:
    def test_round_trip(self, config, tmp_path):
        out = tmp_path / "d.csv"
        assert run("gen-data", "--config", config, "--out", out) == 0
        ds = ingest_csv(out)
        assert len(ds.domains) == 4 and all(len(d) == 240 for d in ds.domains)
