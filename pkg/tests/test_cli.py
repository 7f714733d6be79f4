import json
import subprocess
import sys

import pytest

import oracles
from gca.cli import main


def run(argv, capsys):
    code = main(["-q"] + argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "data"
    assert main(["-q", "generate", "--vars", "3", "--lag", "2", "--density", "0.4", "--length", "500",
                 "--domains", "1,2", "--seed", "7", "--out", str(out)]) == 0
    return out


def train_args(dataset, out, *extra):
    return ["train", "--data", str(dataset), "--out", str(out), "--max-lag", "2", "--epochs", "2",
            "--steps-per-epoch", "2", "--batch-size", "16", "--seed", "5", *extra]


# -- generate ------------------------------------------------------------------------------


def test_generate_contract(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, _ = run(["generate", "--vars", "5", "--lag", "2", "--density", "0.3", "--length", "20000",
                      "--domains", "1,2", "--seed", "7", "--out", str(out)], capsys)
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["domain_1.csv", "domain_2.csv", "ground_truth.json",
                                                     "manifest.json"]
    m = json.loads((out / "manifest.json").read_text())
    d2 = m["domains"]["2"]
    assert (d2["noise_std"], d2["sample_interval"], d2["nonlinearity_c"]) == (5.0, 2, 0.04)
    assert len((out / "domain_2.csv").read_text().splitlines()) == 20001


def test_generate_without_out_is_a_usage_error(capsys):
    code, _, err = run(["generate", "--vars", "5", "--lag", "2", "--density", "0.3", "--length", "100",
                        "--domains", "1", "--seed", "1"], capsys)
    assert code == 2 and "usage" in err and "--out" in err


def test_generate_rejects_bad_values(tmp_path, capsys):
    base = ["generate", "--vars", "3", "--lag", "1", "--length", "100", "--domains", "1", "--seed", "1",
            "--out", str(tmp_path / "x")]
    assert run(base + ["--density", "1.5"], capsys)[0] == 2
    unknown = [a if a != "1" or base[i - 1] != "--domains" else "9" for i, a in enumerate(base)]
    code, _, err = run(unknown + ["--density", "0.3"], capsys)
    assert code == 2 and "9" in err


def test_generate_unstable_simulation_exits_3(tmp_path, capsys):
    code, _, err = run(["generate", "--vars", "2", "--lag", "1", "--density", "0.5", "--length", "100",
                        "--domains", "1", "--seed", "1", "--out", str(tmp_path / "u"), "--noise-std", "1e7"],
                       capsys)
    assert code == 3 and "unstable" in err


def test_generate_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(["generate", "--vars", "3", "--lag", "2", "--density", "0.4", "--length", "200", "--domains", "1,3",
             "--seed", "11", "--out", str(tmp_path / name)], capsys)
    for f in ("domain_1.csv", "domain_3.csv", "ground_truth.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- train -------------------------------------------------------------------------------------


def test_train_from_config_gca_r(dataset, tmp_path, capsys):
    cfg = {"data_dir": str(dataset), "out_dir": str(tmp_path / "run"), "mode": "gca_r", "max_lag": 2,
           "epochs": 2, "steps_per_epoch": 2, "batch_size": 16, "seed": 1, "domain_pair": "1->2"}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    code, out, _ = run(["train", "--config", str(tmp_path / "cfg.json")], capsys)
    assert code == 0 and "best_epoch=" in out
    run_dir = tmp_path / "run"
    assert (run_dir / "best.json").is_file() and (run_dir / "config.json").is_file()
    lines = (run_dir / "history.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert all(row.split(",")[header.index("gamma")] == "0.0" for row in lines[1:])
    assert json.loads((run_dir / "config.json").read_text())["mode"] == "gca_r"


def test_train_rerun_reproduces_history(dataset, tmp_path, capsys):
    for name in ("a", "b"):
        assert run(train_args(dataset, tmp_path / name), capsys)[0] == 0
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()


def test_baseline_run_has_no_structure_files(dataset, tmp_path, capsys):
    assert run(train_args(dataset, tmp_path / "base", "--mode", "baseline"), capsys)[0] == 0
    assert not (tmp_path / "base" / "structures").exists()
    assert (tmp_path / "base" / "best.json").is_file()


def test_structured_run_exports_structures(dataset, tmp_path, capsys):
    assert run(train_args(dataset, tmp_path / "r"), capsys)[0] == 0
    assert (tmp_path / "r" / "structures" / "structures.json").is_file()


def test_train_config_errors_exit_2(dataset, tmp_path, capsys):
    both = {"data_dir": str(dataset), "source_csv": "a.csv", "target_csv": "b.csv", "out_dir": str(tmp_path)}
    (tmp_path / "both.json").write_text(json.dumps(both))
    assert run(["train", "--config", str(tmp_path / "both.json")], capsys)[0] == 2
    (tmp_path / "bad.json").write_text(json.dumps({"data_dir": str(dataset), "bogus": 1}))
    assert run(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")], capsys)[0] == 2
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")], capsys)[0] == 2
    assert run(["train", "--data", str(dataset)], capsys)[0] == 2
    code, _, err = run(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--domain-pair", "1->9"],
                       capsys)
    assert code == 2 and "9" in err


def test_train_from_csv_pair(dataset, tmp_path, capsys):
    args = ["train", "--source-csv", str(dataset / "domain_1.csv"), "--target-csv", str(dataset / "domain_2.csv"),
            "--out", str(tmp_path / "csvrun"), "--max-lag", "2", "--epochs", "1", "--steps-per-epoch", "1",
            "--batch-size", "8"]
    assert run(args, capsys)[0] == 0
    assert (tmp_path / "csvrun" / "best.json").is_file()


def test_train_malformed_csv_exits_3(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,x\n0,1\n")
    args = ["train", "--source-csv", str(bad), "--target-csv", str(dataset / "domain_2.csv"),
            "--out", str(tmp_path / "o")]
    assert run(args, capsys)[0] == 3


def test_train_divergence_exits_4(dataset, tmp_path, capsys):
    code, _, err = run(train_args(dataset, tmp_path / "div", "--lr", "1e7", "--epochs", "3",
                                  "--steps-per-epoch", "5"), capsys)
    assert code == 4 and "numeric error" in err


# -- eval / export ---------------------------------------------------------------------------------


def test_eval_oracle_toy(tmp_path, capsys):
    ddir, model = oracles.write_toy_run(tmp_path)
    code, out, _ = run(["eval", "--model", str(model), "--data", str(ddir), "--ground-truth",
                        str(ddir / "ground_truth.json")], capsys)
    assert code == 0
    metrics = dict(line.split("=") for line in out.split())
    assert float(metrics["mse"]) < 1e-3
    assert float(metrics["auprc"]) == 1.0
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert report["mse"] == float(metrics["mse"])


def test_eval_without_ground_truth_prints_no_auprc(tmp_path, capsys):
    ddir, model = oracles.write_toy_run(tmp_path)
    code, out, _ = run(["eval", "--model", str(model), "--data", str(ddir / "domain_2.csv"),
                        "--report", str(tmp_path / "r.json")], capsys)
    assert code == 0 and "mse=" in out and "auprc" not in out
    assert (tmp_path / "r.json").is_file()


def test_eval_malformed_model_reports_location(tmp_path, capsys):
    bad = tmp_path / "best.json"
    bad.write_text('{"model_config": {\n  "M": 2,,\n}}')
    code, _, err = run(["eval", "--model", str(bad), "--data", str(tmp_path)], capsys)
    assert code == 2 and "line 2" in err and "column" in err


def test_eval_missing_files_exit_2(tmp_path, capsys):
    ddir, model = oracles.write_toy_run(tmp_path)
    assert run(["eval", "--model", str(tmp_path / "nope.json"), "--data", str(ddir)], capsys)[0] == 2
    assert run(["eval", "--model", str(model), "--data", str(tmp_path / "nowhere")], capsys)[0] == 2
    assert run(["eval", "--model", str(model), "--data", str(ddir), "--ground-truth",
                str(tmp_path / "gt.json")], capsys)[0] == 2


def test_export_structure_defaults(tmp_path, capsys):
    ddir, model = oracles.write_toy_run(tmp_path)
    code, _, _ = run(["export-structure", "--model", str(model), "--data", str(ddir), "--out",
                      str(tmp_path / "ex")], capsys)
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "ex").iterdir())
    assert names == ["lag_1.csv", "lag_2.csv", "structures.json", "summary.csv"]
    assert json.loads((tmp_path / "ex" / "structures.json").read_text())["threshold"] == 0.5


def test_export_structure_missing_model_exit_2(tmp_path, capsys):
    assert run(["export-structure", "--model", str(tmp_path / "m.json"), "--data", str(tmp_path),
                "--out", str(tmp_path / "o")], capsys)[0] == 2


def test_end_to_end_composes_from_the_manifest(dataset, tmp_path, capsys):
    assert run(train_args(dataset, tmp_path / "run"), capsys)[0] == 0
    model = tmp_path / "run" / "best.json"
    code, out, _ = run(["eval", "--model", str(model), "--data", str(dataset), "--ground-truth",
                        str(dataset / "ground_truth.json")], capsys)
    assert code == 0 and "auprc=" in out and "auprc_summary=" in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gca", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "generate" in r.stdout
