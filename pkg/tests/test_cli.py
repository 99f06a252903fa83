import json
import subprocess
import sys

import pytest

from focuscir.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--n", "30", "--reuse", "0.5", "--seed", "2", "--out", str(root / "data")]) == EXIT_OK
    assert main(["preprocess", "--manifest", str(root / "data"), "--cache", str(root / "cache"),
                 "--workers", "2"]) == EXIT_OK
    return root


def common(root):
    return ["--manifest", str(root / "data"), "--cache", str(root / "cache")]


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert main(["train", "--manifest", "x", "--cache", "y", "--ablate", "no_such_flag"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_config_errors_are_usage(data, capsys):
    assert main(["train", *common(data), "--set", "P=0"]) == EXIT_USAGE
    assert "P ≥ 1" in capsys.readouterr().err
    assert main(["train", *common(data), "--set", "P"]) == EXIT_USAGE


def test_missing_cache_message(data, tmp_path, capsys):
    code = main(["train", "--manifest", str(data / "data"), "--cache", str(tmp_path / "none"),
                 "--out", str(tmp_path / "run")])
    assert code == EXIT_RUNTIME
    assert "run `focuscir preprocess` first" in capsys.readouterr().err


def test_preprocess_rerun_reports_hits(data, capsys):
    assert main(["preprocess", *common(data)]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert stats["misses"] == 0 and stats["hits"] > 0


def test_train_eval_reproducible(data, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", *common(data), "--out", str(run), "--set", "epochs=2", "--seed", "3",
                 "--ablate", "no_MGFP"]) == EXIT_OK
    meta = json.loads((run / "run.json").read_text())
    assert meta["config"]["seed"] == 3 and meta["config"]["epochs"] == 2
    assert meta["config"]["ablation_flags"] == ["no_MGFP"] and meta["build"]
    assert main(["eval", "--run", str(run)]) == EXIT_OK
    first = (run / "eval-test" / "metrics.jsonl").read_bytes()
    assert main(["eval", "--run", str(run)]) == EXIT_OK
    assert (run / "eval-test" / "metrics.jsonl").read_bytes() == first
    assert "R@1" in capsys.readouterr().out


def test_eval_untrained(data, tmp_path):
    assert main(["eval", *common(data), "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert (tmp_path / "ev" / "report.txt").exists()
    assert (tmp_path / "ev" / "rankings.jsonl").exists()


def test_retrieve_top_five(data, tmp_path, capsys):
    ref = json.loads((data / "data" / "test.jsonl").read_text().splitlines()[0])["ref_image_id"]
    assert main(["retrieve", *common(data), "--image", ref, "--text", "change color to red", "--k", "5"]) == EXIT_OK
    assert len(capsys.readouterr().out.split()) == 5
    adhoc = tmp_path / "query.json"
    adhoc.write_text(json.dumps({"object_class": "dog", "color": "red", "pattern": "plain",
                                 "background": "tree", "clutter": None}))
    assert main(["retrieve", *common(data), "--image", str(adhoc), "--text", "make it blue", "--k", "5"]) == EXIT_OK
    assert len(capsys.readouterr().out.split()) == 5
    assert main(["retrieve", *common(data), "--image", "nope", "--text", "x"]) == EXIT_USAGE


def test_sweep_five_runs_one_plot(data, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", *common(data), "--param", "P", "--values", "1,2,4,8,16", "--set", "epochs=1",
                 "--out", str(out)]) == EXIT_OK
    runs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert runs == ["P=1", "P=16", "P=2", "P=4", "P=8"]
    assert list(out.glob("*.png")) == [out / "sweep_P.png"]
    assert len((out / "sweep.jsonl").read_text().splitlines()) == 5


def test_console_entrypoint():
    done = subprocess.run([sys.executable, "-m", "focuscir", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "gen-synth" in done.stdout
    done = subprocess.run([sys.executable, "-m", "focuscir", "nope"], capture_output=True, text=True)
    assert done.returncode == 1
