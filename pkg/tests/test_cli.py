import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from streamhl import cli
from streamhl.cache import KVCache
from streamhl.core import Prng, read_score_records, write_feature_file
from streamhl.degrade import read_ppm
from streamhl.fusion import FusionParams

GOLDEN = Path(__file__).parent / "golden"
SMALL = ["--set", "data.n_videos=5", "--set", "data.length=80"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert cli.main(["gen-data", *SMALL, "--out", str(root / "data")]) == 0
    assert cli.main(["train", *SMALL, "--data", str(root / "data"), "--out", str(root / "run"),
                     "--steps", "30", "--lr", "5e-3"]) == 0
    return root


@pytest.fixture
def features(tmp_path):
    path = tmp_path / "f.feat"
    write_feature_file(path, Prng(1).gauss_array(30, 32))
    return path


def test_pipeline_outputs(pipeline):
    assert (pipeline / "data" / "manifest.jsonl").read_text().count("\n") == 5
    assert (pipeline / "run" / "heads.bin").stat().st_size > 0
    assert len((pipeline / "run" / "loss_trace.csv").read_text().splitlines()) == 31
    man = json.loads((pipeline / "run" / "run_manifest.json").read_text())
    assert man["command"] == "train" and man["config"]["train"]["steps"] == 30
    assert any(k.endswith("heads.bin") for k in man["checksums"])


def test_eval_report(pipeline):
    out = pipeline / "eval"
    assert cli.main(["eval", *SMALL, "--data", str(pipeline / "data"), "--heads", str(pipeline / "run" / "heads.bin"),
                     "--curves", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    metrics = {r["metric"] for r in rows if r["video"] == "__mean__"}
    assert {"spearman", "kendall", "top5_map", "map@50", "map@15", "r1@0.5", "r1@0.7"} <= metrics
    assert len(list((out / "curves").glob("*.csv"))) == 1  # one test video out of five


def test_grid_search_single_cell(pipeline, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"alpha": [0.25], "beta": [1.5], "epsilon": [-1.0], "tau": [0.04]}))
    out = tmp_path / "params.txt"
    assert cli.main(["grid-search", *SMALL, "--data", str(pipeline / "data"),
                     "--heads", str(pipeline / "run" / "heads.bin"), "--grid", str(grid), "--out", str(out)]) == 0
    assert FusionParams.load(out) == FusionParams(0.25, 1.5, -1.0, 0.04)
    assert (tmp_path / "params.txt.manifest.json").exists()


@pytest.mark.parametrize("mode", ["color_banding", "blackout", "quality"])
def test_degrade_matches_golden(tmp_path, mode):
    out = tmp_path / "o.ppm"
    assert cli.main(["degrade", "--input", str(GOLDEN / "input.ppm"), "--mode", mode, "--out", str(out)]) == 0
    assert out.read_bytes() == (GOLDEN / f"{mode}.ppm").read_bytes()


def test_degrade_plan(tmp_path):
    out = tmp_path / "mask.txt"
    assert cli.main(["degrade", "--plan-length", "100", "--seed", "4", "--out", str(out)]) == 0
    line = out.read_text().strip()
    assert len(line) == 100 and 5 <= line.count("1") <= 20


def test_stream_records(tmp_path, features):
    out = tmp_path / "scores.jsonl"
    assert cli.main(["stream", "--features", str(features), "--query", "goal", "--window", "8",
                     "--out", str(out)]) == 0
    recs = read_score_records(out)
    assert [r.t for r in recs] == list(range(30))
    assert (tmp_path / "scores.jsonl.manifest.json").exists()


def test_stream_prefix(tmp_path, features):
    full, part = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    short = tmp_path / "short.feat"
    write_feature_file(short, Prng(1).gauss_array(30, 32)[:12])
    cli.main(["stream", "--features", str(features), "--query", "goal", "--out", str(full)])
    cli.main(["stream", "--features", str(short), "--query", "goal", "--out", str(part)])
    assert read_score_records(part) == read_score_records(full)[:12]


def test_stream_ceiling_exit_keeps_prefix(tmp_path, features, monkeypatch):
    calls = {"n": 0}

    def ceiling(self):
        calls["n"] += 1
        return 10**9 if calls["n"] <= 5 else 0

    monkeypatch.setattr(KVCache, "memory_ceiling", ceiling)
    out = tmp_path / "s.jsonl"
    assert cli.main(["stream", "--features", str(features), "--query", "q", "--out", str(out)]) == 3
    assert [r.t for r in read_score_records(out)] == [0, 1, 2, 3, 4]


def test_empty_stream(tmp_path):
    feat = tmp_path / "e.feat"
    write_feature_file(feat, np.zeros((0, 32)))
    out = tmp_path / "e.jsonl"
    assert cli.main(["stream", "--features", str(feat), "--query", "q", "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_bad_policy_exits_2(tmp_path, features):
    with pytest.raises(SystemExit) as exc:
        cli.main(["stream", "--features", str(features), "--query", "q", "--cache-policy", "lru",
                  "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [
    ["stream", "--features", "missing.feat", "--query", "q", "--out", "x.jsonl"],
    ["degrade", "--mode", "blackout", "--out", "x.ppm"],
    ["stream", "--features", "missing.feat", "--query", "q", "--out", "x", "--set", "nope"],
    ["gen-data", "--set", "data.bogus=1", "--out", "d"],
])
def test_usage_errors(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2


def test_bad_feature_file_exits_1(tmp_path):
    bad = tmp_path / "bad.feat"
    bad.write_bytes(b"garbage")
    assert cli.main(["stream", "--features", str(bad), "--query", "q", "--out", str(tmp_path / "o")]) == 1


def test_config_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"seed": 7, "cache": {"window": 99}}))
    monkeypatch.setenv(cli.ENV_CONFIG, str(conf))
    args = cli.build_parser().parse_args(["gen-data", "--out", "d", "--set", "seed=8", "--window", "12"])
    cfg = cli.load_config(args)
    assert (cfg.seed, cfg.cache.window) == (8, 12)
    args = cli.build_parser().parse_args(["gen-data", "--out", "d"])
    assert cli.load_config(args).seed == 7


def test_console_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "streamhl.cli", "degrade", "--plan-length", "20",
                           "--out", str(tmp_path / "m.txt")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "streamhl.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "grid-search" in proc.stdout
