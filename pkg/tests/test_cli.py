import io
import json
import subprocess
import sys

import pytest

from nlosvox import grid_compare, laplacian_filter, read_dataset, read_volume
from nlosvox.cli import main

BOUNDS = "-0.6,-0.6,0.2,0.6,0.6,1.4"


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    pairs = dict(line.split("=", 1) for line in out.getvalue().splitlines())
    return code, pairs


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, scene_path):
    path = tmp_path_factory.mktemp("cli") / "point.nltd"
    code, _ = run("simulate", "--scene", scene_path("point"), "--out", path)
    assert code == 0
    return path


@pytest.fixture(scope="module")
def volume(dataset):
    path = dataset.with_name("point.nlvg")
    code, _ = run("reconstruct", "--in", dataset, "--res", 24, f"--bounds={BOUNDS}", "--out", path)
    assert code == 0
    return path


def test_simulate_reports_shape(tmp_path, scene_path):
    code, kv = run("simulate", "--scene", scene_path("point"), "--out", tmp_path / "d.nltd")
    assert code == 0
    assert (kv["S"], kv["P"], kv["T"]) == ("8", "256", "256")
    assert 0 < float(kv["nonzero_fraction"]) < 1
    assert read_dataset(tmp_path / "d.nltd").shape == (8, 256, 256)


def test_simulate_noise_seed(tmp_path, scene_path):
    paths = [tmp_path / f"{i}.nltd" for i in range(3)]
    for path, seed in zip(paths, (5, 5, 6)):
        assert run("simulate", "--scene", scene_path("point"), "--out", path, "--noise", 100, "--seed", seed)[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_bytes() != paths[2].read_bytes()


def test_reconstruct_stats(tmp_path, dataset):
    code, kv = run(
        "reconstruct", "--in", dataset, "--res", 16, f"--bounds={BOUNDS}", "--stats", tmp_path / "s.json"
    )
    assert code == 0
    total = int(kv["ellipsoids_emitted"]) + int(kv["ellipsoids_skipped_zero"]) + int(kv["ellipsoids_degenerate"])
    assert total == 8 * 256 * 256
    report = json.loads((tmp_path / "s.json").read_text())
    assert report["dataset"]["shape"] == [8, 256, 256]
    assert report["config"]["method"] == "fast"


def test_integer_threads_bitwise(tmp_path, dataset):
    paths = []
    for threads in (1, 3):
        path = tmp_path / f"t{threads}.nlvg"
        argv = ["reconstruct", "--in", dataset, "--res", 20, f"--bounds={BOUNDS}", "--mode", "int"]
        assert run(*argv, "--threads", threads, "--out", path)[0] == 0
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_config_file_and_flag_precedence(tmp_path, dataset):
    config = tmp_path / "c.toml"
    config.write_text(f'[reconstruct]\nres = 12\nmethod = "traditional"\nbounds = "{BOUNDS}"\n')
    _, kv = run("reconstruct", "--in", dataset, "--config", config)
    assert kv["method"] == "traditional" and kv["resolution"] == "12,12,12"
    _, kv = run("reconstruct", "--in", dataset, "--config", config, "--res", 10)
    assert kv["resolution"] == "10,10,10"


@pytest.mark.parametrize(
    "extra",
    [
        ["--res", "0"],
        ["--bounds=1,2,3"],
        ["--eps", "sideways"],
        ["--mode", "int", "--g-correction", "--method", "traditional"],
    ],
)
def test_reconstruct_usage_errors(dataset, extra, capsys):
    assert run("reconstruct", "--in", dataset, *extra)[0] == 2
    assert "error:" in capsys.readouterr().err


def test_missing_input_is_io_error(tmp_path, capsys):
    assert run("reconstruct", "--in", tmp_path / "nothing.nltd")[0] == 1
    assert "error:" in capsys.readouterr().err


def test_corrupt_input_is_io_error(tmp_path):
    bad = tmp_path / "bad.nltd"
    bad.write_bytes(b"JUNK" + bytes(100))
    assert run("reconstruct", "--in", bad)[0] == 1


def test_compare_self(volume):
    code, kv = run("compare", "--a", volume, "--b", volume)
    assert code == 0
    assert float(kv["mse"]) == 0 and float(kv["pearson"]) == pytest.approx(1.0) and kv["peak_offset"] == "0"


def test_filter_matches_library(tmp_path, volume):
    out = tmp_path / "f.nlvg"
    assert run("filter", "--in", volume, "--out", out)[0] == 0
    assert grid_compare(read_volume(out), laplacian_filter(read_volume(volume))).mse == 0


def test_export(tmp_path, volume):
    code, kv = run("export", "--in", volume, "--format", "ply", "--out", tmp_path / "p.ply", "--threshold", 0.5)
    assert code == 0
    assert int(kv["vertices"]) == int((read_volume(volume).normalized() >= 0.5).sum())
    code, kv = run("export", "--in", volume, "--format", "pgm", "--out", tmp_path / "s", "--axis", "y")
    assert (code, kv["slices"]) == (0, "24")
    assert run("export", "--in", volume, "--format", "ply", "--out", tmp_path / "q.ply", "--threshold", 2)[0] == 2


def write_plan(tmp_path, dataset, **extra):
    lines = [
        f'dataset = "{dataset}"',
        "resolutions = [8, 16]",
        'methods = ["traditional", "fast"]',
        'eps = ["voxel", "2voxel"]',
        "repetitions = 2",
        "warmup = 0",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    lines += ["[reconstruct]", f'bounds = "{BOUNDS}"']
    plan = tmp_path / "plan.toml"
    plan.write_text("\n".join(lines) + "\n")
    return plan


def test_bench(tmp_path, dataset):
    report = tmp_path / "r.json"
    code, kv = run("bench", "--plan", write_plan(tmp_path, dataset), "--report", report)
    assert code == 0
    data = json.loads(report.read_text())
    # 2 resolutions x (1 traditional + 2 fast tolerances)
    assert len(data["cells"]) == 6
    assert all(len(c["times"]) == 2 for c in data["cells"])
    assert len(data["speedups"]) == 4
    assert set(data["scaling"]) == {"traditional", "fast/voxel", "fast/2voxel"}
    assert "speedup@16/voxel" in kv and "scaling/traditional" in kv
    assert float(kv["scaling/fast/2voxel"]) > 0


def test_bench_time_budget(tmp_path, dataset):
    plan = write_plan(tmp_path, dataset, time_budget=1e-9)
    assert run("bench", "--plan", plan, "--report", tmp_path / "r.json")[0] == 3
    assert json.loads((tmp_path / "r.json").read_text())["cells"][0]["over_budget"]


def test_bench_bad_plan(tmp_path, dataset):
    plan = tmp_path / "p.toml"
    plan.write_text(f'dataset = "{dataset}"\nresolutions = []\n')
    assert run("bench", "--plan", plan, "--report", tmp_path / "r.json")[0] == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nlosvox.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("nlosvox")
