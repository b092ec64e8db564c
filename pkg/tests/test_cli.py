"""End-to-end runs of the ``voxrecon`` subcommands on tiny data."""
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from voxrecon.archive import load_archive
from voxrecon.cli import RunConfig, main
from voxrecon.data import read_binvox, read_manifest
from voxrecon.errors import ConfigError


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "10", "--views", "3",
                 "--res", "16", "--seed", "4"]) == 0
    cfg = {"variant": "Toy", "resolution": 16, "refiner": True, "data": "data", "out": "run", "seed": 1,
           "train": {"batch_size": 4, "stage1_epochs": 1, "stage2_epochs": 1, "n_max": 3, "decay_epoch": 1}}
    (root / "run.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "run.json")]) == 0
    return root


def test_gen_data_layout(workspace):
    data = workspace / "data"
    assert len(list((data / "views").glob("*.ppm"))) == 30
    assert len(list((data / "gt").glob("*.binvox"))) == 10
    m = read_manifest(data)
    assert len(m.records) == 10
    assert sorted(len(m.subset(s).records) for s in ("train", "val", "test")) == [1, 1, 8]


def test_gen_data_repeatable(workspace, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "10", "--views", "3",
                 "--res", "16", "--seed", "4"]) == 0
    assert tree_bytes(tmp_path / "d") == tree_bytes(workspace / "data")


@pytest.mark.parametrize("argv", [["--kinds", "box,teapot"], ["--count", "0"]])
def test_gen_data_usage_errors(tmp_path, argv):
    assert main(["gen-data", "--out", str(tmp_path / "x")] + argv) == 2


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "final.ntar").exists() and (run / "last.ntar").exists()
    assert len((run / "train.log").read_text().splitlines()) == 2


def test_train_resume(workspace, tmp_path):
    cfg = json.loads((workspace / "run.json").read_text())
    cfg.update(data=str(workspace / "data"), out=str(tmp_path / "r"))
    (tmp_path / "r.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "r.json"),
                 "--resume", str(workspace / "run" / "last.ntar")]) == 0
    assert (tmp_path / "r" / "final.ntar").read_bytes() == (workspace / "run" / "final.ntar").read_bytes()


def test_train_config_errors(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stage1_epochs": -1}}))
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"colour": 1}))
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text("{")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    bad.write_text(json.dumps({"data": "nowhere"}))
    assert main(["train", "--config", str(bad)]) == 3


def test_run_config_paths(tmp_path):
    rc = RunConfig.from_dict({"data": "d", "seed": 7}, tmp_path)
    assert rc.data == str(tmp_path / "d") and rc.train.seed == 7
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"variant": "Z"})


def test_eval(workspace, tmp_path, capsys):
    out = tmp_path / "e.json"
    assert main(["eval", "--ckpt", str(workspace / "run" / "final.ntar"), "--data", str(workspace / "data"),
                 "--views", "1,3", "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert table["view_counts"] == [1, 3] and table["counts"]["overall"] == 10
    assert "overall" in capsys.readouterr().out
    first = out.read_bytes()
    assert main(["eval", "--ckpt", str(workspace / "run" / "final.ntar"), "--data", str(workspace / "data"),
                 "--views", "1,3", "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_eval_sweep(workspace, tmp_path):
    out = tmp_path / "s.json"
    argv = ["eval", "--ckpt", str(workspace / "run" / "final.ntar"), "--data", str(workspace / "data"),
            "--split", "train", "--views", "2", "--out", str(out)]
    assert main(argv + ["--sweep", "0.2,0.3,0.5"]) == 0
    doc = json.loads(out.read_text())
    assert doc["threshold"] == 0.3 and sorted(doc["sweep"]) == ["0.2", "0.3", "0.5"]
    assert doc["sweep"]["0.3"] == doc["rows"]["overall"]
    assert main(argv + ["--sweep", "1.5"]) == 2


def test_eval_errors(workspace, tmp_path):
    ck = str(workspace / "run" / "final.ntar")
    assert main(["eval", "--ckpt", ck, "--data", str(workspace / "data"), "--views", "4"]) == 3
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--ckpt", ck, "--data", str(tmp_path / "empty")]) == 3
    assert main(["eval", "--ckpt", ck, "--data", str(workspace / "data"), "--views", "0"]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "none.ntar"), "--data", str(workspace / "data")]) == 3


def test_reconstruct_permutation(workspace, tmp_path):
    ck = str(workspace / "run" / "final.ntar")
    imgs = sorted(str(p) for p in (workspace / "data" / "views").glob("box-00000_*.ppm"))
    assert len(imgs) == 3
    assert main(["reconstruct", "--ckpt", ck, "--images", ",".join(imgs), "--out", str(tmp_path / "a.binvox")]) == 0
    assert main(["reconstruct", "--ckpt", ck, "--images", ",".join(imgs[::-1]),
                 "--out", str(tmp_path / "b.binvox")]) == 0
    assert (tmp_path / "a.binvox").read_bytes() == (tmp_path / "b.binvox").read_bytes()
    assert read_binvox(tmp_path / "a.binvox").shape == (16, 16, 16)
    for extra in (["--images", imgs[0]], ["--images", ",".join(imgs), "--fusion", "average"]):
        argv = ["reconstruct", "--ckpt", ck, "--out", str(tmp_path / "c.binvox")] + extra
        assert main(argv) == 0
    assert main(["reconstruct", "--ckpt", ck, "--images", str(tmp_path / "no.ppm"),
                 "--out", str(tmp_path / "d.binvox")]) == 3


def test_inspect_scores(workspace, tmp_path, capsys):
    ck = str(workspace / "run" / "final.ntar")
    imgs = sorted(str(p) for p in (workspace / "data" / "views").glob("box-00000_*.ppm"))
    assert main(["inspect-scores", "--ckpt", ck, "--images", ",".join(imgs), "--out", str(tmp_path)]) == 0
    total = sum(load_archive(tmp_path / f"scores_view{r}.ntar")[0]["normalized"] for r in range(3))
    np.testing.assert_allclose(total, 1, atol=1e-6)
    assert len((tmp_path / "summary.txt").read_text().splitlines()) == 4
    assert main(["inspect-scores", "--ckpt", ck, "--images", imgs[0], "--out", str(tmp_path / "one")]) == 0
    assert "warning" in capsys.readouterr().err


def test_param_count(capsys):
    assert main(["param-count", "--variant", "F"]) == 0
    assert capsys.readouterr().out.startswith("F: 7,435,756 parameters")
    assert main(["param-count", "--variant", "Toy", "--verbose"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out[out.index("{"):])["variant"] == "Toy"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--variant", "Toy", "--coords", "1", "--seed", "2"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--precision", "f32"]) == 2


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "voxrecon.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "eval", "reconstruct", "inspect-scores", "param-count", "gradcheck"):
        assert cmd in r.stdout
