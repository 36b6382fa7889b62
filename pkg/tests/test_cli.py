import csv
import io
import json
import shutil
import subprocess

import numpy as np
import pytest

from conftest import blob_config, write_toml
from lusc.cli import main
from lusc.config import load_config
from lusc.data import channel_stats, DatasetArchive, load_archive, pack_archive, split
from lusc.experiment import run_evaluate, strip_comments
from lusc.training import TrainLog


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Blob archive imported once; each test gets its own config and output dir."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_toml(tmp / "import.toml", blob_config(tmp, 2))
    assert main(["import", "--config", str(cfg)]) == 0
    return tmp


def make_config(workdir, tmp_path, **kw):
    raw = blob_config(workdir, kw.pop("max_epochs", 2), **kw)
    raw["output"]["dir"] = str(tmp_path / "out")
    return raw


def vit_only(raw):
    raw["model"].pop("names", None)
    raw["model"]["name"] = "vit"
    return raw


def without_wall(csv_text):
    rows = list(csv.reader(io.StringIO(strip_comments(csv_text))))
    return [r[:-1] for r in rows]


def test_import_writes_archive(workdir):
    arc = load_archive(workdir / "blobs.lusc")
    assert len(arc) == 300 and arc.class_names == ["blob_blue", "blob_green", "blob_red"]
    assert arc.image_shape == (64, 64, 3)


def test_import_missing_root_exit_1(tmp_path, capsys):
    raw = blob_config(tmp_path)
    raw["dataset"]["root"] = str(tmp_path / "nowhere")
    cfg = write_toml(tmp_path / "c.toml", raw)
    assert main(["import", "--config", str(cfg)]) == 1
    assert "nowhere" in capsys.readouterr().err


def test_train_without_archive_exit_1(tmp_path, capsys):
    cfg = write_toml(tmp_path / "c.toml", vit_only(blob_config(tmp_path)))
    assert main(["train", "--config", str(cfg)]) == 1
    assert "lusc import" in capsys.readouterr().err


def test_config_error_exit_2_names_field(tmp_path, capsys):
    raw = blob_config(tmp_path)
    raw["train"]["learning_rate"] = "fast"
    cfg = write_toml(tmp_path / "c.toml", raw)
    assert main(["train", "--config", str(cfg)]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_train_needs_single_model_exit_2(workdir, tmp_path):
    cfg = write_toml(tmp_path / "c.toml", make_config(workdir, tmp_path))
    assert main(["train", "--config", str(cfg)]) == 2


def test_divergence_exit_3(tmp_path, capsys):
    r = np.random.default_rng(0)
    images = r.random((9, 32, 32, 3), dtype=np.float32)
    images[4, 3, 3, 0] = np.nan
    labels = np.repeat(np.arange(3), 3)
    mean, std = channel_stats(images)
    pack_archive(DatasetArchive(images, labels, ["a", "b", "c"], mean, std), tmp_path / "nan.lusc")
    raw = vit_only(blob_config(tmp_path, 2))
    raw["dataset"]["archive"] = str(tmp_path / "nan.lusc")
    cfg = write_toml(tmp_path / "c.toml", raw)
    assert main(["train", "--config", str(cfg)]) == 3
    assert "epoch 1, batch 1" in capsys.readouterr().err


def test_train_zero_epochs(workdir, tmp_path):
    cfg = write_toml(tmp_path / "c.toml", vit_only(make_config(workdir, tmp_path, max_epochs=0)))
    assert main(["train", "--config", str(cfg)]) == 0
    out = tmp_path / "out" / "vit"
    assert (out / "checkpoint.luck").exists()
    text = (out / "trainlog.csv").read_text()
    assert text.startswith("# config_hash=") and TrainLog.from_csv(strip_comments(text)).records == []


def test_train_deterministic_and_provenance(workdir, tmp_path):
    raw = vit_only(make_config(workdir, tmp_path))
    cfg = write_toml(tmp_path / "c.toml", raw)
    chash = load_config(cfg).config_hash()
    logs, ckpts = [], []
    for _ in range(2):
        assert main(["train", "--config", str(cfg)]) == 0
        logs.append((tmp_path / "out" / "vit" / "trainlog.csv").read_text())
        ckpts.append((tmp_path / "out" / "vit" / "checkpoint.luck").read_bytes())
    assert without_wall(logs[0]) == without_wall(logs[1]) and len(without_wall(logs[0])) == 3
    assert ckpts[0] == ckpts[1]
    out = tmp_path / "out" / "vit"
    for f in ("trainlog.csv", "confusion_val.csv"):
        assert (out / f).read_text().splitlines()[0] == f"# config_hash={chash}"
    for f in ("report_val.json", "label_hashes.json"):
        assert json.loads((out / f).read_text())["config_hash"] == chash


def test_evaluate_cli_matches_library(workdir, tmp_path):
    raw = vit_only(make_config(workdir, tmp_path))
    cfg = write_toml(tmp_path / "c.toml", raw)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "out" / "vit" / "checkpoint.luck"
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--subset", "test",
                 "--report-dir", str(tmp_path / "cli")]) == 0
    cli = json.loads((tmp_path / "cli" / "report_test.json").read_text())
    lib = run_evaluate(load_config(cfg), ckpt, "test", out=str(tmp_path / "lib")).to_dict()
    cli.pop("eval_wall_seconds"), lib.pop("eval_wall_seconds")
    assert cli == lib
    assert sum(map(sum, cli["confusion"])) == 30


def test_evaluate_fingerprint_mismatch_exit_4(workdir, tmp_path, capsys):
    raw = vit_only(make_config(workdir, tmp_path, max_epochs=0))
    cfg = write_toml(tmp_path / "c.toml", raw)
    assert main(["train", "--config", str(cfg)]) == 0
    raw["model"]["name"] = "alexnet"
    other = write_toml(tmp_path / "alex.toml", raw)
    ckpt = tmp_path / "out" / "vit" / "checkpoint.luck"
    assert main(["evaluate", "--config", str(other), "--checkpoint", str(ckpt)]) == 4
    assert "does not match" in capsys.readouterr().err


def test_evaluate_overlapping_split_exit_4(workdir, tmp_path):
    raw = vit_only(make_config(workdir, tmp_path, max_epochs=0))
    cfg = write_toml(tmp_path / "c.toml", raw)
    assert main(["train", "--config", str(cfg)]) == 0
    spec = split(load_archive(workdir / "blobs.lusc"), (0.8, 0.1, 0.1), 7)
    spec.test = spec.test + spec.train[:3]
    (tmp_path / "bad_split.json").write_text(spec.to_json())
    ckpt = tmp_path / "out" / "vit" / "checkpoint.luck"
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt),
                 "--split", str(tmp_path / "bad_split.json")]) == 4


def test_evaluate_missing_checkpoint_exit_1(workdir, tmp_path):
    cfg = write_toml(tmp_path / "c.toml", vit_only(make_config(workdir, tmp_path)))
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.luck")]) == 1


def test_split_command_and_seed_override(workdir, tmp_path):
    cfg = write_toml(tmp_path / "c.toml", make_config(workdir, tmp_path))
    assert main(["split", "--config", str(cfg), "--out", str(tmp_path / "s7.json")]) == 0
    assert main(["split", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "s8.json")]) == 0
    s7, s8 = (json.loads((tmp_path / f).read_text()) for f in ("s7.json", "s8.json"))
    assert (s7["seed"], s8["seed"]) == (7, 8) and s7["test"] != s8["test"]
    assert (len(s7["train"]), len(s7["val"]), len(s7["test"])) == (240, 30, 30)


def test_compare_outputs(workdir, tmp_path):
    cfg = write_toml(tmp_path / "c.toml", make_config(workdir, tmp_path, max_epochs=1))
    assert main(["compare", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    comp = json.loads((out / "comparison.json").read_text())
    assert sorted(comp["models"]) == ["alexnet", "vit"]
    assert {m["split_seed"] for m in comp["models"].values()} == {7}
    rows = list(csv.reader(io.StringIO(strip_comments((out / "comparison.csv").read_text()))))
    assert rows[0] == ["model", "accuracy", "precision", "recall", "f1", "train_wall_seconds"]
    assert len(rows) == 3 and all(len(r) == 6 for r in rows)
    hashes = json.loads((out / "metrics.json").read_text())["models"]
    assert hashes["alexnet"]["label_hashes"] == hashes["vit"]["label_hashes"]
    for name in ("alexnet", "vit"):
        assert (out / name / "report_test.json").exists() and (out / name / "confusion_test.csv").exists()


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("lusc")
    if exe is None:
        pytest.skip("package not installed with its console script")
    res = subprocess.run([exe, "train", "--config", str(tmp_path / "absent.toml")], capture_output=True, text=True)
    assert res.returncode == 2 and "not found" in res.stderr
    res = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "compare" in res.stdout
