import json
import shutil

import numpy as np
import pytest
import yaml

from conftest import TINY_NET
from morphldm import cli as cli_mod
from morphldm.cli import main
from morphldm.evaluation import METRIC_NAMES
from morphldm.phantoms import load_dataset

COMMANDS = {
    "gen-data": ["--spec", "--n", "--out", "--seed", "--age-range", "--sex-balance", "--age-dist"],
    "train": ["--stage", "--config", "--resume", "--max-steps"],
    "train-predictor": ["--data", "--out", "--steps", "--seed", "--batch-size", "--lr", "--blur-max", "--noise-max"],
    "sample": ["--config", "--n", "--ages", "--sex-balance", "--seed", "--out"],
    "eval": ["--real", "--synth", "--predictor", "--out", "--pairs", "--seed", "--scales"],
}


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def write_config(path, root, variant, **over):
    cfg = {
        "variant": variant,
        "dataset": str(root / "train"),
        "val_dataset": str(root / "val"),
        "output": str(root / "runs" / variant),
        "seed": 1,
        "heldout_size": 8,
        "net": TINY_NET,
        "schedule": {"T": 10},
        "stage1": {"steps": 4, "batch_size": 4, "lr": 1e-3, "warmup": 1, "log_every": 1},
        "stage2": {"steps": 4, "batch_size": 8, "lr": 1e-3, "warmup": 1, "log_every": 1, "calibration_size": 16},
        **over,
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help_documents_flags(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    assert main(argv) == 0
    text = capsys.readouterr().out
    for flag in COMMANDS.get(command, list(COMMANDS)):
        assert flag in text


def test_usage_errors(capsys, tmp_path):
    assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "d")]) == 1
    assert main(["gen-data", "--n", "3"]) == 1
    assert main(["gen-data", "--n", "3", "--out", str(tmp_path / "d"), "--age-range", "9"]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--stage", "3", "--config", "x.yaml"]) == 1
    assert main(["train", "--stage", "1", "--config", str(tmp_path / "missing.yaml")]) == 1
    (tmp_path / "spec.yaml").write_text("noise_sigma: -1\n")
    assert main(["gen-data", "--spec", str(tmp_path / "spec.yaml"), "--n", "2", "--out", str(tmp_path / "d")]) == 1
    assert "error" in capsys.readouterr().err


def test_gen_data(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text("image_size: [32, 32]\n")
    args = ["gen-data", "--spec", str(spec), "--n", "100", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["n_samples"] == len(manifest["records"]) == 100
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_gen_data_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--n", "2", "--out", str(blocker / "sub")]) == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text("image_size: [32, 32]\n")
    assert main(["gen-data", "--spec", str(spec), "--n", "60", "--out", str(root / "train"), "--seed", "1"]) == 0
    assert main(["gen-data", "--spec", str(spec), "--n", "160", "--out", str(root / "val"), "--seed", "2",
                 "--age-dist", "uniform"]) == 0
    return root


def run_pipeline(root, variant, tag):
    """Full CLI pipeline into ``root/tag``; returns the output directory."""
    out = root / tag
    cfg = write_config(root / f"{tag}.yaml", root, variant, output=str(out / "run"))
    assert main(["train", "--stage", "1", "--config", str(cfg)]) == 0
    assert main(["train", "--stage", "2", "--config", str(cfg)]) == 0
    assert main(["train-predictor", "--data", str(root / "train"), "--out", str(out / "pred"), "--steps", "3"]) == 0
    assert main(["sample", "--config", str(cfg), "--n", "100", "--seed", "2", "--out", str(out / "samples")]) == 0
    assert main(["eval", "--real", str(root / "val"), "--synth", str(out / "samples"), "--predictor",
                 str(out / "pred"), "--out", str(out / "report"), "--pairs", "30", "--scales", "2"]) == 0
    return out


@pytest.mark.parametrize("variant", ["morphldm_c", "ldm"])
def test_every_command_is_byte_identical(workspace, variant):
    a = run_pipeline(workspace, variant, f"{variant}-a")
    b = run_pipeline(workspace, variant, f"{variant}-b")
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert ta.keys() == tb.keys()
    differing = [k for k in ta if ta[k] != tb[k] and not k.endswith("meta.json")]
    assert differing == []
    # meta files differ only by the output path recorded in the config
    for k in (k for k in ta if k.endswith("meta.json")):
        ma, mb = json.loads(ta[k]), json.loads(tb[k])
        for m in (ma, mb):
            m.get("config", {}).pop("output", None)
        assert ma == mb
    report = json.loads(ta["report/report.json"])
    assert set(report["metrics"]) == set(METRIC_NAMES)
    samples = load_dataset(a / "samples")
    assert np.allclose(samples.ages, np.linspace(5, 100, 100)) and samples.sexes.sum() == 50
    if variant.startswith("morph"):
        assert samples.fields is not None and samples.labels is not None


def test_resume_reproduces_trajectory(workspace, tmp_path):
    full = write_config(tmp_path / "full.yaml", workspace, "morphldm", output=str(tmp_path / "full"))
    part = write_config(tmp_path / "part.yaml", workspace, "morphldm", output=str(tmp_path / "part"))
    assert main(["train", "--stage", "1", "--config", str(full)]) == 0
    assert main(["train", "--stage", "1", "--config", str(part), "--max-steps", "2"]) == 0
    assert main(["train", "--stage", "1", "--config", str(part), "--resume"]) == 0
    csv_a = (tmp_path / "full" / "stage1" / "loss.csv").read_bytes()
    assert csv_a == (tmp_path / "part" / "stage1" / "loss.csv").read_bytes()
    assert (tmp_path / "full" / "stage1" / "params.safetensors").read_bytes() == \
        (tmp_path / "part" / "stage1" / "params.safetensors").read_bytes()


def test_pipeline_errors(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", workspace, "morphldm_c", output=str(tmp_path / "run"))
    assert main(["train", "--stage", "2", "--config", str(cfg)]) == 1
    assert main(["sample", "--config", str(cfg), "--n", "4", "--out", str(tmp_path / "s")]) == 2
    nodata = write_config(tmp_path / "n.yaml", tmp_path, "ldm")
    assert main(["train", "--stage", "1", "--config", str(nodata)]) == 2
    assert main(["train", "--stage", "1", "--config", str(cfg)]) == 0
    assert main(["train", "--stage", "2", "--config", str(cfg)]) == 0
    assert main(["sample", "--config", str(cfg), "--n", "4", "--ages", "5:150", "--out", str(tmp_path / "s")]) == 1
    assert main(["sample", "--config", str(cfg), "--n", "4", "--ages", "50:5", "--out", str(tmp_path / "s")]) == 1
    assert main(["sample", "--config", str(cfg), "--n", "4", "--out", str(tmp_path / "s")]) == 0
    assert main(["eval", "--real", str(workspace / "val"), "--synth", str(tmp_path / "s"),
                 "--predictor", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
    assert main(["eval", "--real", str(tmp_path / "nope"), "--synth", str(tmp_path / "s"),
                 "--predictor", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
    other = write_config(tmp_path / "o.yaml", workspace, "morphldm_c", output=str(tmp_path / "run"),
                         net={**TINY_NET, "base_width": 16})
    assert main(["train", "--stage", "1", "--config", str(other), "--resume"]) == 1


def test_nan_abort_writes_dump(workspace, tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml", workspace, "ldm", output=str(tmp_path / "run"))

    def explode(*args, **kwargs):
        raise cli_mod.pl.TrainingAborted(7, {"l1": float("nan"), "kl": 0.1})

    monkeypatch.setattr(cli_mod.pl, "train_stage1", explode)
    assert main(["train", "--stage", "1", "--config", str(cfg)]) == 3
    dump = json.loads((tmp_path / "run" / "abort_stage1.json").read_text())
    assert dump["step"] == 7 and dump["components"]["kl"] == 0.1


def test_real_vs_real_effect_sizes_are_small(tmp_path):
    for name, seed in (("a", 1), ("b", 2)):
        assert main(["gen-data", "--n", "400", "--seed", str(seed), "--age-dist", "uniform",
                     "--out", str(tmp_path / name)]) == 0
    assert main(["train-predictor", "--data", str(tmp_path / "a"), "--out", str(tmp_path / "p"),
                 "--steps", "2"]) == 0
    assert main(["eval", "--real", str(tmp_path / "a"), "--synth", str(tmp_path / "b"), "--predictor",
                 str(tmp_path / "p"), "--out", str(tmp_path / "r"), "--pairs", "50"]) == 0
    rows = (tmp_path / "r" / "regions.csv").read_text().splitlines()[1:]
    assert len(rows) == 3
    assert all(float(r.split(",")[-1]) < 0.1 for r in rows)
