"""End-to-end phantom benchmark: data, both model variants, predictor,
sampling and evaluation, driven through the CLI.

Every stage is skipped when its output already exists with the expected
step count, so an interrupted run picks up where it stopped::

    python -m morphldm.benchmark --root bench
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from . import cli

logger = logging.getLogger(__name__)


@dataclass
class Budget:
    n_train: int = 2000
    n_val: int = 1000
    n_samples: int = 500
    ms_ssim_pairs: int = 1000
    stage1_steps: int = 4000
    stage2_steps: int = 5000
    predictor_steps: int = 2500
    stage1_lr: float = 1e-3
    stage2_lr: float = 5e-4
    alpha: float = 0.2
    beta: float = 1.0
    T: int = 250
    seed: int = 0
    variants: tuple[str, ...] = ("morphldm_c", "ldm")


def run_config(root: Path, variant: str, b: Budget) -> dict:
    return {
        "config_version": 1,
        "variant": variant,
        "dataset": str(root / "data" / "train"),
        "val_dataset": str(root / "data" / "val_a"),
        "output": str(root / "runs" / variant),
        "seed": b.seed,
        "weights": {"alpha": b.alpha, "beta": b.beta},
        "schedule": {"T": b.T, "kind": "linear"},
        "stage1": {"lr": b.stage1_lr, "steps": b.stage1_steps, "log_every": 50, "checkpoint_every": 1000},
        "stage2": {"lr": b.stage2_lr, "steps": b.stage2_steps, "log_every": 50, "checkpoint_every": 1000},
    }


class _Runner:
    """Runs CLI commands and records their wall time in ``timings.json``."""

    def __init__(self, root: Path):
        self.path = root / "timings.json"
        self.timings = json.loads(self.path.read_text()) if self.path.exists() else {}

    def __call__(self, key: str, argv: list[str]) -> None:
        t0 = time.time()
        code = cli.main(argv)
        if code != 0:
            raise RuntimeError(f"`morphldm {' '.join(argv)}` exited with {code}")
        elapsed = time.time() - t0
        logger.info("%s done in %.0fs", key, elapsed)
        # resumed stages accumulate
        self.timings[key] = self.timings.get(key, 0.0) + elapsed
        self.path.write_text(json.dumps(self.timings, indent=1, sort_keys=True) + "\n")


def _checkpoint_step(path: Path) -> int | None:
    meta = path / "meta.json"
    if not meta.exists():
        return None
    return json.loads(meta.read_text()).get("step")


def run_benchmark(root: str | Path, budget: Budget | None = None) -> dict:
    """Run (or resume) the benchmark under ``root``; returns artifact paths."""
    b = budget or Budget()
    root = Path(root)
    data = root / "data"
    root.mkdir(parents=True, exist_ok=True)
    _run = _Runner(root)
    (root / "budget.json").write_text(json.dumps(asdict(b), indent=1) + "\n")

    cohorts = {
        "train": (b.n_train, b.seed + 1, "skewed"),
        "val_a": (b.n_val, b.seed + 2, "uniform"),
        "val_b": (b.n_val, b.seed + 3, "uniform"),
    }
    for name, (n, seed, dist) in cohorts.items():
        if not (data / name / "manifest.json").exists():
            _run(f"gen-data/{name}", ["gen-data", "--n", str(n), "--out", str(data / name), "--seed", str(seed), "--age-dist", dist])

    predictor = root / "predictor"
    if _checkpoint_step(predictor) != b.predictor_steps:
        _run("train-predictor", ["train-predictor", "--data", str(data / "train"), "--out", str(predictor),
              "--steps", str(b.predictor_steps), "--seed", str(b.seed)])

    out = {"root": str(root), "predictor": str(predictor), "reports": {}, "samples": {}, "configs": {}}
    # real-vs-real control: pool B plays the synthetic cohort
    control = root / "reports" / "real_control"
    if not (control / "report.json").exists():
        _run("eval/real_control", ["eval", "--real", str(data / "val_a"), "--synth", str(data / "val_b"), "--predictor", str(predictor),
              "--out", str(control), "--pairs", str(b.ms_ssim_pairs), "--seed", str(b.seed)])
    out["reports"]["real_control"] = str(control)
    for variant in b.variants:
        cfg = run_config(root, variant, b)
        cfg_path = root / "configs" / f"{variant}.yaml"
        cfg_path.parent.mkdir(parents=True, exist_ok=True)
        cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=True))
        out["configs"][variant] = str(cfg_path)
        run_dir = Path(cfg["output"])
        if _checkpoint_step(run_dir / "stage1") != b.stage1_steps:
            _run(f"stage1/{variant}", ["train", "--stage", "1", "--config", str(cfg_path), "--resume"])
        if _checkpoint_step(run_dir / "stage2") != b.stage2_steps:
            _run(f"stage2/{variant}", ["train", "--stage", "2", "--config", str(cfg_path), "--resume"])
        samples = root / "samples" / variant
        if not (samples / "manifest.json").exists():
            _run(f"sample/{variant}", ["sample", "--config", str(cfg_path), "--n", str(b.n_samples), "--ages", "5:100",
                  "--seed", str(b.seed), "--out", str(samples)])
        report = root / "reports" / variant
        if not (report / "report.json").exists():
            _run(f"eval/{variant}", ["eval", "--real", str(data / "val_a"), "--synth", str(samples), "--predictor", str(predictor),
                  "--out", str(report), "--pairs", str(b.ms_ssim_pairs), "--seed", str(b.seed)])
        out["samples"][variant] = str(samples)
        out["reports"][variant] = str(report)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", required=True, help="working directory for all artifacts")
    for f in Budget.__dataclass_fields__.values():
        if f.name == "variants":
            parser.add_argument("--variants", nargs="+", default=list(Budget.variants))
        else:
            parser.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = vars(parser.parse_args(argv))
    root = args.pop("root")
    args["variants"] = tuple(args["variants"])
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    result = run_benchmark(root, Budget(**args))
    print(json.dumps(result, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
