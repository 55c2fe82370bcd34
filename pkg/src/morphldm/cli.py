"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import yaml

from . import pipelines as pl
from .evaluation import evaluate_cohorts, write_report
from .phantoms import DatasetError, PhantomSpec, load_dataset, save_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 0, 1, 2, 3


@dataclass
class CommandResult:
    code: int
    summary: str
    artifacts: list[str] = field(default_factory=list)


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise click.BadParameter(f"expected LO:HI, got {text!r}")
    if lo > hi:
        raise click.BadParameter(f"empty range {text!r}")
    return lo, hi


def _load_config(path: str) -> pl.RunConfig:
    try:
        return pl.load_config(path)
    except FileNotFoundError:
        raise CommandFailed(EXIT_USAGE, f"config file not found: {path}")
    except pl.ConfigError as exc:
        raise CommandFailed(EXIT_USAGE, f"invalid config: {exc}")


def _load_spec(path: str | None) -> PhantomSpec:
    if path is None:
        return PhantomSpec()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return PhantomSpec.from_dict(raw)
    except FileNotFoundError:
        raise CommandFailed(EXIT_USAGE, f"spec file not found: {path}")
    except (TypeError, ValueError, yaml.YAMLError) as exc:
        raise CommandFailed(EXIT_USAGE, f"invalid phantom spec: {exc}")


# --------------------------------------------------------------------------
# command bodies


def cmd_gen_data(spec_path, n, out, seed, age_range, sex_balance, age_distribution) -> CommandResult:
    if n < 1:
        raise CommandFailed(EXIT_USAGE, "--n must be >= 1")
    if not 0 <= sex_balance <= 1:
        raise CommandFailed(EXIT_USAGE, "--sex-balance must be in [0, 1]")
    spec = _load_spec(spec_path)
    try:
        ds = write_dataset(spec, n, age_range, sex_balance, out, seed=seed, age_distribution=age_distribution)
    except ValueError as exc:
        raise CommandFailed(EXIT_USAGE, str(exc))
    except OSError as exc:
        raise CommandFailed(EXIT_DATA, f"cannot write dataset: {exc}")
    young = float((ds.ages < 20).mean())
    summary = (f"wrote {len(ds)} phantoms {spec.image_size} to {out} "
               f"(male {int(ds.sexes.sum())}, age<20 {young:.0%}, spec {spec.fingerprint()[:12]})")
    return CommandResult(EXIT_OK, summary, [str(Path(out) / "manifest.json")])


def cmd_train(stage: int, config: str, resume: bool, max_steps: int | None) -> CommandResult:
    cfg = _load_config(config)
    if not Path(cfg.dataset, "manifest.json").exists():
        raise CommandFailed(EXIT_DATA, f"training dataset not found: {cfg.dataset}")
    if stage == 2 and not (cfg.stage1_dir / "meta.json").exists():
        raise CommandFailed(EXIT_USAGE, f"stage 2 needs a stage-1 checkpoint at {cfg.stage1_dir}")
    try:
        if stage == 1:
            path = pl.train_stage1(cfg, resume=resume, max_steps=max_steps)
        else:
            path = pl.train_stage2(cfg, resume=resume, max_steps=max_steps)
    except pl.TrainingAborted as exc:
        dump = Path(cfg.output) / f"abort_stage{stage}.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"step": exc.step, "components": exc.components}, indent=1) + "\n")
        raise CommandFailed(EXIT_ABORT, f"training aborted: {exc} (dump: {dump})")
    except pl.CheckpointError as exc:
        raise CommandFailed(EXIT_USAGE, f"incompatible checkpoint: {exc}")
    except DatasetError as exc:
        raise CommandFailed(EXIT_DATA, f"dataset error [{exc.code}]: {exc}")
    meta = pl.read_meta(path)
    summary = f"stage {stage} ({cfg.variant}) at step {meta['step']} -> {path}"
    if "heldout_l1" in meta:
        summary += f"; held-out L1 {meta['heldout_l1']:.4f}"
    return CommandResult(EXIT_OK, summary, [str(path / "params.safetensors"), str(path / "loss.csv")])


def cmd_train_predictor(data: str, out: str, steps: int, seed: int, batch_size: int, lr: float,
                        blur_max: float = 1.0, noise_max: float = 0.03) -> CommandResult:
    pcfg = pl.PredictorConfig(steps=steps, batch_size=batch_size, lr=lr, seed=seed, blur_max=blur_max,
                              noise_max=noise_max)
    try:
        path = pl.train_predictor(data, out, pcfg)
    except FileNotFoundError as exc:
        raise CommandFailed(EXIT_DATA, f"dataset not found: {exc}")
    except DatasetError as exc:
        raise CommandFailed(EXIT_DATA, f"dataset error [{exc.code}]: {exc}")
    return CommandResult(EXIT_OK, f"attribute predictor trained for {steps} steps -> {path}", [str(path)])


def cmd_sample(config: str, n: int, ages: tuple[float, float], sex_balance: float, seed: int, out: str) -> CommandResult:
    cfg = _load_config(config)
    try:
        age_plan, sexes = pl.condition_plan(n, ages, sex_balance)
    except ValueError as exc:
        raise CommandFailed(EXIT_USAGE, str(exc))
    try:
        ds = pl.generate_samples(cfg, age_plan, sexes, seed)
    except pl.CheckpointError as exc:
        raise CommandFailed(EXIT_DATA, f"checkpoint error: {exc}")
    except (DatasetError, FileNotFoundError) as exc:
        raise CommandFailed(EXIT_DATA, f"cannot read training dataset metadata: {exc}")
    save_dataset(ds, out)
    return CommandResult(
        EXIT_OK,
        f"wrote {len(ds)} {cfg.variant} samples (male {int(sexes.sum())}, ages {ages[0]:g}-{ages[1]:g}) to {out}",
        [str(Path(out) / "manifest.json")],
    )


def cmd_eval(real: str, synth: str, predictor: str, out: str, pairs: int, seed: int, scales: int = 3) -> CommandResult:
    try:
        real_ds = load_dataset(real)
        synth_ds = load_dataset(synth)
    except (DatasetError, FileNotFoundError) as exc:
        raise CommandFailed(EXIT_DATA, f"cannot read cohort: {exc}")
    try:
        model = pl.load_predictor(predictor)
    except pl.CheckpointError as exc:
        raise CommandFailed(EXIT_DATA, f"predictor unavailable: {exc}")
    try:
        report, match = evaluate_cohorts(real_ds, synth_ds, model, n_pairs=pairs, seed=seed, scales=scales)
    except ValueError as exc:
        raise CommandFailed(EXIT_DATA, f"evaluation failed: {exc}")
    report.config_fingerprint = pl.dataset_fingerprint(synth)[:16]
    written = write_report(report, out, real_ds.subset(match), synth_ds)
    m = report.metrics
    summary = (f"sex_acc {m['sex_acc']:.3f} age_mae {m['age_mae']:.2f} fd_phantom {m['fd_phantom']:.4g} "
               f"ms_ssim {m['ms_ssim']:.3f} -> {out}")
    return CommandResult(EXIT_OK, summary, [str(p) for p in written])


# --------------------------------------------------------------------------
# click surface


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
def cli(verbose):
    """Latent diffusion over deformation fields of a learned template."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command("gen-data")
@click.option("--spec", "spec_path", type=click.Path(), default=None, help="YAML phantom spec (defaults if omitted).")
@click.option("--n", type=int, required=True, help="Number of phantoms.")
@click.option("--out", type=click.Path(), required=True, help="Output dataset directory.")
@click.option("--seed", type=int, default=0, show_default=True, help="Dataset seed.")
@click.option("--age-range", default="5:100", show_default=True, help="Age range LO:HI in years.")
@click.option("--sex-balance", type=float, default=0.5, show_default=True, help="Fraction of male samples.")
@click.option("--age-dist", type=click.Choice(["skewed", "uniform", "linspace"]), default="skewed",
              show_default=True, help="Age distribution (skewed: 70% in [LO, 20]).")
def gen_data(spec_path, n, out, seed, age_range, sex_balance, age_dist):
    """Generate a phantom dataset."""
    return cmd_gen_data(spec_path, n, out, seed, parse_range(age_range), sex_balance, age_dist)


@cli.command("train")
@click.option("--stage", type=click.Choice(["1", "2"]), required=True, help="Training stage.")
@click.option("--config", type=click.Path(), required=True, help="Run config (YAML).")
@click.option("--resume", is_flag=True, help="Continue from the stage checkpoint if present.")
@click.option("--max-steps", type=int, default=None, help="Stop after this many total steps.")
def train(stage, config, resume, max_steps):
    """Train stage 1 (autoencoder) or stage 2 (latent diffusion)."""
    return cmd_train(int(stage), config, resume, max_steps)


@cli.command("train-predictor")
@click.option("--data", type=click.Path(), required=True, help="Real (phantom) training dataset.")
@click.option("--out", type=click.Path(), required=True, help="Checkpoint directory.")
@click.option("--steps", type=int, default=3000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--blur-max", type=click.FloatRange(0), default=1.0, show_default=True,
              help="Augmentation: Gaussian blur sigma drawn from [0, max] voxels.")
@click.option("--noise-max", type=click.FloatRange(0), default=0.03, show_default=True,
              help="Augmentation: added noise std drawn from [0, max].")
def train_predictor(data, out, steps, seed, batch_size, lr, blur_max, noise_max):
    """Train the age/sex attribute predictor on real phantoms."""
    return cmd_train_predictor(data, out, steps, seed, batch_size, lr, blur_max, noise_max)


@cli.command("sample")
@click.option("--config", type=click.Path(), required=True, help="Run config with trained checkpoints.")
@click.option("--n", type=int, default=1000, show_default=True, help="Number of samples.")
@click.option("--ages", default="5:100", show_default=True, help="Linearly spaced ages LO:HI.")
@click.option("--sex-balance", type=float, default=0.5, show_default=True, help="Fraction of male samples.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output sample-set directory.")
def sample(config, n, ages, sex_balance, seed, out):
    """Generate a conditioned sample set."""
    return cmd_sample(config, n, parse_range(ages), sex_balance, seed, out)


@cli.command("eval")
@click.option("--real", type=click.Path(), required=True, help="Real validation pool (dataset dir).")
@click.option("--synth", type=click.Path(), required=True, help="Synthetic sample set (dataset dir).")
@click.option("--predictor", type=click.Path(), required=True, help="Attribute-predictor checkpoint.")
@click.option("--out", type=click.Path(), required=True, help="Report directory.")
@click.option("--pairs", type=int, default=1000, show_default=True, help="MS-SSIM pairs.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scales", type=click.IntRange(1, 5), default=3, show_default=True,
              help="MS-SSIM scales (images must exceed 10 * 2**(scales-1) voxels per side).")
def evaluate(real, synth, predictor, out, pairs, seed, scales):
    """Compare a synthetic cohort with a matched real cohort."""
    return cmd_eval(real, synth, predictor, out, pairs, seed, scales)


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, prog_name="morphldm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except CommandFailed as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.code
    if isinstance(result, CommandResult):
        click.echo(result.summary)
        return result.code
    return EXIT_OK if result is None else int(result)


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
