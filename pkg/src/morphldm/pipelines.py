"""Two-stage training, attribute-predictor training, checkpoints and sampling.

All randomness derives from ``RunConfig.seed`` through named substreams
(:func:`substream_seed`), so a run is reproducible from its config alone.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from safetensors.torch import load_file, save_file

from . import diffusion as dm
from .fields import warp_labels
from .losses import Stage1Weights, adversarial_losses, l1_similarity, stage1_objective
from .nets import (
    AttributePredictor,
    DiffusionUNet,
    ImageAutoencoder,
    MorphAutoencoder,
    NetConfig,
    PatchDiscriminator,
    encode_condition,
)
from .phantoms import (
    REGION_NAMES,
    AgeBinnedSampler,
    Dataset,
    load_dataset,
    segment_by_intensity,
    validate_condition,
)

logger = logging.getLogger(__name__)

VARIANTS = ("ldm", "ldm_c", "morphldm", "morphldm_c")
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``components`` holds the last loss breakdown."""

    def __init__(self, step: int, components: dict[str, float]):
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


def substream_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for the named random stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(substream_seed(seed, name))


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


# --------------------------------------------------------------------------
# configuration


@dataclass
class OptimConfig:
    lr: float = 1e-4
    steps: int = 20000
    batch_size: int = 8
    warmup: int = 500
    log_every: int = 50
    checkpoint_every: int = 1000


@dataclass
class Stage2Config(OptimConfig):
    steps: int = 5000
    batch_size: int = 32
    calibration_size: int = 256
    ema_decay: float = 0.999


@dataclass
class ScheduleConfig:
    T: int = 250
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class RunConfig:
    variant: str = "morphldm_c"
    dataset: str = "data/train"
    val_dataset: str | None = "data/val"
    output: str = "runs/morphldm_c"
    seed: int = 0
    adversarial: bool = False
    bin_width: float = 10.0
    heldout_size: int = 200
    net: NetConfig = field(default_factory=NetConfig)
    weights: Stage1Weights = field(default_factory=Stage1Weights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stage1: OptimConfig = field(default_factory=OptimConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")

    @property
    def morph(self) -> bool:
        return self.variant.startswith("morphldm")

    @property
    def conditional_ae(self) -> bool:
        return self.variant.endswith("_c")

    @property
    def stage1_dir(self) -> Path:
        return Path(self.output) / "stage1"

    @property
    def stage2_dir(self) -> Path:
        return Path(self.output) / "stage2"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {"net": NetConfig, "weights": Stage1Weights, "schedule": ScheduleConfig,
                    "stage1": OptimConfig, "stage2": Stage2Config}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, klass in sections.items():
                if key in d:
                    sub = d[key] or {}
                    bad = set(sub) - {f.name for f in fields(klass)}
                    if bad:
                        raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                    d[key] = klass(**sub)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


# --------------------------------------------------------------------------
# checkpoints


def dataset_fingerprint(path: str | Path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


def save_checkpoint(path: Path, tensors: dict[str, torch.Tensor], meta: dict, train_state: dict | None = None):
    path.mkdir(parents=True, exist_ok=True)
    save_file({k: v.detach().contiguous() for k, v in tensors.items()}, str(path / "params.safetensors"))
    if train_state is not None:
        torch.save(train_state, path / "train_state.pt")
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_meta(path: str | Path) -> dict:
    path = Path(path)
    if not (path / "meta.json").exists() or not (path / "params.safetensors").exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path / "meta.json") as fh:
        return json.load(fh)


def _prefixed(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _load_prefixed(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    sub = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    try:
        module.load_state_dict(sub, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter mismatch for {prefix}: {exc}") from exc


def _check_meta(meta: dict, cfg: RunConfig, stage: int) -> None:
    if meta.get("stage") != stage:
        raise CheckpointError(f"expected a stage-{stage} checkpoint, found stage {meta.get('stage')}")
    if meta.get("variant") != cfg.variant:
        raise CheckpointError(f"checkpoint variant {meta.get('variant')!r} != config variant {cfg.variant!r}")
    if meta.get("net") != cfg.net.to_dict():
        raise CheckpointError("checkpoint network config does not match the run config")
    if stage == 2 and meta.get("schedule") != asdict(cfg.schedule):
        raise CheckpointError("checkpoint diffusion schedule does not match the run config")


# --------------------------------------------------------------------------
# model construction


def build_autoencoder(cfg: RunConfig, init_mean: float = 0.5):
    klass = MorphAutoencoder if cfg.morph else ImageAutoencoder
    return klass(cfg.net, cfg.conditional_ae, init_mean)


def build_unet(cfg: RunConfig) -> DiffusionUNet:
    extra = cfg.net.num_conditions if cfg.conditional_ae else 0
    return DiffusionUNet(cfg.net, cfg.schedule.T, extra_in=extra)


def build_schedule(cfg: RunConfig) -> dm.DiffusionSchedule:
    s = cfg.schedule
    return dm.make_schedule(s.T, s.kind, s.beta_min, s.beta_max)


def warmup_lambda(warmup: int):
    return lambda step: min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0


def _tensors(ds: Dataset):
    x = torch.from_numpy(np.ascontiguousarray(ds.images)).float()
    c = encode_condition(ds.ages, ds.sexes)
    return x, c


def _write_loss_log(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def _read_loss_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1State:
    model: torch.nn.Module
    disc: torch.nn.Module | None
    opt: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer | None
    sched: torch.optim.lr_scheduler.LambdaLR
    sampler: AgeBinnedSampler
    gen: torch.Generator
    step: int = 0
    log: list = field(default_factory=list)


def init_stage1(cfg: RunConfig, ds: Dataset) -> Stage1State:
    torch.manual_seed(substream_seed(cfg.seed, "stage1-init"))
    model = build_autoencoder(cfg, init_mean=float(ds.images.mean()))
    disc = PatchDiscriminator(cfg.net) if cfg.adversarial else None
    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage1.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.stage1.lr) if disc is not None else None
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_lambda(cfg.stage1.warmup))
    sampler = AgeBinnedSampler(ds.ages, cfg.bin_width, numpy_rng(cfg.seed, "stage1-sampler"))
    return Stage1State(model, disc, opt, opt_d, sched, sampler, torch_generator(cfg.seed, "stage1-noise"))


def stage1_step(cfg: RunConfig, st: Stage1State, x_all: torch.Tensor, c_all: torch.Tensor) -> dict[str, float]:
    """One optimizer step (plus one discriminator step when adversarial)."""
    model, disc = st.model, st.disc
    model.train()
    idx = torch.from_numpy(st.sampler.draw(cfg.stage1.batch_size))
    x, c = x_all[idx], c_all[idx]
    noise = torch.randn((x.shape[0], cfg.net.latent_channels) + cfg.net.latent_size, generator=st.gen)
    out = model(x, c, noise)
    disc_fake = None
    if disc is not None:
        for p in disc.parameters():
            p.requires_grad_(False)
        disc_fake = disc(out["recon"])
    total, comps = stage1_objective(x, out["recon"], cfg.weights, out["mu"], out["logvar"], out["field"], disc_fake)
    record = {"step": st.step, "total": total.item(), **{k: v.item() for k, v in comps.items()}}
    if not math.isfinite(record["total"]):
        raise TrainingAborted(st.step, {k: v for k, v in record.items() if k != "step"})
    st.opt.zero_grad(set_to_none=True)
    total.backward()
    st.opt.step()
    st.sched.step()
    if disc is not None:
        for p in disc.parameters():
            p.requires_grad_(True)
        _, d_loss = adversarial_losses(disc(x), disc(out["recon"].detach()))
        st.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        st.opt_d.step()
        record["disc"] = d_loss.item()
    st.step += 1
    return record


@torch.no_grad()
def heldout_l1(model, ds: Dataset, n: int = 200, batch: int = 50) -> float:
    """Mean L1 between held-out images and their deterministic (mu) reconstructions."""
    model.eval()
    x_all, c_all = _tensors(ds.subset(range(min(n, len(ds)))))
    total = 0.0
    for i in range(0, len(x_all), batch):
        out = model(x_all[i : i + batch], c_all[i : i + batch])
        total += float(l1_similarity(out["recon"].clamp(0, 1), x_all[i : i + batch])) * len(x_all[i : i + batch])
    return total / len(x_all)


def _stage1_tensors(st: Stage1State) -> dict[str, torch.Tensor]:
    tensors = _prefixed("autoencoder", st.model)
    if st.disc is not None:
        tensors.update(_prefixed("discriminator", st.disc))
    return tensors


def save_stage1(cfg: RunConfig, st: Stage1State, path: Path, extra_meta: dict | None = None) -> None:
    meta = {
        "stage": 1,
        "variant": cfg.variant,
        "net": cfg.net.to_dict(),
        "weights": cfg.weights.to_dict(),
        "adversarial": cfg.adversarial,
        "step": st.step,
        "dataset_fingerprint": dataset_fingerprint(cfg.dataset),
        "config": cfg.to_dict(),
        **(extra_meta or {}),
    }
    state = {
        "opt": st.opt.state_dict(),
        "opt_d": st.opt_d.state_dict() if st.opt_d is not None else None,
        "lr_sched": st.sched.state_dict(),
        "sampler_rng": st.sampler.rng.bit_generator.state,
        "gen": st.gen.get_state(),
    }
    save_checkpoint(path, _stage1_tensors(st), meta, state)
    _write_loss_log(path / "loss.csv", st.log)


def restore_stage1(cfg: RunConfig, st: Stage1State, path: Path) -> dict:
    meta = read_meta(path)
    _check_meta(meta, cfg, 1)
    tensors = load_file(str(path / "params.safetensors"))
    _load_prefixed(st.model, tensors, "autoencoder")
    if st.disc is not None:
        _load_prefixed(st.disc, tensors, "discriminator")
    if (path / "train_state.pt").exists():
        state = torch.load(path / "train_state.pt", weights_only=False)
        st.opt.load_state_dict(state["opt"])
        if st.opt_d is not None and state["opt_d"] is not None:
            st.opt_d.load_state_dict(state["opt_d"])
        st.sched.load_state_dict(state["lr_sched"])
        st.sampler.rng.bit_generator.state = state["sampler_rng"]
        st.gen.set_state(state["gen"])
    st.step = int(meta["step"])
    st.log = [r for r in _read_loss_log(path / "loss.csv") if r["step"] < st.step]
    return meta


def train_stage1(cfg: RunConfig, resume: bool = False, max_steps: int | None = None, progress=None) -> Path:
    """Train the stage-1 autoencoder; returns the checkpoint directory.

    ``max_steps`` stops early (the checkpoint still records the true step).
    """
    ds = load_dataset(cfg.dataset)
    x_all, c_all = _tensors(ds)
    st = init_stage1(cfg, ds)
    out_dir = cfg.stage1_dir
    if resume and (out_dir / "meta.json").exists():
        restore_stage1(cfg, st, out_dir)
        logger.info("resumed stage 1 at step %d", st.step)
    stop = cfg.stage1.steps if max_steps is None else min(cfg.stage1.steps, max_steps)
    while st.step < stop:
        record = stage1_step(cfg, st, x_all, c_all)
        if record["step"] % cfg.stage1.log_every == 0:
            st.log.append(record)
            logger.info("stage1 %s", record)
            if progress:
                progress(record)
        if st.step % cfg.stage1.checkpoint_every == 0 and st.step < stop:
            save_stage1(cfg, st, out_dir)
    extra = {}
    if cfg.val_dataset:
        extra["heldout_l1"] = heldout_l1(st.model, load_dataset(cfg.val_dataset), cfg.heldout_size)
    save_stage1(cfg, st, out_dir, extra)
    return out_dir


def load_autoencoder(cfg: RunConfig, path: Path | None = None):
    path = Path(path) if path is not None else cfg.stage1_dir
    meta = read_meta(path)
    _check_meta(meta, cfg, 1)
    model = build_autoencoder(cfg)
    _load_prefixed(model, load_file(str(path / "params.safetensors")), "autoencoder")
    model.eval()
    return model, meta


# --------------------------------------------------------------------------
# stage 2


@torch.no_grad()
def encode_latents(model, x: torch.Tensor, c: torch.Tensor, batch: int = 100) -> torch.Tensor:
    """Latent means for every image (stage-2 trains on the mode)."""
    model.eval()
    return torch.cat([model.encode(x[i : i + batch], c[i : i + batch])[0] for i in range(0, len(x), batch)])


@dataclass
class Stage2State:
    unet: DiffusionUNet
    ema: DiffusionUNet
    opt: torch.optim.Optimizer
    sched: torch.optim.lr_scheduler.LambdaLR
    sampler: AgeBinnedSampler
    gen: torch.Generator
    scaler: dm.LatentScaler
    step: int = 0
    log: list = field(default_factory=list)


def calibrate_scaler(latents: torch.Tensor, size: int) -> dm.LatentScaler:
    return dm.LatentScaler.calibrate(latents[:size])


def init_stage2(cfg: RunConfig, ds: Dataset, latents: torch.Tensor) -> Stage2State:
    torch.manual_seed(substream_seed(cfg.seed, "stage2-init"))
    unet = build_unet(cfg)
    ema = copy.deepcopy(unet).requires_grad_(False)
    opt = torch.optim.Adam(unet.parameters(), lr=cfg.stage2.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_lambda(cfg.stage2.warmup))
    calib = torch.from_numpy(numpy_rng(cfg.seed, "stage2-calibration").permutation(len(ds)))
    scaler = calibrate_scaler(latents[calib], cfg.stage2.calibration_size)
    sampler = AgeBinnedSampler(ds.ages, cfg.bin_width, numpy_rng(cfg.seed, "stage2-sampler"))
    return Stage2State(unet, ema, opt, sched, sampler, torch_generator(cfg.seed, "stage2-noise"), scaler)


def stage2_step(cfg: RunConfig, st: Stage2State, latents: torch.Tensor, c_all: torch.Tensor, sched) -> dict:
    st.unet.train()
    idx = torch.from_numpy(st.sampler.draw(cfg.stage2.batch_size))
    z0 = dm.scale_latent(latents[idx], st.scaler)
    loss = dm.training_step(z0, c_all[idx], st.unet, sched, st.gen)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingAborted(st.step, {"denoising": value})
    st.opt.zero_grad(set_to_none=True)
    loss.backward()
    st.opt.step()
    st.sched.step()
    with torch.no_grad():
        d = cfg.stage2.ema_decay
        for pe, p in zip(st.ema.parameters(), st.unet.parameters()):
            pe.mul_(d).add_(p.detach(), alpha=1 - d)
    record = {"step": st.step, "denoising": value}
    st.step += 1
    return record


def save_stage2(cfg: RunConfig, st: Stage2State, path: Path, stage1_meta: dict) -> None:
    meta = {
        "stage": 2,
        "variant": cfg.variant,
        "net": cfg.net.to_dict(),
        "schedule": asdict(cfg.schedule),
        "latent_scale": st.scaler.scale,
        "step": st.step,
        "stage1_step": stage1_meta["step"],
        "dataset_fingerprint": dataset_fingerprint(cfg.dataset),
        "config": cfg.to_dict(),
    }
    tensors = {**_prefixed("unet", st.unet), **_prefixed("ema", st.ema)}
    state = {
        "opt": st.opt.state_dict(),
        "lr_sched": st.sched.state_dict(),
        "sampler_rng": st.sampler.rng.bit_generator.state,
        "gen": st.gen.get_state(),
    }
    save_checkpoint(path, tensors, meta, state)
    _write_loss_log(path / "loss.csv", st.log)


def restore_stage2(cfg: RunConfig, st: Stage2State, path: Path) -> dict:
    meta = read_meta(path)
    _check_meta(meta, cfg, 2)
    tensors = load_file(str(path / "params.safetensors"))
    _load_prefixed(st.unet, tensors, "unet")
    _load_prefixed(st.ema, tensors, "ema")
    st.scaler = dm.LatentScaler(meta["latent_scale"])
    if (path / "train_state.pt").exists():
        state = torch.load(path / "train_state.pt", weights_only=False)
        st.opt.load_state_dict(state["opt"])
        st.sched.load_state_dict(state["lr_sched"])
        st.sampler.rng.bit_generator.state = state["sampler_rng"]
        st.gen.set_state(state["gen"])
    st.step = int(meta["step"])
    st.log = [r for r in _read_loss_log(path / "loss.csv") if r["step"] < st.step]
    return meta


def train_stage2(cfg: RunConfig, resume: bool = False, max_steps: int | None = None, progress=None) -> Path:
    model, meta1 = load_autoencoder(cfg)
    model.requires_grad_(False)
    ds = load_dataset(cfg.dataset)
    x_all, c_all = _tensors(ds)
    latents = encode_latents(model, x_all, c_all)
    sched = build_schedule(cfg)
    st = init_stage2(cfg, ds, latents)
    out_dir = cfg.stage2_dir
    if resume and (out_dir / "meta.json").exists():
        restore_stage2(cfg, st, out_dir)
        logger.info("resumed stage 2 at step %d", st.step)
    stop = cfg.stage2.steps if max_steps is None else min(cfg.stage2.steps, max_steps)
    while st.step < stop:
        record = stage2_step(cfg, st, latents, c_all, sched)
        if record["step"] % cfg.stage2.log_every == 0:
            st.log.append(record)
            logger.info("stage2 %s", record)
            if progress:
                progress(record)
        if st.step % cfg.stage2.checkpoint_every == 0 and st.step < stop:
            save_stage2(cfg, st, out_dir, meta1)
    save_stage2(cfg, st, out_dir, meta1)
    return out_dir


def load_diffusion(cfg: RunConfig, path: Path | None = None, ema: bool = True):
    path = Path(path) if path is not None else cfg.stage2_dir
    meta = read_meta(path)
    _check_meta(meta, cfg, 2)
    unet = build_unet(cfg)
    _load_prefixed(unet, load_file(str(path / "params.safetensors")), "ema" if ema else "unet")
    unet.eval()
    return unet, dm.LatentScaler(meta["latent_scale"]), meta


# --------------------------------------------------------------------------
# sampling


def condition_plan(n: int, age_range: tuple[float, float] = (5.0, 100.0), sex_balance: float = 0.5):
    """Ages linearly spaced over ``age_range`` with sexes interleaved so that
    ``round(n * sex_balance)`` samples are male."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = age_range
    for a in (lo, hi):
        validate_condition(a, 0)
    if not 0.0 <= sex_balance <= 1.0:
        raise ValueError("sex_balance must be in [0, 1]")
    ages = np.linspace(lo, hi, n)
    n_male = int(round(n * sex_balance))
    i = np.arange(n)
    sexes = (np.floor((i + 1) * n_male / n) - np.floor(i * n_male / n)).astype(np.int64)
    return ages, sexes


@torch.no_grad()
def generate_samples(
    cfg: RunConfig,
    ages: np.ndarray,
    sexes: np.ndarray,
    seed: int,
    chunk: int = 250,
    intensities=None,
) -> Dataset:
    """Sample latents with the diffusion model and decode them.

    Morph variants return per-sample fields, templates and labels obtained by
    warping the template's segmentation; LDM variants return images only.
    """
    ages = np.asarray(ages, dtype=np.float64)
    sexes = np.asarray(sexes, dtype=np.int64)
    for a, s in zip(ages, sexes):
        validate_condition(float(a), int(s))
    model, meta1 = load_autoencoder(cfg)
    unet, scaler, meta2 = load_diffusion(cfg)
    sched = build_schedule(cfg)
    spec = load_dataset(cfg.dataset).spec if intensities is None else {"intensities": intensities}
    intensities = tuple(spec.get("intensities", (0.0, 0.45, 0.8, 0.15)))
    n = len(ages)
    shape_lat = (cfg.net.latent_channels,) + cfg.net.latent_size
    images, fields_, templates, labels = [], [], [], []
    for k, start in enumerate(range(0, n, chunk)):
        sl = slice(start, min(n, start + chunk))
        c = encode_condition(ages[sl], sexes[sl])
        gen = torch_generator(seed, f"sample-chunk-{k}")
        z = dm.ddpm_sample(unet, c, sched, gen, (len(c),) + shape_lat)
        z = dm.unscale_latent(z, scaler)
        img, fld, tmpl = model.decode(z, c)
        if cfg.morph:
            tl = torch.from_numpy(segment_by_intensity(tmpl.numpy(), intensities)).long()
            labels.append(warp_labels(tl, fld, len(REGION_NAMES)).numpy().astype(np.uint8))
            fields_.append(fld.numpy())
            templates.append(tmpl.numpy())
        images.append(img.clamp(0, 1).numpy())
    return Dataset(
        images=np.concatenate(images).astype(np.float32),
        labels=np.concatenate(labels) if labels else None,
        ages=ages,
        sexes=sexes,
        seeds=np.full(n, seed, dtype=np.int64),
        ids=[f"{i:06d}" for i in range(n)],
        spec=spec if "image_size" in spec else {"intensities": list(intensities)},
        kind="synthetic",
        fields=np.concatenate(fields_).astype(np.float32) if fields_ else None,
        templates=np.concatenate(templates).astype(np.float32) if templates else None,
        extra={
            "variant": cfg.variant,
            "stage1_step": meta1["step"],
            "stage2_step": meta2["step"],
            "seed": int(seed),
        },
    )


# --------------------------------------------------------------------------
# attribute predictor


@dataclass
class PredictorConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    bin_width: float = 10.0
    # random blur then random noise, so noise level carries no attribute signal
    blur_max: float = 1.0
    noise_max: float = 0.03


def gaussian_blur(x: torch.Tensor, sigma: float, radius: int = 3) -> torch.Tensor:
    """Separable Gaussian blur of ``(B, C, *S)`` with replicate padding."""
    if sigma <= 0:
        return x
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-(t**2) / (2 * sigma**2))
    k = k / k.sum()
    nd, ch = x.dim() - 2, x.shape[1]
    conv = F.conv2d if nd == 2 else F.conv3d
    for axis in range(nd):
        shape = [1] * nd
        shape[axis] = len(k)
        pad = [0] * (2 * nd)
        pad[2 * (nd - 1 - axis)] = pad[2 * (nd - 1 - axis) + 1] = radius
        x = conv(F.pad(x, pad, mode="replicate"), k.view(1, 1, *shape).expand(ch, 1, *shape), groups=ch)
    return x


def augment_batch(x: torch.Tensor, pcfg: "PredictorConfig", gen: torch.Generator) -> torch.Tensor:
    sigmas = torch.rand(len(x), generator=gen, dtype=torch.float64) * pcfg.blur_max
    levels = torch.rand(len(x), generator=gen, dtype=torch.float64) * pcfg.noise_max
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    out = torch.cat([gaussian_blur(x[i : i + 1], float(sigmas[i])) for i in range(len(x))])
    return (out + levels.to(x.dtype).view(-1, *([1] * (x.dim() - 1))) * noise).clamp(0, 1)


def train_predictor(dataset: str | Path, out: str | Path, pcfg: PredictorConfig, net: NetConfig | None = None,
                    progress=None) -> Path:
    """Age regressor (MSE on age/100) and sex classifier (BCE) sharing one trunk."""
    ds = load_dataset(dataset)
    net = net or NetConfig(image_size=tuple(ds.images.shape[2:]))
    x_all, c_all = _tensors(ds)
    torch.manual_seed(substream_seed(pcfg.seed, "predictor-init"))
    model = AttributePredictor(net)
    opt = torch.optim.Adam(model.parameters(), lr=pcfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, pcfg.steps)
    sampler = AgeBinnedSampler(ds.ages, pcfg.bin_width, numpy_rng(pcfg.seed, "predictor-sampler"))
    aug_gen = torch_generator(pcfg.seed, "predictor-augment")
    log = []
    model.train()
    for step in range(pcfg.steps):
        idx = torch.from_numpy(sampler.draw(pcfg.batch_size))
        x = x_all[idx]
        if pcfg.blur_max > 0 or pcfg.noise_max > 0:
            x = augment_batch(x, pcfg, aug_gen)
        age, logit, _ = model(x)
        loss_age = F.mse_loss(age / 100.0, c_all[idx, 0])
        loss_sex = F.binary_cross_entropy_with_logits(logit, c_all[idx, 1])
        loss = loss_age + loss_sex
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 50 == 0:
            rec = {"step": step, "age_mse": loss_age.item(), "sex_bce": loss_sex.item()}
            log.append(rec)
            if progress:
                progress(rec)
    out = Path(out)
    meta = {
        "kind": "attribute_predictor",
        "net": net.to_dict(),
        "predictor": asdict(pcfg),
        "dataset_fingerprint": dataset_fingerprint(dataset),
        "step": pcfg.steps,
    }
    save_checkpoint(out, _prefixed("predictor", model), meta)
    _write_loss_log(out / "loss.csv", log)
    return out


def load_predictor(path: str | Path) -> AttributePredictor:
    path = Path(path)
    meta = read_meta(path)
    if meta.get("kind") != "attribute_predictor":
        raise CheckpointError(f"{path} is not an attribute-predictor checkpoint")
    model = AttributePredictor(NetConfig(**meta["net"]))
    _load_prefixed(model, load_file(str(path / "params.safetensors")), "predictor")
    model.eval()
    return model


@torch.no_grad()
def predict_attributes(model: AttributePredictor, images: np.ndarray, batch: int = 100):
    """``(age_years, sex_logit, features)`` arrays for ``(N, 1, *S)`` images."""
    model.eval()
    ages, logits, feats = [], [], []
    for i in range(0, len(images), batch):
        a, s, f = model(torch.from_numpy(np.ascontiguousarray(images[i : i + batch])).float())
        ages.append(a.numpy())
        logits.append(s.numpy())
        feats.append(f.numpy())
    return np.concatenate(ages), np.concatenate(logits), np.concatenate(feats)
