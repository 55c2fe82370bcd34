"""Synthetic brain-like phantoms with attribute-dependent morphology.

Each phantom is an elliptical "head" with a cortex band whose thickness
depends on sex, white matter, and a central ventricle whose radius grows
linearly with age. A smooth random per-sample deformation gives individual
variability, applied identically to image and labels (labels are evaluated
analytically at the warped coordinates, and the clean image is a lookup of
the label intensities, so the two are always consistent).

Datasets are stored as a directory holding ``manifest.json`` plus raw
little-endian blobs (``images.f32``, ``labels.u8`` and, for synthetic sample
sets, ``fields.f32`` / ``templates.f32``) with a CRC32 per sample and blob.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

logger = logging.getLogger(__name__)

REGION_NAMES = ("background", "cortex", "white_matter", "ventricle")
FORMAT_NAME = "morphldm-dataset"
FORMAT_VERSION = 1


@dataclass
class PhantomSpec:
    """Phantom geometry. Lengths are fractions of the half image size except
    ``warp_amplitude`` (voxels). ``warp_smoothness`` is the control-grid size
    of the random warp (fewer points means smoother)."""

    image_size: tuple[int, ...] = (64, 64)
    noise_sigma: float = 0.02
    warp_smoothness: int = 5
    warp_amplitude: float = 2.0
    head_axes: tuple[float, ...] = (0.82, 0.70)
    ventricle_axes: tuple[float, ...] = (1.5, 1.0)
    base_ventricle_radius: float = 0.09
    ventricle_growth_rate: float = 0.0022
    cortex_thickness_by_sex: tuple[float, float] = (0.12, 0.18)
    intensities: tuple[float, ...] = (0.0, 0.45, 0.8, 0.15)

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.head_axes = tuple(float(a) for a in self.head_axes)
        self.ventricle_axes = tuple(float(a) for a in self.ventricle_axes)
        self.cortex_thickness_by_sex = tuple(float(t) for t in self.cortex_thickness_by_sex)
        self.intensities = tuple(float(v) for v in self.intensities)
        self.validate()

    @property
    def ndim(self) -> int:
        return len(self.image_size)

    def validate(self) -> None:
        if self.ndim not in (2, 3):
            raise ValueError(f"image_size must be 2D or 3D, got {self.image_size}")
        if any(s % 8 or s < 8 for s in self.image_size):
            raise ValueError(f"image sizes must be positive multiples of 8, got {self.image_size}")
        if len(self.head_axes) != self.ndim or len(self.ventricle_axes) != self.ndim:
            raise ValueError("head_axes and ventricle_axes need one entry per spatial dim")
        if self.noise_sigma < 0 or self.warp_amplitude < 0:
            raise ValueError("noise_sigma and warp_amplitude must be >= 0")
        if self.warp_smoothness < 2:
            raise ValueError("warp_smoothness must be >= 2")
        if len(self.intensities) != len(REGION_NAMES):
            raise ValueError(f"need {len(REGION_NAMES)} intensities")
        if self.base_ventricle_radius <= 0 or self.ventricle_growth_rate < 0:
            raise ValueError("ventricle radius must be positive and growth non-negative")
        thick = max(self.cortex_thickness_by_sex)
        if min(self.cortex_thickness_by_sex) <= 0 or thick >= min(self.head_axes):
            raise ValueError("cortex thickness must be positive and inside the head")
        r_max = self.ventricle_radius(120.0)
        if any(r_max * v >= h - thick for v, h in zip(self.ventricle_axes, self.head_axes)):
            raise ValueError("ventricle at age 120 would not fit inside the white matter")

    def ventricle_radius(self, age: float) -> float:
        return self.base_ventricle_radius + self.ventricle_growth_rate * age

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def validate_condition(age: float, sex: int) -> None:
    if not (0.0 <= float(age) <= 120.0) or not np.isfinite(age):
        raise ValueError(f"age must be in [0, 120], got {age}")
    if int(sex) != sex or int(sex) not in (0, 1):
        raise ValueError(f"sex must be 0 or 1, got {sex}")


def region_map(coords: np.ndarray, age: float, sex: int, spec: PhantomSpec) -> np.ndarray:
    """Analytic region labels at continuous voxel coordinates ``(D, *S)``."""
    half = np.array([(s - 1) / 2.0 for s in spec.image_size]).reshape(-1, *([1] * spec.ndim))
    scale = np.array([s / 2.0 for s in spec.image_size]).reshape(-1, *([1] * spec.ndim))
    q = (coords - half) / scale
    head_axes = np.array(spec.head_axes).reshape(q.shape[:1] + (1,) * spec.ndim)
    thick = spec.cortex_thickness_by_sex[int(sex)]
    rv = spec.ventricle_radius(age)
    vent_axes = rv * np.array(spec.ventricle_axes).reshape(head_axes.shape)

    head = ((q / head_axes) ** 2).sum(0) <= 1.0
    inner = ((q / (head_axes - thick)) ** 2).sum(0) <= 1.0
    vent = ((q / vent_axes) ** 2).sum(0) <= 1.0

    labels = np.zeros(spec.image_size, dtype=np.uint8)
    labels[head] = 1
    labels[inner] = 2
    labels[vent] = 3
    return labels


def random_smooth_displacement(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """Smooth random displacement ``(D, *S)`` in voxels from an upsampled control grid."""
    n = spec.warp_smoothness
    ctrl = rng.normal(0.0, spec.warp_amplitude, size=(1, spec.ndim) + (n,) * spec.ndim)
    mode = "bicubic" if spec.ndim == 2 else "trilinear"
    up = F.interpolate(torch.from_numpy(ctrl), size=spec.image_size, mode=mode, align_corners=True)
    return up[0].numpy()


def generate_phantom(
    age: float, sex: int, seed: int, spec: PhantomSpec | None = None, return_field: bool = False
):
    """Render one phantom; returns ``(image (1, *S) float32, labels (*S) uint8)``.

    Deterministic in ``(age, sex, seed, spec)``.
    """
    spec = spec or PhantomSpec()
    validate_condition(age, sex)
    rng = np.random.default_rng(seed)
    disp = random_smooth_displacement(rng, spec)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.image_size], indexing="ij"))
    labels = region_map(grid + disp, age, sex, spec)
    image = np.asarray(spec.intensities, dtype=np.float64)[labels]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    if return_field:
        return image, labels, disp.astype(np.float32)
    return image, labels


def sample_ages(
    rng: np.random.Generator,
    n: int,
    age_range: tuple[float, float] = (5.0, 100.0),
    distribution: str = "skewed",
    young_fraction: float = 0.7,
    young_max: float = 20.0,
) -> np.ndarray:
    """Ages for a cohort. ``skewed`` puts ``young_fraction`` of them in ``[lo, young_max]``."""
    lo, hi = age_range
    if distribution == "uniform":
        return rng.uniform(lo, hi, size=n)
    if distribution == "skewed":
        young = rng.random(n) < young_fraction
        ages = np.where(young, rng.uniform(lo, min(young_max, hi), size=n), rng.uniform(min(young_max, hi), hi, size=n))
        return ages
    if distribution == "linspace":
        return np.linspace(lo, hi, n)
    raise ValueError(f"unknown age distribution {distribution!r}")


def segment_by_intensity(images: np.ndarray, intensities=(0.0, 0.45, 0.8, 0.15)) -> np.ndarray:
    """Label ``(N, 1, *S)`` images with the phantom regions by intensity bands.

    Dark voxels connected to the image border are background, other dark
    voxels ventricle. Mid-intensity voxels touching the background are
    cortex; isolated mid-intensity voxels (partial volume between ventricle
    and white matter) go to the closer of those two.
    """
    bg_i, ctx_i, wm_i, ven_i = intensities
    dark_thr = 0.5 * (ven_i + ctx_i)
    bright_thr = 0.5 * (ctx_i + wm_i)
    inner_thr = 0.5 * (ven_i + wm_i)
    out = np.empty((images.shape[0],) + images.shape[2:], dtype=np.uint8)
    for n, img in enumerate(images[:, 0]):
        dark = img < dark_thr
        comp, _ = ndimage.label(dark)
        border = np.zeros_like(dark)
        for ax in range(img.ndim):
            sl = [slice(None)] * img.ndim
            for end in (0, -1):
                sl[ax] = end
                border[tuple(sl)] = True
        border_ids = np.unique(comp[border & dark])
        bg = np.isin(comp, border_ids[border_ids > 0])
        labels = np.full(img.shape, 2, dtype=np.uint8)
        labels[dark & ~bg] = 3
        labels[bg] = 0
        mid = ~dark & (img < bright_thr)
        mcomp, _ = ndimage.label(mid)
        touching = np.unique(mcomp[ndimage.binary_dilation(bg) & mid])
        cortex = np.isin(mcomp, touching[touching > 0])
        labels[cortex] = 1
        stray = mid & ~cortex
        labels[stray & (img < inner_thr)] = 3
        out[n] = labels
    return out


# --------------------------------------------------------------------------
# persistence


class DatasetError(Exception):
    code = "dataset-error"


class ManifestError(DatasetError):
    code = "corrupt-manifest"


class VersionError(DatasetError):
    code = "unknown-version"


class BlobSizeError(DatasetError):
    code = "size-mismatch"


class ChecksumError(DatasetError):
    code = "checksum-mismatch"


_BLOB_FILES = {
    "image": ("images.f32", "<f4"),
    "label": ("labels.u8", "|u1"),
    "field": ("fields.f32", "<f4"),
    "template": ("templates.f32", "<f4"),
}


@dataclass
class Dataset:
    """In-memory cohort. ``images`` is ``(N, 1, *S)``, ``labels`` ``(N, *S)``."""

    images: np.ndarray
    labels: np.ndarray | None
    ages: np.ndarray
    sexes: np.ndarray
    seeds: np.ndarray
    ids: list[str]
    spec: dict
    kind: str = "phantom"
    fields: np.ndarray | None = None
    templates: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def blobs(self) -> dict[str, np.ndarray]:
        out = {"image": self.images}
        for name in ("label", "field", "template"):
            arr = getattr(self, {"label": "labels", "field": "fields", "template": "templates"}[name])
            if arr is not None:
                out[name] = arr
        return out

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(
            images=self.images[idx],
            labels=pick(self.labels),
            ages=self.ages[idx],
            sexes=self.sexes[idx],
            seeds=self.seeds[idx],
            ids=[self.ids[i] for i in idx],
            spec=self.spec,
            kind=self.kind,
            fields=pick(self.fields),
            templates=pick(self.templates),
            extra=dict(self.extra),
        )


def make_dataset(
    spec: PhantomSpec,
    n: int,
    seed: int,
    age_range: tuple[float, float] = (5.0, 100.0),
    sex_balance: float = 0.5,
    age_distribution: str = "skewed",
) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= sex_balance <= 1.0:
        raise ValueError("sex_balance must be in [0, 1]")
    ss = np.random.SeedSequence(seed)
    meta_rng = np.random.default_rng(ss.spawn(1)[0])
    ages = sample_ages(meta_rng, n, age_range, age_distribution)
    sexes = (meta_rng.random(n) < sex_balance).astype(np.int64)
    seeds = meta_rng.integers(0, 2**31 - 1, size=n, dtype=np.int64)
    images = np.empty((n, 1) + spec.image_size, dtype=np.float32)
    labels = np.empty((n,) + spec.image_size, dtype=np.uint8)
    for i in range(n):
        images[i], labels[i] = generate_phantom(float(ages[i]), int(sexes[i]), int(seeds[i]), spec)
    return Dataset(
        images=images,
        labels=labels,
        ages=ages.astype(np.float64),
        sexes=sexes,
        seeds=seeds,
        ids=[f"{i:06d}" for i in range(n)],
        spec=spec.to_dict(),
    )


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """Write ``ds`` in the on-disk dataset format; overwrites existing blobs."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = ds.blobs()
    records = [
        {"id": ds.ids[i], "age": float(ds.ages[i]), "sex": int(ds.sexes[i]), "seed": int(ds.seeds[i]), "blobs": {}}
        for i in range(len(ds))
    ]
    blob_meta = {}
    for name, arr in blobs.items():
        fname, dtype = _BLOB_FILES[name]
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
        if arr.shape[0] != len(ds):
            raise ValueError(f"{name} blob has {arr.shape[0]} entries for {len(ds)} records")
        blob_meta[name] = {"file": fname, "dtype": dtype, "shape": list(arr.shape[1:])}
        offset = 0
        with open(path / fname, "wb") as fh:
            for i in range(len(ds)):
                raw = arr[i].tobytes()
                fh.write(raw)
                records[i]["blobs"][name] = {"offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)}
                offset += len(raw)
    spec_blob = json.dumps(ds.spec, sort_keys=True).encode()
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": ds.kind,
        "spec": ds.spec,
        "spec_hash": hashlib.sha256(spec_blob).hexdigest(),
        "region_names": list(REGION_NAMES),
        "n_samples": len(ds),
        "blobs": blob_meta,
        "extra": ds.extra,
        "records": records,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot parse {path / 'manifest.json'}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise ManifestError(f"{path} is not a {FORMAT_NAME} directory")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset version {manifest.get('version')!r}")
    for key in ("records", "blobs", "spec"):
        if key not in manifest:
            raise ManifestError(f"manifest missing {key!r}")
    ids = [r.get("id") for r in manifest["records"]]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate sample ids")
    return manifest


def load_dataset(path: str | Path, verify: bool = True) -> Dataset:
    """Read a dataset directory; raises a :class:`DatasetError` subclass on corruption."""
    path = Path(path)
    manifest = read_manifest(path)
    records = manifest["records"]
    n = len(records)
    arrays = {}
    for name, meta in manifest["blobs"].items():
        if name not in _BLOB_FILES:
            raise ManifestError(f"unknown blob kind {name!r}")
        dtype = np.dtype(meta["dtype"])
        shape = tuple(meta["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize
        blob_path = path / meta["file"]
        if not blob_path.exists():
            raise BlobSizeError(f"missing blob file {blob_path}")
        raw = blob_path.read_bytes()
        if len(raw) != expected * n:
            raise BlobSizeError(f"{blob_path} has {len(raw)} bytes, expected {expected * n}")
        out = np.empty((n,) + shape, dtype=dtype)
        for i, rec in enumerate(records):
            try:
                entry = rec["blobs"][name]
                offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"record {i} lacks {name} blob metadata") from exc
            if nbytes != expected or offset + nbytes > len(raw):
                raise BlobSizeError(f"record {rec.get('id')} {name} blob is size-inconsistent")
            chunk = raw[offset : offset + nbytes]
            if verify and zlib.crc32(chunk) != entry.get("crc32"):
                raise ChecksumError(f"record {rec.get('id')} {name} blob failed its CRC32 check")
            out[i] = np.frombuffer(chunk, dtype=dtype).reshape(shape)
        arrays[name] = out
    if "image" not in arrays:
        raise ManifestError("dataset has no image blob")
    try:
        ages = np.array([float(r["age"]) for r in records], dtype=np.float64)
        sexes = np.array([int(r["sex"]) for r in records], dtype=np.int64)
        seeds = np.array([int(r.get("seed", -1)) for r in records], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed record: {exc}") from exc
    return Dataset(
        images=arrays["image"].astype(np.float32, copy=False),
        labels=arrays.get("label"),
        ages=ages,
        sexes=sexes,
        seeds=seeds,
        ids=[r["id"] for r in records],
        spec=manifest["spec"],
        kind=manifest.get("kind", "phantom"),
        fields=arrays.get("field"),
        templates=arrays.get("template"),
        extra=manifest.get("extra", {}),
    )


def write_dataset(
    spec: PhantomSpec,
    n: int,
    age_range: tuple[float, float],
    sex_balance: float,
    path: str | Path,
    seed: int = 0,
    age_distribution: str = "skewed",
) -> Dataset:
    ds = make_dataset(spec, n, seed, age_range, sex_balance, age_distribution)
    save_dataset(ds, path)
    return ds


read_dataset = load_dataset


# --------------------------------------------------------------------------
# sampling


class AgeBinnedSampler:
    """Draw a decade bin uniformly among the non-empty ones, then a sample
    uniformly inside it. Compensates for skewed age distributions."""

    def __init__(self, ages: Sequence[float], bin_width: float = 10.0, rng: np.random.Generator | None = None):
        ages = np.asarray(ages, dtype=np.float64)
        if ages.size == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.bin_width = float(bin_width)
        self.rng = rng if rng is not None else np.random.default_rng()
        bins = np.floor(ages / self.bin_width).astype(np.int64)
        self.bins = {int(b): np.flatnonzero(bins == b) for b in np.unique(bins)}
        self.bin_ids = sorted(self.bins)
        missing = sorted(set(range(self.bin_ids[0], self.bin_ids[-1] + 1)) - set(self.bin_ids))
        if missing:
            spans = ", ".join(f"[{b * self.bin_width:g}, {(b + 1) * self.bin_width:g})" for b in missing)
            logger.warning("skipping empty age bins %s", spans)

    def draw(self, n: int) -> np.ndarray:
        which = self.rng.integers(0, len(self.bin_ids), size=n)
        out = np.empty(n, dtype=np.int64)
        for i, k in enumerate(which):
            members = self.bins[self.bin_ids[k]]
            out[i] = members[self.rng.integers(0, len(members))]
        return out

    def __iter__(self) -> Iterator[int]:
        while True:
            yield int(self.draw(1)[0])


def age_binned_sampler(ages: Sequence[float], bin_width: float = 10.0, rng: np.random.Generator | None = None):
    return AgeBinnedSampler(ages, bin_width, rng)
