"""Cohort metrics: diversity (MS-SSIM), attribute adherence, regional-volume
effect sizes and a Fréchet distance over attribute-predictor features."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.optimize import linear_sum_assignment

from .phantoms import REGION_NAMES, Dataset, segment_by_intensity

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRIC_NAMES = ("sex_acc", "age_mae", "fd_phantom", "ms_ssim")

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# MS-SSIM


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    """Separable valid-mode Gaussian filter over every spatial axis."""
    nd = x.dim() - 2
    conv = F.conv2d if nd == 2 else F.conv3d
    ch = x.shape[1]
    for axis in range(nd):
        shape = [1] * nd
        shape[axis] = len(win)
        x = conv(x, win.view(1, 1, *shape).expand(ch, 1, *shape), groups=ch)
    return x


def _ssim_terms(a, b, win, data_range, k1=0.01, k2=0.03):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    s_aa = _blur(a * a, win) - mu_a**2
    s_bb = _blur(b * b, win) - mu_b**2
    s_ab = _blur(a * b, win) - mu_a * mu_b
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5):
    """Single-scale SSIM per batch element (Gaussian window, valid region)."""
    win = _gaussian_window(win_size, sigma, torch.float64)
    return _ssim_terms(a.double(), b.double(), win, data_range)[0]


def ms_ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    scales: int = 3,
    data_range: float = 1.0,
    win_size: int = 11,
    sigma: float = 1.5,
) -> torch.Tensor:
    """Multi-scale SSIM per batch element for ``(B, C, *S)`` inputs.

    Uses the first ``scales`` of the standard five scale weights, renormalized.
    Negative contrast-structure terms are clipped at zero so the result lies
    in ``[0, 1]``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    min_size = (win_size - 1) * 2 ** (scales - 1)
    if min(a.shape[2:]) <= min_size:
        raise ValueError(f"images of size {tuple(a.shape[2:])} too small for {scales} scales (need > {min_size})")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    win = _gaussian_window(win_size, sigma, torch.float64)
    a, b = a.double(), b.double()
    pool = F.avg_pool2d if a.dim() == 4 else F.avg_pool3d
    values = []
    for j in range(scales):
        full, cs = _ssim_terms(a, b, win, data_range)
        values.append(torch.relu(full if j == scales - 1 else cs))
        if j < scales - 1:
            a, b = pool(a, 2), pool(b, 2)
    stacked = torch.stack(values, dim=1)
    return torch.prod(stacked ** weights.view(1, -1), dim=1)


def distinct_pairs(n: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """``n_pairs`` distinct unordered index pairs drawn without replacement."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    i, j = np.triu_indices(n, k=1)
    pick = rng.choice(len(i), size=min(n_pairs, len(i)), replace=False)
    return np.stack([i[pick], j[pick]], axis=1)


def ms_ssim_pairs(images: np.ndarray, n_pairs: int, rng: np.random.Generator, scales: int = 3, batch: int = 250) -> float:
    """Mean MS-SSIM over random distinct pairs of a cohort (lower = more diverse)."""
    pairs = distinct_pairs(len(images), n_pairs, rng)
    imgs = torch.from_numpy(np.ascontiguousarray(images))
    vals = []
    for k in range(0, len(pairs), batch):
        p = pairs[k : k + batch]
        vals.append(ms_ssim(imgs[p[:, 0]], imgs[p[:, 1]], scales=scales))
    return float(torch.cat(vals).mean())


# --------------------------------------------------------------------------
# attribute adherence


def attribute_adherence(pred_age, pred_logit, ages, sexes) -> tuple[float, float]:
    """``(age MAE in years, sex accuracy at logit threshold 0)``."""
    pred_age, pred_logit = np.asarray(pred_age, float), np.asarray(pred_logit, float)
    ages, sexes = np.asarray(ages, float), np.asarray(sexes)
    if not (len(pred_age) == len(pred_logit) == len(ages) == len(sexes)):
        raise ValueError("predictions and conditions must have equal counts")
    mae = float(np.abs(pred_age - ages).mean())
    acc = float(((pred_logit > 0).astype(int) == sexes).mean())
    return mae, acc


def decade_bins(ages, bin_width: float = 10.0, max_age: float = 100.0) -> np.ndarray:
    """Bin start per age; ``max_age`` itself falls in the last bin."""
    bins = np.floor(np.asarray(ages, float) / bin_width) * bin_width
    return np.minimum(bins, math.ceil(max_age / bin_width) * bin_width - bin_width).astype(int)


def per_decade_mae(pred_age, ages, bin_width: float = 10.0, max_age: float = 100.0,
                   bin_ages=None) -> dict[int, tuple[int, float]]:
    """``{decade_start: (count, MAE)}``. Samples are binned by ``bin_ages``
    (default: the true ages); ``max_age`` itself falls in the last bin."""
    pred_age, ages = np.asarray(pred_age, float), np.asarray(ages, float)
    bins = decade_bins(ages if bin_ages is None else bin_ages, bin_width, max_age)
    err = np.abs(pred_age - ages)
    return {int(b): (int((bins == b).sum()), float(err[bins == b].mean())) for b in np.unique(bins)}


# --------------------------------------------------------------------------
# morphometry


def regional_volumes(labels: np.ndarray, num_regions: int = len(REGION_NAMES)) -> np.ndarray:
    """Exact voxel count per region id of one label map."""
    return np.bincount(np.asarray(labels).ravel(), minlength=num_regions)[:num_regions]


def cohort_volumes(labels: np.ndarray, num_regions: int = len(REGION_NAMES)) -> np.ndarray:
    """``(N, *S)`` label maps to an ``(N, R)`` table of voxel counts."""
    return np.stack([regional_volumes(lab, num_regions) for lab in labels])


def cohens_d(pop_a, pop_b) -> float:
    """Absolute Cohen's d with the pooled (n - 1)-weighted standard deviation."""
    a, b = np.asarray(pop_a, dtype=np.float64), np.asarray(pop_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each population needs at least 2 samples")
    na, nb = len(a), len(b)
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    if pooled == 0:
        raise ValueError("pooled standard deviation is zero (degenerate populations)")
    return abs(a.mean() - b.mean()) / pooled


# --------------------------------------------------------------------------
# Fréchet distance


def _psd_sqrt(mat: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    scale = max(1.0, float(np.abs(vals).max()))
    if vals.min() < -1e-6 * scale:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.maximum(vals, floor))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max()))
    if vals.min() < -1e-6 * scale:
        raise ValueError("product covariance is not positive semi-definite")
    tr_sqrt = np.sqrt(np.maximum(vals, 1e-10)).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt)


def fd_phantom(real_features: np.ndarray, synth_features: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets ("FD-phantom")."""
    r = np.asarray(real_features, dtype=np.float64)
    s = np.asarray(synth_features, dtype=np.float64)
    dim = r.shape[1]
    if len(r) < dim + 1 or len(s) < dim + 1:
        raise ValueError(f"need at least {dim + 1} samples per set for {dim}-d features")
    cov = lambda f: np.atleast_2d(np.cov(f, rowvar=False))  # noqa: E731
    d = frechet_distance(r.mean(0), cov(r), s.mean(0), cov(s))
    return max(d, 0.0)


# --------------------------------------------------------------------------
# cohort evaluation


def match_real_cohort(real_ages, real_sexes, ages, sexes) -> np.ndarray:
    """For every synthetic condition, a same-sex real sample of closest age,
    without replacement (minimum total age difference per sex).

    If the pool holds fewer samples of a sex than requested, every real
    sample is used once and the leftover conditions take their nearest-age
    match with replacement.
    """
    real_ages, real_sexes = np.asarray(real_ages, float), np.asarray(real_sexes)
    ages, sexes = np.asarray(ages, float), np.asarray(sexes)
    out = np.empty(len(ages), dtype=np.int64)
    for sex in np.unique(sexes):
        want = np.flatnonzero(sexes == sex)
        pool = np.flatnonzero(real_sexes == sex)
        if len(pool) == 0:
            raise ValueError(f"real pool has no samples of sex {sex}")
        cost = np.abs(ages[want, None] - real_ages[None, pool])
        rows, cols = linear_sum_assignment(cost)
        out[want[rows]] = pool[cols]
        if len(rows) < len(want):
            logger.warning("real pool has %d samples of sex %d for %d conditions; reusing %d",
                           len(pool), sex, len(want), len(want) - len(rows))
            left = np.setdiff1d(np.arange(len(want)), rows)
            out[want[left]] = pool[cost[left].argmin(axis=1)]
    return out


@dataclass
class RegionRow:
    region: str
    real_mean: float
    real_std: float
    synth_mean: float
    synth_std: float
    cohens_d: float


@dataclass
class CohortReport:
    metrics: dict[str, float]
    real_reference: dict[str, float]
    regions: list[RegionRow]
    decades: list[dict]
    counts: dict[str, int]
    segmentation: str
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metrics": self.metrics,
            "real_reference": self.real_reference,
            "counts": self.counts,
            "segmentation": self.segmentation,
            "config_fingerprint": self.config_fingerprint,
            "extra": self.extra,
        }

    def region_d(self, name: str) -> float:
        return next(r.cohens_d for r in self.regions if r.region == name)


def cohort_labels(ds: Dataset, intensities) -> tuple[np.ndarray, str]:
    if ds.labels is not None:
        return ds.labels, "warped-template" if ds.kind == "synthetic" else "ground-truth"
    return segment_by_intensity(ds.images, intensities), "intensity-bands"


def _safe_d(a, b) -> float:
    try:
        return cohens_d(a, b)
    except ValueError:
        return float("nan")


def region_table(real_vol: np.ndarray, synth_vol: np.ndarray) -> list[RegionRow]:
    rows = []
    for r, name in enumerate(REGION_NAMES):
        if r == 0:
            continue
        a, b = real_vol[:, r].astype(float), synth_vol[:, r].astype(float)
        rows.append(RegionRow(name, a.mean(), a.std(ddof=1), b.mean(), b.std(ddof=1), _safe_d(a, b)))
    return rows


def evaluate_cohorts(real_pool: Dataset, synth: Dataset, predictor, n_pairs: int = 1000, seed: int = 0,
                     scales: int = 3) -> tuple[CohortReport, np.ndarray]:
    """Evaluate a synthetic cohort against an age/sex-matched real cohort.

    Returns the report and the indices of the matched real samples.
    """
    from .pipelines import numpy_rng, predict_attributes

    match = match_real_cohort(real_pool.ages, real_pool.sexes, synth.ages, synth.sexes)
    real = real_pool.subset(match)
    intensities = tuple(real_pool.spec.get("intensities", (0.0, 0.45, 0.8, 0.15)))

    s_age, s_logit, s_feat = predict_attributes(predictor, synth.images)
    r_age, r_logit, r_feat = predict_attributes(predictor, real.images)
    s_mae, s_acc = attribute_adherence(s_age, s_logit, synth.ages, synth.sexes)
    r_mae, r_acc = attribute_adherence(r_age, r_logit, real.ages, real.sexes)

    s_ms = ms_ssim_pairs(synth.images, n_pairs, numpy_rng(seed, "ms-ssim-synthetic"), scales)
    r_ms = ms_ssim_pairs(real.images, n_pairs, numpy_rng(seed, "ms-ssim-real"), scales)
    fd = fd_phantom(r_feat, s_feat)

    s_labels, seg = cohort_labels(synth, intensities)
    r_labels, _ = cohort_labels(real, intensities)
    regions = region_table(cohort_volumes(r_labels), cohort_volumes(s_labels))

    s_dec = per_decade_mae(s_age, synth.ages)
    # matched real samples are grouped under their synthetic partner's decade
    r_dec = per_decade_mae(r_age, real.ages, bin_ages=synth.ages)
    decades = [
        {"decade_start": d, "decade_end": d + 10, "n": s_dec[d][0], "synthetic_mae": s_dec[d][1],
         "real_mae": r_dec[d][1]}
        for d in sorted(s_dec)
    ]
    report = CohortReport(
        metrics={"sex_acc": s_acc, "age_mae": s_mae, "fd_phantom": fd, "ms_ssim": s_ms},
        real_reference={"sex_acc": r_acc, "age_mae": r_mae, "ms_ssim": r_ms},
        regions=regions,
        decades=decades,
        counts={"synthetic": len(synth), "real": len(real), "real_unique": int(len(np.unique(match))),
                "pairs": min(n_pairs, len(synth) * (len(synth) - 1) // 2)},
        segmentation=seg,
        extra=dict(synth.extra),
    )
    return report, match


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def montage(rows: list[np.ndarray], path: Path, upscale: int = 2) -> None:
    """Save a grid of 2D images (central slice for 3D) as an 8-bit PNG."""
    strips = []
    for row in rows:
        tiles = []
        for img in row:
            img = np.asarray(img)
            while img.ndim > 2:
                img = img[img.shape[0] // 2] if img.shape[0] > 1 else img[0]
            tiles.append(np.pad(np.clip(img, 0, 1), 1))
        strips.append(np.concatenate(tiles, axis=1))
    grid = (np.concatenate(strips, axis=0) * 255).round().astype(np.uint8)
    im = Image.fromarray(grid, mode="L")
    im = im.resize((grid.shape[1] * upscale, grid.shape[0] * upscale), Image.NEAREST)
    im.save(path, format="PNG")


def write_report(report: CohortReport, out: str | Path, real: Dataset | None = None,
                 synth: Dataset | None = None) -> list[Path]:
    """Write report.json, regions.csv, decade_mae.csv and montage.png."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(out / "report.json")
    with open(out / "regions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "real_mean", "real_std", "synth_mean", "synth_std", "cohens_d"])
        for r in report.regions:
            w.writerow([_fmt(v) for v in asdict(r).values()])
    written.append(out / "regions.csv")
    with open(out / "decade_mae.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["decade_start", "decade_end", "n", "synthetic_mae", "real_mae"])
        w.writeheader()
        for row in report.decades:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    written.append(out / "decade_mae.csv")
    if real is not None and synth is not None:
        decades = decade_bins(synth.ages)
        picks = [int(np.flatnonzero(decades == d)[0]) for d in np.unique(decades)]
        montage([synth.images[picks, 0], real.images[picks, 0]], out / "montage.png")
        written.append(out / "montage.png")
    return written
