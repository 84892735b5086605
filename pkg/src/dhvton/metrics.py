"""SSIM, FID, KID, a feature-space LPIPS proxy, and the paired/unpaired evaluation driver.

FID/KID features come from this package's own garment tokenizer (thumbnail
pathway, fixed seeded weights), not from Inception, so values are only
comparable between runs of this package.  KID is reported unscaled.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .core import ConfigError, DataError, DimensionError, SeededRng
from .diffusion import NoiseSchedule, sample_loop
from .garment import EncoderConfig, TiledPatchEncoder
from .synthdata import Record, Sample, SynthConfig, collate, sample_for_record

log = logging.getLogger(__name__)

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA, SSIM_WIN = 1.5, 11


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _to01(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _blur(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # half-sample symmetric padding at the borders
    return correlate1d(correlate1d(x, w, axis=-1, mode="reflect"), w, axis=-2, mode="reflect")


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM of images in [-1, 1]; inputs ``(..., H, W)``, same shape out."""
    x, y = _to01(a), _to01(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    w = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _blur(x, w), _blur(y, w)
    sxx = _blur(x * x, w) - mx * mx
    syy = _blur(y * y, w) - my * my
    sxy = _blur(x * y, w) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, mask=None) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1).

    Inputs are in [-1, 1] and remapped to [0, 1].  With ``mask`` (broadcastable
    to the images) the mean is taken over masked pixels only.
    """
    m = ssim_map(a, b)
    if mask is None:
        return float(m.mean())
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    sel = np.broadcast_to(np.asarray(mask) > 0.5, m.shape)
    if not sel.any():
        raise DataError("ssim mask selects no pixels")
    return float(m[sel].mean())


# ---------------------------------------------------------------------------
# FID / KID
# ---------------------------------------------------------------------------


def _as_f64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid_from_moments(mu_a, cov_a, mu_b, cov_b, neg_tol: float = 1e-6) -> float:
    """Frechet distance between Gaussians.

    ``Tr((S_a S_b)^{1/2})`` is computed from the eigenvalues of the symmetric
    PSD matrix ``S_a^{1/2} S_b S_a^{1/2}``; eigenvalues below ``-neg_tol`` are an
    error, smaller negatives are clamped to zero.
    """
    mu_a, mu_b = _as_f64(mu_a), _as_f64(mu_b)
    cov_a, cov_b = np.atleast_2d(_as_f64(cov_a)), np.atleast_2d(_as_f64(cov_b))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise DataError("non-finite covariance")
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -neg_tol:
        raise DataError(f"covariance product has eigenvalue {vals.min():.3e} < -{neg_tol}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(feats_a, feats_b) -> float:
    a, b = _as_f64(feats_a), _as_f64(feats_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature shapes {a.shape} and {b.shape} incompatible")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConfigError("fid needs at least 2 samples per set")
    return fid_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid(feats_a, feats_b, subset_size: int = 10, n_subsets: int = 100, rng: SeededRng | None = None) -> float:
    """Unbiased polynomial-kernel MMD^2 averaged over random subsets."""
    a, b = _as_f64(feats_a), _as_f64(feats_b)
    if subset_size < 2 or subset_size > min(len(a), len(b)):
        raise ConfigError(f"subset_size {subset_size} must be in [2, {min(len(a), len(b))}]")
    rng = rng or SeededRng(0, stream_id=0x1D)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(len(a), subset_size)
        ib = rng.choice(len(b), subset_size)
        vals.append(mmd2_unbiased(a[ia], b[ib]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Feature extractor and LPIPS proxy
# ---------------------------------------------------------------------------


def metric_encoder(seed: int = 1234) -> TiledPatchEncoder:
    """Fixed, seeded feature network used by FID/KID/LPIPS-proxy."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = TiledPatchEncoder(EncoderConfig(tile_px=32, patch_px=4, dim=64, hidden=128))
    enc.requires_grad_(False)
    return enc.double().eval()


def _layers(encoder, img: torch.Tensor) -> list[torch.Tensor]:
    feats = getattr(encoder, "features", None)
    if feats is None:
        raise ConfigError("lpips_proxy needs an encoder exposing intermediate features")
    dtype = next(encoder.parameters()).dtype if isinstance(encoder, torch.nn.Module) else img.dtype
    layers = feats(img.to(dtype))
    if len(layers) < 2:
        raise ConfigError(f"lpips_proxy needs >= 2 feature layers, encoder gives {len(layers)}")
    return layers


@torch.no_grad()
def lpips_proxy(a: torch.Tensor, b: torch.Tensor, encoder=None) -> float:
    """Mean over layers of the mean squared distance between channel-normalised features."""
    encoder = encoder or metric_encoder()
    if a.shape != b.shape:
        raise DimensionError(f"lpips_proxy shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    dists = []
    for fa, fb in zip(_layers(encoder, a), _layers(encoder, b)):
        na = fa / (fa.norm(dim=-1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=-1, keepdim=True) + 1e-10)
        dists.append(((na - nb) ** 2).sum(-1).mean().item())
    return float(np.mean(dists))


@torch.no_grad()
def image_features(images: torch.Tensor, encoder=None) -> np.ndarray:
    encoder = encoder or metric_encoder()
    return encoder.pooled(images.to(next(encoder.parameters()).dtype)).double().cpu().numpy()


def mask_box(mask: torch.Tensor) -> tuple[int, int, int, int]:
    """Bounding box ``(y0, x0, y1, x1)`` of a ``(1, H, W)`` mask."""
    ys, xs = torch.nonzero(mask[0] > 0.5, as_tuple=True)
    if len(ys) == 0:
        raise DataError("empty mask")
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def garment_box_lpips(gen: torch.Tensor, gt: torch.Tensor, masks: torch.Tensor, encoder=None) -> float:
    """LPIPS proxy restricted to each image's mask bounding box, averaged."""
    encoder = encoder or metric_encoder()
    vals = []
    for g, r, m in zip(gen, gt, masks):
        y0, x0, y1, x1 = mask_box(m)
        vals.append(lpips_proxy(g[:, y0:y1, x0:x1], r[:, y0:y1, x0:x1], encoder))
    return float(np.mean(vals))


def masked_ssim(gen: torch.Tensor, gt: torch.Tensor, masks: torch.Tensor) -> float:
    """SSIM averaged over masked pixels, per image, then over the batch."""
    return float(np.mean([ssim(g, r, m) for g, r, m in zip(gen, gt, masks)]))


@dataclass
class FidelityScore:
    masked_ssim: float
    box_lpips: float


def fidelity(model: "TryOnModel", samples: Sequence[Sample], seed: int = 0, encoder=None) -> FidelityScore:
    """Masked-region SSIM and garment-box LPIPS proxy of paired try-ons."""
    gen = model.generate(samples, SeededRng(seed, stream_id=0xF1D0))
    x0, conds = collate(list(samples))
    return FidelityScore(masked_ssim(gen, x0, conds.mask), garment_box_lpips(gen, x0, conds.mask, encoder))


# ---------------------------------------------------------------------------
# Reports and evaluation
# ---------------------------------------------------------------------------

KID_SCALE_NOTE = "KID reported unscaled (not x100); FID/KID features from the package tokenizer, not Inception"


@dataclass
class MetricReport:
    setting: str
    n_images: int
    fid: float
    kid: float
    ssim: float | None = None
    lpips_proxy: float | None = None
    skipped: int = 0

    def __post_init__(self):
        if self.setting not in ("paired", "unpaired"):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.setting == "unpaired" and (self.ssim is not None or self.lpips_proxy is not None):
            raise ConfigError("unpaired reports carry only fid and kid")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.setting == "unpaired":
            d.pop("ssim")
            d.pop("lpips_proxy")
        d["note"] = KID_SCALE_NOTE
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fmt(v: float | None, digits: int) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def format_table(rows: Sequence[tuple[str, MetricReport | None, MetricReport | None]], label: str = "run") -> str:
    """Aligned text table: SSIM FID KID LPIPS (paired) | FID KID (unpaired)."""
    header = [label, "SSIM↑", "FID↓", "KID↓", "LPIPS↓", "|", "FID↓", "KID↓"]
    body = []
    for name, p, u in rows:
        body.append(
            [
                name,
                _fmt(p and p.ssim, 3),
                _fmt(p and p.fid, 3),
                _fmt(p and p.kid, 4),
                _fmt(p and p.lpips_proxy, 4),
                "|",
                _fmt(u and u.fid, 3),
                _fmt(u and u.kid, 4),
            ]
        )
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    lines.append(f"# {KID_SCALE_NOTE}")
    return "\n".join(lines)


class TryOnModel(Protocol):
    def generate(self, samples: Sequence[Sample], rng: SeededRng) -> torch.Tensor: ...


class OracleTryOn:
    """Returns the ground-truth person; useful to pin metric identities."""

    def generate(self, samples: Sequence[Sample], rng: SeededRng) -> torch.Tensor:
        return torch.stack([s.person for s in samples])


class DiffusionTryOn:
    """Ancestral sampling with a denoiser, one RNG stream per record."""

    def __init__(self, model, sched: NoiseSchedule, batch_size: int = 20):
        self.model = model
        self.sched = sched
        self.batch_size = batch_size

    def generate(self, samples: Sequence[Sample], rng: SeededRng) -> torch.Tensor:
        outs = []
        was_training = getattr(self.model, "training", False)
        if hasattr(self.model, "eval"):
            self.model.eval()
        try:
            for i in range(0, len(samples), self.batch_size):
                chunk = samples[i : i + self.batch_size]
                _, conds = collate(chunk)
                outs.append(sample_loop(self.model, conds, self.sched, rng.child(i)))
        finally:
            if was_training:
                self.model.train()
        return torch.cat(outs)


def evaluate(
    records: Sequence[Record],
    model: TryOnModel,
    setting: str,
    config: SynthConfig = SynthConfig(),
    seed: int = 0,
    kid_subset: int = 10,
    kid_subsets: int = 50,
    encoder=None,
) -> MetricReport:
    """Generate a try-on image per record and score it against the real persons."""
    if setting not in ("paired", "unpaired"):
        raise ConfigError(f"unknown setting {setting!r}")
    recs = [r for r in records if r.setting == setting]
    if len(recs) < 2:
        raise ConfigError(f"need >= 2 {setting} records, got {len(recs)}")
    encoder = encoder or metric_encoder()
    rng = SeededRng(seed, stream_id=0xE7A1)
    samples = [sample_for_record(r, config) for r in recs]
    gen, kept, skipped = [], [], 0
    try:
        gen = [model.generate(samples, rng)]
        kept = samples
    except Exception as exc:  # noqa: BLE001 - retry item by item, count failures
        log.warning("batch generation failed (%s); retrying per item", exc)
        for k, s in enumerate(samples):
            try:
                gen.append(model.generate([s], rng.child(10_000 + k)))
                kept.append(s)
            except Exception as item_exc:  # noqa: BLE001
                log.warning("record %s skipped: %s", s.id, item_exc)
                skipped += 1
    if len(kept) < 2:
        raise DataError(f"only {len(kept)} records generated successfully")
    images = torch.cat(gen)
    real = torch.stack([s.person for s in kept])
    fg, fr = image_features(images, encoder), image_features(real, encoder)
    subset = min(kid_subset, len(kept))
    report = dict(
        setting=setting,
        n_images=len(kept),
        fid=fid(fg, fr),
        kid=kid(fg, fr, subset, kid_subsets, SeededRng(seed, stream_id=0x4B1D)),
        skipped=skipped,
    )
    if setting == "paired":
        report["ssim"] = float(np.mean([ssim(g, r) for g, r in zip(images, real)]))
        report["lpips_proxy"] = float(np.mean([lpips_proxy(g, r, encoder) for g, r in zip(images, real)]))
    return MetricReport(**report)
