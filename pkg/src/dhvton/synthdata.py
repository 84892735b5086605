"""Procedural paired try-on records and real-data directory ingestion.

A record is a person wearing a textured garment, the flat garment image, the
agnostic mask over the worn garment, the masked person, K keypoint heatmaps
and a P-part one-hot body map.  Everything is a pure function of
``(person_seed, garment_seed, config)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ConfigError, DataError, SeededRng
from .diffusion import Conditions

log = logging.getLogger(__name__)

MASK_FRACTION_RANGE = (0.08, 0.45)
TEXTURE_VARIANCE_FLOOR = 0.02
KEYPOINTS = ("head", "neck", "l_shoulder", "r_shoulder", "l_hand", "r_hand", "l_hip", "r_hip")
PARTS = ("head", "torso", "left_arm", "right_arm", "legs")


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 48
    channels: int = 3
    keypoints: int = 8
    parts: int = 5
    garment_height: int = 64
    garment_width: int = 48

    def __post_init__(self):
        if self.height < 32 or self.width < 24:
            raise ConfigError(f"resolution {self.height}x{self.width} too small to draw a body")


@dataclass
class Sample:
    person: torch.Tensor  # (C, H, W) in [-1, 1]
    garment: torch.Tensor  # (C, Hg, Wg)
    mask: torch.Tensor  # (1, H, W) in {0, 1}
    masked_person: torch.Tensor  # person * (1 - mask)
    pose: torch.Tensor  # (K, H, W)
    densepose: torch.Tensor  # (P, H, W) one-hot, background all-zero
    id: tuple = ()
    warnings: tuple[str, ...] = ()

    def check(self) -> None:
        """Raise ``DataError`` if any record invariant is violated."""
        if not torch.equal(self.masked_person, self.person * (1 - self.mask)):
            raise DataError(f"{self.id}: masked_person != person * (1 - mask)")
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"{self.id}: mask is not binary")
        frac = self.mask.mean().item()
        lo, hi = MASK_FRACTION_RANGE
        if not lo <= frac <= hi:
            raise DataError(f"{self.id}: mask fraction {frac:.3f} outside [{lo}, {hi}]")
        if self.densepose.sum(0).max() > 1:
            raise DataError(f"{self.id}: densepose channels overlap")


# ---------------------------------------------------------------------------
# Rendering helpers (numpy, float64, H x W grids)
# ---------------------------------------------------------------------------


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ys + 0.5, xs + 0.5


def _capsule(ys, xs, p0, p1, radius) -> np.ndarray:
    """Pixels within ``radius`` of segment p0-p1 (points as (y, x))."""
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    L2 = dy * dy + dx * dx
    s = np.clip(((ys - y0) * dy + (xs - x0) * dx) / L2, 0.0, 1.0)
    d2 = (ys - (y0 + s * dy)) ** 2 + (xs - (x0 + s * dx)) ** 2
    return d2 <= radius * radius


def _segment_param(ys, xs, p0, p1) -> np.ndarray:
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    return np.clip(((ys - y0) * dy + (xs - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)


def _rounded_box(ys, xs, top, bottom, left, right, power=4.0) -> np.ndarray:
    cy, cx = (top + bottom) / 2, (left + right) / 2
    ry, rx = (bottom - top) / 2, (right - left) / 2
    return (np.abs((ys - cy) / ry) ** power + np.abs((xs - cx) / rx) ** power) <= 1.0


@dataclass(frozen=True)
class Texture:
    kind: str
    color_a: np.ndarray
    color_b: np.ndarray
    freq: float
    angle: float
    glyphs: np.ndarray  # (n, 4): u, v, half-size, style
    sleeve_frac: float

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """RGB in [0, 1] at garment coordinates ``(u, v)`` in [0, 1]^2."""
        if self.kind == "stripes":
            s = np.cos(self.angle) * u + np.sin(self.angle) * v
            on = np.floor(s * self.freq * 2) % 2 == 0
        elif self.kind == "checker":
            on = (np.floor(u * self.freq) + np.floor(v * self.freq * 1.3)) % 2 == 0
        else:
            on = np.zeros(np.broadcast(u, v).shape, dtype=bool)
            for gu, gv, hs, style in self.glyphs:
                du, dv = np.abs(u - gu), np.abs(v - gv)
                if style < 0.5:  # cross
                    on |= ((du < hs) & (dv < hs * 0.3)) | ((dv < hs) & (du < hs * 0.3))
                else:  # ring
                    r = np.maximum(du, dv)
                    on |= (r < hs) & (r > hs * 0.55)
        return np.where(on[..., None], self.color_a, self.color_b)


def _contrasting_colors(rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    a = rng.uniform((3,), 0.0, 1.0)
    b = rng.uniform((3,), 0.0, 1.0)
    # push the pair apart in luminance so the texture is always visible
    if abs(a.mean() - b.mean()) < 0.45:
        if a.mean() >= b.mean():
            a, b = np.clip(a + 0.35, 0, 1), np.clip(b - 0.35, 0, 1)
        else:
            a, b = np.clip(a - 0.35, 0, 1), np.clip(b + 0.35, 0, 1)
    return a, b


def make_texture(garment_seed: int) -> Texture:
    rng = SeededRng(garment_seed, stream_id=0x6A12)
    kind = ("stripes", "checker", "glyphs")[int(rng.integers(0, 3))]
    a, b = _contrasting_colors(rng)
    freq = float(rng.uniform((1,), 2.0, 5.0)[0])
    angle = float(rng.uniform((1,), 0.0, np.pi)[0])
    n = int(rng.integers(3, 7))
    glyphs = np.column_stack(
        [
            rng.uniform((n,), 0.15, 0.85),
            rng.uniform((n,), 0.15, 0.85),
            rng.uniform((n,), 0.08, 0.16),
            rng.uniform((n,), 0.0, 1.0),
        ]
    )
    sleeve = float(rng.uniform((1,), 0.3, 0.7)[0])
    return Texture(kind, a, b, freq, angle, glyphs, sleeve)


def _to_tensor(img01: np.ndarray) -> torch.Tensor:
    """(H, W, C) in [0, 1] -> (C, H, W) float32 in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(img01.transpose(2, 0, 1) * 2.0 - 1.0)).float()


def render_garment(garment_seed: int, config: SynthConfig = SynthConfig()) -> torch.Tensor:
    """Flat product shot of the garment on a light background."""
    h, w = config.garment_height, config.garment_width
    tex = make_texture(garment_seed)
    ys, xs = _grid(h, w)
    top, bottom = 0.18 * h, 0.92 * h
    left, right = 0.25 * w, 0.75 * w
    img = np.full((h, w, 3), 0.94)
    body = (ys >= top) & (ys <= bottom) & (xs >= left) & (xs <= right)
    u = (xs - left) / (right - left)
    v = (ys - top) / (bottom - top)
    # sleeves hang diagonally from the shoulders
    sl = tex.sleeve_frac * 0.35 * h
    sleeve_l = _capsule(ys, xs, (top + 2, left), (top + 2 + sl, left - 0.18 * w), 0.07 * w + 1)
    sleeve_r = _capsule(ys, xs, (top + 2, right), (top + 2 + sl, right + 0.18 * w), 0.07 * w + 1)
    tl = _segment_param(ys, xs, (top + 2, left), (top + 2 + sl, left - 0.18 * w))
    tr = _segment_param(ys, xs, (top + 2, right), (top + 2 + sl, right + 0.18 * w))
    neck = ((ys - top) ** 2 / (0.06 * h) ** 2 + (xs - w / 2) ** 2 / (0.1 * w) ** 2) <= 1.0
    img = np.where(sleeve_l[..., None], tex(0.1 * tl, 0.1 + 0.2 * tl), img)
    img = np.where(sleeve_r[..., None], tex(1.0 - 0.1 * tr, 0.1 + 0.2 * tr), img)
    img = np.where(body[..., None], tex(u, v), img)
    img = np.where((neck & body)[..., None], 0.94, img)
    return _to_tensor(img)


@dataclass(frozen=True)
class Body:
    cx: float
    shoulder_y: float
    torso_w: float
    torso_h: float
    arm_len: float
    arm_angle_l: float
    arm_angle_r: float
    head_r: float
    skin: np.ndarray
    hair: np.ndarray
    pants: np.ndarray
    background: np.ndarray


def make_body(person_seed: int, config: SynthConfig) -> Body:
    rng = SeededRng(person_seed, stream_id=0xB0D1)
    h, w = config.height, config.width
    u = rng.uniform((8,), 0.0, 1.0)
    skin = np.array([0.55, 0.4, 0.3]) + 0.35 * u[0] * np.array([1.0, 0.95, 0.85])
    return Body(
        cx=w / 2 + (u[1] - 0.5) * 0.12 * w,
        shoulder_y=0.27 * h + (u[2] - 0.5) * 0.06 * h,
        torso_w=0.33 * w + u[3] * 0.08 * w,
        torso_h=0.36 * h + u[4] * 0.06 * h,
        arm_len=0.36 * h,
        arm_angle_l=0.15 + 0.5 * u[5],
        arm_angle_r=0.15 + 0.5 * u[6],
        head_r=0.075 * h + u[7] * 0.01 * h,
        skin=np.clip(skin, 0, 1),
        hair=rng.uniform((3,), 0.05, 0.35),
        pants=rng.uniform((3,), 0.1, 0.6),
        background=rng.uniform((3,), 0.6, 0.95),
    )


def _heatmap(ys, xs, y, x, sigma) -> np.ndarray:
    return np.exp(-((ys - y) ** 2 + (xs - x) ** 2) / (2 * sigma * sigma))


def gen_sample(person_seed: int, garment_seed: int, config: SynthConfig = SynthConfig()) -> Sample:
    """Person ``person_seed`` wearing garment ``garment_seed``."""
    h, w = config.height, config.width
    ys, xs = _grid(h, w)
    b = make_body(person_seed, config)
    tex = make_texture(garment_seed)

    top, bottom = b.shoulder_y, b.shoulder_y + b.torso_h
    left, right = b.cx - b.torso_w / 2, b.cx + b.torso_w / 2
    shoulder_l, shoulder_r = (top + 2, left + 1), (top + 2, right - 1)
    hand_l = (shoulder_l[0] + b.arm_len * np.cos(b.arm_angle_l), shoulder_l[1] - b.arm_len * np.sin(b.arm_angle_l))
    hand_r = (shoulder_r[0] + b.arm_len * np.cos(b.arm_angle_r), shoulder_r[1] + b.arm_len * np.sin(b.arm_angle_r))
    arm_r = 0.045 * w + 1
    head_c = (top - b.head_r - 1.5, b.cx)
    hip_l, hip_r = (bottom, b.cx - b.torso_w / 4), (bottom, b.cx + b.torso_w / 4)

    torso = _rounded_box(ys, xs, top, bottom, left, right)
    arm_l = _capsule(ys, xs, shoulder_l, hand_l, arm_r)
    arm_rm = _capsule(ys, xs, shoulder_r, hand_r, arm_r)
    leg_l = _capsule(ys, xs, hip_l, (h + 4, b.cx - b.torso_w / 3), 0.1 * w)
    leg_r = _capsule(ys, xs, hip_r, (h + 4, b.cx + b.torso_w / 3), 0.1 * w)
    legs = leg_l | leg_r
    neck = _capsule(ys, xs, (head_c[0], b.cx), (top + 1, b.cx), 0.05 * w + 0.5)
    head = ((ys - head_c[0]) ** 2 + (xs - head_c[1]) ** 2) <= b.head_r**2
    hair = head & (ys < head_c[0] - 0.3 * b.head_r)

    # garment coverage: torso plus a sleeve fraction of each arm
    tl = _segment_param(ys, xs, shoulder_l, hand_l)
    tr = _segment_param(ys, xs, shoulder_r, hand_r)
    sleeve_l = arm_l & (tl <= tex.sleeve_frac)
    sleeve_r = arm_rm & (tr <= tex.sleeve_frac)
    neckline = ((ys - top) ** 2 / (0.04 * h) ** 2 + (xs - b.cx) ** 2 / (0.07 * w) ** 2) <= 1.0
    garment_body = torso & ~neckline
    garment = garment_body | sleeve_l | sleeve_r

    img = np.broadcast_to(b.background, (h, w, 3)).copy()
    img = img * (0.92 + 0.08 * (ys / h))[..., None]
    img = np.where(legs[..., None], b.pants, img)
    img = np.where((arm_l | arm_rm | torso | neck)[..., None], b.skin, img)
    u = np.clip((xs - left) / (right - left), 0, 1)
    v = np.clip((ys - top) / (bottom - top), 0, 1)
    img = np.where(garment_body[..., None], tex(u, v), img)
    img = np.where(sleeve_l[..., None], tex(0.1 * tl / tex.sleeve_frac, 0.1 + 0.2 * tl / tex.sleeve_frac), img)
    img = np.where(sleeve_r[..., None], tex(1 - 0.1 * tr / tex.sleeve_frac, 0.1 + 0.2 * tr / tex.sleeve_frac), img)
    img = np.where(head[..., None], b.skin, img)
    img = np.where(hair[..., None], b.hair, img)

    # agnostic mask: garment region grown by one pixel (also hides the neckline)
    grown = garment.copy()
    grown[1:] |= garment[:-1]
    grown[:-1] |= garment[1:]
    grown[:, 1:] |= garment[:, :-1]
    grown[:, :-1] |= garment[:, 1:]
    grown |= torso
    mask = grown.astype(np.float32)

    labels = np.full((h, w), -1, dtype=np.int64)
    labels[legs] = 4
    labels[arm_l] = 2
    labels[arm_rm] = 3
    labels[torso | neck] = 1
    labels[head] = 0
    densepose = np.zeros((config.parts, h, w), dtype=np.float32)
    for p in range(min(config.parts, len(PARTS))):
        densepose[p] = labels == p

    points = [head_c, (top - 0.5, b.cx), shoulder_l, shoulder_r, hand_l, hand_r, hip_l, hip_r]
    pose = np.zeros((config.keypoints, h, w), dtype=np.float32)
    for k, (py, px) in enumerate(points[: config.keypoints]):
        pose[k] = _heatmap(ys, xs, py, px, 1.5)

    person = _to_tensor(img)
    m = torch.from_numpy(mask)[None]
    return Sample(
        person=person,
        garment=render_garment(garment_seed, config),
        mask=m,
        masked_person=person * (1 - m),
        pose=torch.from_numpy(pose),
        densepose=torch.from_numpy(densepose),
        id=(person_seed, garment_seed),
    )


def garment_texture_variance(garment: torch.Tensor, background: float = 0.94 * 2 - 1) -> float:
    """Pixel variance inside the garment silhouette of a flat garment image."""
    inside = (garment - background).abs().amax(dim=0) > 1e-6
    return float(garment[:, inside].var(dim=1, unbiased=False).mean())


# ---------------------------------------------------------------------------
# Splits and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    index: int
    setting: str
    person_seed: int
    garment_seed: int
    cond_garment_seed: int


@dataclass
class Manifest:
    records: list[Record]
    seed: int

    def setting(self, name: str) -> list[Record]:
        return [r for r in self.records if r.setting == name]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls([Record(**json.loads(ln)) for ln in lines], seed=-1)


def derangement(n: int, rng: SeededRng) -> np.ndarray:
    if n < 2:
        raise ConfigError(f"cannot derange {n} item(s)")
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def make_split(n_pairs: int, seed: int) -> Manifest:
    """Paired records ``(p_i, g_i)`` and unpaired records conditioned on ``g_sigma(i)``."""
    rng = SeededRng(seed, stream_id=0x5B117)
    persons = rng.integers(0, 2**31 - 1, n_pairs)
    garments = rng.integers(0, 2**31 - 1, n_pairs)
    sigma = derangement(n_pairs, rng)
    recs = [Record(i, "paired", int(persons[i]), int(garments[i]), int(garments[i])) for i in range(n_pairs)]
    recs += [
        Record(i, "unpaired", int(persons[i]), int(garments[i]), int(garments[sigma[i]]))
        for i in range(n_pairs)
    ]
    return Manifest(recs, seed)


def sample_for_record(rec: Record, config: SynthConfig = SynthConfig()) -> Sample:
    s = gen_sample(rec.person_seed, rec.garment_seed, config)
    if rec.cond_garment_seed != rec.garment_seed:
        s.garment = render_garment(rec.cond_garment_seed, config)
        s.id = (rec.person_seed, rec.cond_garment_seed)
    return s


def collate(samples: Sequence[Sample]) -> tuple[torch.Tensor, Conditions]:
    """Stack samples into ``(x0, Conditions)`` batches."""
    return (
        torch.stack([s.person for s in samples]),
        Conditions(
            masked_person=torch.stack([s.masked_person for s in samples]),
            mask=torch.stack([s.mask for s in samples]),
            garment=torch.stack([s.garment for s in samples]),
            pose=torch.stack([s.pose for s in samples]),
            densepose=torch.stack([s.densepose for s in samples]),
        ),
    )


# ---------------------------------------------------------------------------
# Directory ingestion (VITON-HD style layout)
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm")


@dataclass
class ItemError:
    name: str
    message: str


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("L"), dtype=np.float64)


def _find(folder: Path, stem: str, suffixes: Sequence[str]) -> Path | None:
    for name in (stem, stem + "_mask"):
        for suf in suffixes:
            p = folder / (name + suf)
            if p.exists():
                return p
    return None


def _resize_chw(x: torch.Tensor, h: int, w: int, mode: str) -> torch.Tensor:
    if x.shape[-2:] == (h, w):
        return x
    kw = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(x[None], size=(h, w), mode=mode, **kw)[0]


@dataclass
class DirDataset:
    """Lazily reads ``image/ cloth/ agnostic-mask/ pose/ densepose/`` sharing basenames.

    Unreadable items are recorded in ``errors`` and skipped.  Missing pose or
    densepose maps become zeros and the sample carries a warning.
    """

    root: Path
    config: SynthConfig = SynthConfig()
    errors: list[ItemError] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        img_dir = self.root / "image"
        if not img_dir.is_dir():
            raise DataError(f"{self.root}: missing image/ directory")
        self.stems = sorted(p.stem for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not self.stems:
            raise DataError(f"{self.root}: no images found")

    def __len__(self) -> int:
        return len(self.stems)

    def __iter__(self) -> Iterator[Sample]:
        self.errors = []
        for stem in self.stems:
            try:
                yield self._load(stem)
            except Exception as exc:  # noqa: BLE001 - item-level failure, keep streaming
                log.warning("skipping %s: %s", stem, exc)
                self.errors.append(ItemError(stem, str(exc)))

    def _load(self, stem: str) -> Sample:
        cfg = self.config
        h, w = cfg.height, cfg.width
        warnings = []
        person_p = _find(self.root / "image", stem, IMAGE_SUFFIXES)
        cloth_p = _find(self.root / "cloth", stem, IMAGE_SUFFIXES)
        mask_p = _find(self.root / "agnostic-mask", stem, IMAGE_SUFFIXES)
        if cloth_p is None or mask_p is None:
            raise DataError(f"{stem}: missing cloth or agnostic-mask file")
        person = _resize_chw(_to_tensor(_read_image(person_p)), h, w, "bilinear").clamp(-1, 1)
        garment = _resize_chw(
            _to_tensor(_read_image(cloth_p)), cfg.garment_height, cfg.garment_width, "bilinear"
        ).clamp(-1, 1)
        mask = torch.from_numpy((_read_gray(mask_p) > 127.5).astype(np.float32))[None]
        mask = _resize_chw(mask, h, w, "nearest")

        pose_p = _find(self.root / "pose", stem, (".npy",))
        if pose_p is None:
            pose = torch.zeros(cfg.keypoints, h, w)
            warnings.append("pose missing, zero-filled")
        else:
            arr = torch.from_numpy(np.load(pose_p).astype(np.float32))
            if arr.dim() != 3 or arr.shape[0] != cfg.keypoints:
                raise DataError(f"{stem}: pose array shape {tuple(arr.shape)}, expected ({cfg.keypoints}, H, W)")
            pose = _resize_chw(arr, h, w, "bilinear")

        dp_p = _find(self.root / "densepose", stem, (".npy",) + IMAGE_SUFFIXES)
        if dp_p is None:
            densepose = torch.zeros(cfg.parts, h, w)
            warnings.append("densepose missing, zero-filled")
        else:
            labels = np.load(dp_p) if dp_p.suffix == ".npy" else _read_gray(dp_p)
            labels = torch.from_numpy(np.rint(labels).astype(np.int64))
            if labels.dim() != 2:
                raise DataError(f"{stem}: densepose must be a 2-D label map (0 = background)")
            labels = _resize_chw(labels[None].float(), h, w, "nearest")[0].long()
            densepose = torch.stack([(labels == p + 1).float() for p in range(cfg.parts)])

        sample = Sample(
            person=person,
            garment=garment,
            mask=mask,
            masked_person=person * (1 - mask),
            pose=pose,
            densepose=densepose,
            id=(stem,),
            warnings=tuple(warnings),
        )
        sample.check()
        return sample


def load_dir(path: str | Path, config: SynthConfig = SynthConfig()) -> DirDataset:
    return DirDataset(Path(path), config)
