"""Dynamic high-resolution garment encoder.

An image is matched to the tile grid whose aspect ratio is closest to its
own, resized to exactly fill that grid, cut into square tiles, and a
thumbnail of the whole image is appended.  Each crop is patchified and run
through a small tokenizer (a stand-in for a large pretrained ViT).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Protocol

import torch
import torch.nn.functional as F
from torch import nn

from .attention import TokenOrigin, TokenSeq
from .core import ConfigError

__all__ = [
    "TileGrid",
    "candidate_grids",
    "select_grid",
    "resize",
    "tile_image",
    "GarmentTokens",
    "EncoderConfig",
    "TiledPatchEncoder",
    "ThumbnailPatchEncoder",
    "FeatureExtractor",
    "EXTRACTORS",
    "build_extractor",
]


@dataclass(frozen=True)
class TileGrid:
    cols: int
    rows: int
    tile_px: int

    @property
    def n_tiles(self) -> int:
        return self.cols * self.rows

    @property
    def resized_w(self) -> int:
        return self.cols * self.tile_px

    @property
    def resized_h(self) -> int:
        return self.rows * self.tile_px

    def describe(self) -> str:
        return (
            f"grid {self.cols}x{self.rows}, resized {self.resized_w}x{self.resized_h}, "
            f"{self.n_tiles} tiles + thumbnail"
        )


def candidate_grids(max_tiles: int) -> list[tuple[int, int]]:
    """All (cols, rows) with 1 <= cols*rows <= max_tiles, by area then cols."""
    grids = [
        (c, r) for c in range(1, max_tiles + 1) for r in range(1, max_tiles + 1) if c * r <= max_tiles
    ]
    return sorted(grids, key=lambda g: (g[0] * g[1], g[0]))


def select_grid(w: int, h: int, tile_px: int = 448, max_tiles: int = 6) -> TileGrid:
    """Grid whose cols/rows ratio is nearest ``w/h``.

    Candidates are visited in increasing area.  On an exact tie in ratio
    distance the later (larger) grid wins only if the image area exceeds half
    of that grid's pixel area.  Ratios are compared exactly.
    """
    if w < 1 or h < 1 or max_tiles < 1 or tile_px < 1:
        raise ConfigError(f"invalid grid request w={w} h={h} tile_px={tile_px} max_tiles={max_tiles}")
    aspect = Fraction(w, h)
    area = w * h
    best, best_diff = None, None
    for cols, rows in candidate_grids(max_tiles):
        diff = abs(aspect - Fraction(cols, rows))
        if best_diff is None or diff < best_diff:
            best, best_diff = (cols, rows), diff
        elif diff == best_diff and 2 * area > tile_px * tile_px * cols * rows:
            best = (cols, rows)
    return TileGrid(cols=best[0], rows=best[1], tile_px=tile_px)


def resize(img: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of ``(C, H, W)`` or ``(B, C, H, W)``; identity if already sized."""
    if img.shape[-2:] == (height, width):
        return img
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    out = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return out if batched else out.squeeze(0)


def tile_image(img: torch.Tensor, grid: TileGrid) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Row-major tiles of the grid-resized image plus a tile-sized thumbnail."""
    if img.shape[-1] < 1 or img.shape[-2] < 1:
        raise ConfigError(f"image has empty spatial dims {tuple(img.shape)}")
    big = resize(img, grid.resized_h, grid.resized_w)
    tp = grid.tile_px
    tiles = [
        big[..., r * tp : (r + 1) * tp, c * tp : (c + 1) * tp]
        for r in range(grid.rows)
        for c in range(grid.cols)
    ]
    thumb = resize(img, tp, tp)
    return tiles, thumb


@dataclass
class GarmentTokens:
    """Fine-grained garment token sequence: tile tokens first, then thumbnail tokens."""

    tile_tokens: torch.Tensor  # (B, n_t, c)
    thumb_tokens: torch.Tensor  # (B, n_th, c)
    provenance: list[tuple[int, int, int]] = field(default_factory=list)
    grid: TileGrid | None = None
    patch_px: int = 0

    @property
    def combined(self) -> torch.Tensor:
        return torch.cat([self.tile_tokens, self.thumb_tokens], dim=-2)

    def as_seq(self) -> TokenSeq:
        return TokenSeq(self.combined, TokenOrigin.GARMENT)

    def pixel_region(self, k: int) -> tuple[int, int, int, int]:
        """``(y0, x0, y1, x1)`` in the grid-resized image covered by tile token ``k``."""
        tile, row, col = self.provenance[k]
        tp, pp = self.grid.tile_px, self.patch_px
        ty, tx = divmod(tile, self.grid.cols)
        y0, x0 = ty * tp + row * pp, tx * tp + col * pp
        return (y0, x0, y0 + pp, x0 + pp)


@dataclass
class EncoderConfig:
    in_channels: int = 3
    tile_px: int = 16
    patch_px: int = 4
    max_tiles: int = 6
    dim: int = 64
    hidden: int = 128

    def __post_init__(self):
        if self.tile_px % self.patch_px:
            raise ConfigError(f"patch_px {self.patch_px} does not divide tile_px {self.tile_px}")

    @property
    def patches_per_tile(self) -> int:
        return (self.tile_px // self.patch_px) ** 2


class FeatureExtractor(Protocol):
    """Anything that turns garment images into garment tokens."""

    config: EncoderConfig

    def encode(self, img: torch.Tensor) -> GarmentTokens: ...

    def features(self, img: torch.Tensor) -> list[torch.Tensor]: ...


def _patchify(crops: torch.Tensor, pp: int) -> torch.Tensor:
    """``(..., C, tp, tp)`` -> ``(..., (tp/pp)**2, C*pp*pp)``, row-major patches."""
    *lead, c, tp, _ = crops.shape
    g = tp // pp
    x = crops.reshape(*lead, c, g, pp, g, pp)
    n = len(lead)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, g * g, c * pp * pp)


class TiledPatchEncoder(nn.Module):
    """Toy tokenizer: patch projection, 2-layer MLP, plus patch-position and tile embeddings.

    Tile-index embedding ``max_tiles`` is reserved for the thumbnail.
    """

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        patch_dim = cfg.in_channels * cfg.patch_px**2
        self.proj = nn.Linear(patch_dim, cfg.dim)
        self.fc1 = nn.Linear(cfg.dim, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.dim)
        self.pos_embed = nn.Parameter(torch.randn(cfg.patches_per_tile, cfg.dim) * 0.02)
        self.tile_embed = nn.Parameter(torch.randn(cfg.max_tiles + 1, cfg.dim) * 0.02)

    @property
    def dim(self) -> int:
        return self.config.dim

    def _layers(self, crops: torch.Tensor) -> list[torch.Tensor]:
        p = _patchify(crops, self.config.patch_px)
        h0 = self.proj(p)
        h1 = F.gelu(self.fc1(h0))
        return [h0, h1, self.fc2(h1)]

    def _tokens(self, crops: torch.Tensor, tile_index: torch.Tensor) -> torch.Tensor:
        return self._layers(crops)[-1] + self.pos_embed + self.tile_embed[tile_index][..., None, :]

    def encode(self, img: torch.Tensor) -> GarmentTokens:
        cfg = self.config
        if img.dim() == 3:
            img = img.unsqueeze(0)
        grid = select_grid(img.shape[-1], img.shape[-2], cfg.tile_px, cfg.max_tiles)
        tiles, thumb = tile_image(img, grid)
        stack = torch.stack(tiles, dim=1)  # (B, n_tiles, C, tp, tp)
        idx = torch.arange(grid.n_tiles)
        tile_tok = self._tokens(stack, idx).flatten(1, 2)
        thumb_tok = self._tokens(thumb, torch.tensor(cfg.max_tiles))
        g = cfg.tile_px // cfg.patch_px
        prov = [(k, r, c) for k in range(grid.n_tiles) for r in range(g) for c in range(g)]
        return GarmentTokens(tile_tok, thumb_tok, prov, grid, cfg.patch_px)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Intermediate layers of the thumbnail pathway, each ``(B, n, c)``."""
        if img.dim() == 3:
            img = img.unsqueeze(0)
        thumb = resize(img, self.config.tile_px, self.config.tile_px)
        return self._layers(thumb)

    def pooled(self, img: torch.Tensor) -> torch.Tensor:
        """One vector per image: mean over thumbnail tokens of the last layer."""
        return self.features(img)[-1].mean(dim=-2)


class ThumbnailPatchEncoder(TiledPatchEncoder):
    """Single global view, no tiles: a low-resolution extractor for ablations."""

    def encode(self, img: torch.Tensor) -> GarmentTokens:
        if img.dim() == 3:
            img = img.unsqueeze(0)
        thumb = resize(img, self.config.tile_px, self.config.tile_px)
        thumb_tok = self._tokens(thumb, torch.tensor(self.config.max_tiles))
        empty = thumb_tok[:, :0]
        grid = TileGrid(1, 1, self.config.tile_px)
        return GarmentTokens(empty, thumb_tok, [], grid, self.config.patch_px)


EXTRACTORS: dict[str, type[TiledPatchEncoder]] = {
    "tiled": TiledPatchEncoder,
    "thumbnail": ThumbnailPatchEncoder,
}


def build_extractor(name: str, config: EncoderConfig | None = None) -> TiledPatchEncoder:
    try:
        cls = EXTRACTORS[name]
    except KeyError:
        raise ConfigError(f"unknown feature extractor {name!r}; known: {sorted(EXTRACTORS)}") from None
    return cls(config)
