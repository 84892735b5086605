"""Frozen inpainting backbone UNet and the trainable garment control branch.

The backbone consumes ``[x_t, m, x0']`` and reads the garment thumbnail
tokens through plain cross attention.  The control branch (GFC+) is a copy of
the backbone's encoder and middle block with hybrid attention over the full
fine-grained garment tokens and extra pose/densepose inputs; each of its
injection sites ends in a zero-initialised 1x1 projection whose output is
added to the backbone's middle-block output or decoder skip connection.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch
from torch import nn

from .attention import SpatialTransformer, check_lambda
from .core import ConfigError, load_checkpoint, sinusoidal_embedding
from .diffusion import Conditions
from .garment import EncoderConfig, GarmentTokens, TiledPatchEncoder, build_extractor


@dataclass
class BackboneConfig:
    img_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    attention_levels: tuple[int, ...] = (2,)
    time_embed_dim: int = 128
    ctx_channels: int = 64
    heads: int = 1
    groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)
        if not self.attention_levels:
            raise ConfigError("at least one attention level is required")
        if any(not 0 <= a < len(self.channel_multipliers) for a in self.attention_levels):
            raise ConfigError(f"attention levels {self.attention_levels} out of range")

    @property
    def in_channels(self) -> int:
        return 2 * self.img_channels + 1

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]


@dataclass
class GfcConfig:
    extra_in_channels: int = 13  # pose keypoints + densepose parts
    zero_init: bool = True
    lam: float = 1.0
    hybrid: bool = True

    def __post_init__(self):
        check_lambda(self.lam)


@dataclass
class ControlVectors:
    """One tensor per injection site: middle block first, then each encoder skip."""

    per_site: list[torch.Tensor] = field(default_factory=list)

    def scaled(self, s: float) -> "ControlVectors":
        return ControlVectors([c * s for c in self.per_site])

    def is_zero(self) -> bool:
        return all(not torch.any(c) for c in self.per_site)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t.float(), self.dim))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class Upsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


def _zero_conv(c: int) -> nn.Conv2d:
    conv = nn.Conv2d(c, c, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class _Encoder(nn.Module):
    """Encoder levels plus middle block, shared by the backbone and the control branch."""

    def __init__(self, cfg: BackboneConfig, attn_kind: str, lam: float = 1.0, hybrid: bool = True):
        super().__init__()
        chans = cfg.level_channels()
        te = cfg.time_embed_dim
        self.time = TimeEmbedding(te)
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.res = nn.ModuleList()
        self.attn = nn.ModuleDict()
        self.down = nn.ModuleList()
        c_prev = chans[0]
        for i, c in enumerate(chans):
            self.res.append(ResBlock(c_prev, c, te, cfg.groups))
            if i in cfg.attention_levels:
                self.attn[str(i)] = self._attn(cfg, c, attn_kind, lam, hybrid)
            if i < len(chans) - 1:
                self.down.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            c_prev = c
        self.mid1 = ResBlock(c_prev, c_prev, te, cfg.groups)
        self.mid_attn = self._attn(cfg, c_prev, attn_kind, lam, hybrid)
        self.mid2 = ResBlock(c_prev, c_prev, te, cfg.groups)

    @staticmethod
    def _attn(cfg, c, kind, lam, hybrid) -> SpatialTransformer:
        return SpatialTransformer(
            c, cfg.ctx_channels, kind=kind, heads=cfg.heads, lam=lam, hybrid_enabled=hybrid, groups=cfg.groups
        )

    def run(
        self, h: torch.Tensor, temb: torch.Tensor, ctx: torch.Tensor | None
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for i, res in enumerate(self.res):
            h = res(h, temb)
            if str(i) in self.attn:
                h = self.attn[str(i)](h, ctx)
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), ctx), temb)
        return h, skips


class BackboneUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = cfg or BackboneConfig()
        chans = cfg.level_channels()
        self.encoder = _Encoder(cfg, "cross")
        te = cfg.time_embed_dim
        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        self.up = nn.ModuleList()
        c_cur = chans[-1]
        for i in reversed(range(len(chans))):
            if i < len(chans) - 1:
                self.up.append(Upsample(c_cur))
            self.dec_res.append(ResBlock(c_cur + chans[i], chans[i], te, cfg.groups))
            if i in cfg.attention_levels:
                self.dec_attn[str(i)] = _Encoder._attn(cfg, chans[i], "cross", 1.0, True)
            c_cur = chans[i]
        self.norm_out = nn.GroupNorm(cfg.groups, chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.img_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def site_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        chans = self.config.level_channels()
        shapes = [(c, height >> i, width >> i) for i, c in enumerate(chans)]
        return [shapes[-1]] + shapes

    def forward(
        self,
        x_t: torch.Tensor,
        mask: torch.Tensor,
        masked_person: torch.Tensor,
        thumb_tokens: torch.Tensor,
        t: torch.Tensor,
        control: ControlVectors | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        x = torch.cat([x_t, mask, masked_person], dim=1)
        if x.shape[1] != cfg.in_channels:
            raise ConfigError(f"backbone expects {cfg.in_channels} input channels, got {x.shape[1]}")
        h_div = 2 ** (len(cfg.channel_multipliers) - 1)
        if x.shape[-1] % h_div or x.shape[-2] % h_div:
            raise ConfigError(f"spatial size {tuple(x.shape[-2:])} not divisible by {h_div}")
        enc = self.encoder
        temb = enc.time(t)
        h, skips = enc.run(enc.conv_in(x), temb, thumb_tokens)
        if control is not None:
            assert len(control.per_site) == len(skips) + 1, "control site count mismatch"
            assert control.per_site[0].shape == h.shape, "middle-block control shape mismatch"
            h = h + control.per_site[0]
            skips = [s + c for s, c in zip(skips, control.per_site[1:])]
        levels = len(skips)
        for j, res in enumerate(self.dec_res):
            i = levels - 1 - j
            if j > 0:
                h = self.up[j - 1](h)
            h = res(torch.cat([h, skips[i]], dim=1), temb)
            if str(i) in self.dec_attn:
                h = self.dec_attn[str(i)](h, thumb_tokens)
        return self.conv_out(nn.functional.silu(self.norm_out(h)))


class GfcPlus(nn.Module):
    """Trainable control branch emitting one control tensor per injection site."""

    def __init__(self, cfg: BackboneConfig | None = None, gfc: GfcConfig | None = None):
        super().__init__()
        self.config = cfg = cfg or BackboneConfig()
        self.gfc_config = g = gfc or GfcConfig()
        chans = cfg.level_channels()
        self.encoder = _Encoder(cfg, "hybrid", lam=g.lam, hybrid=g.hybrid)
        self.hint = nn.Sequential(
            nn.Conv2d(g.extra_in_channels, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, chans[0], 3, padding=1),
        )
        self.zero_mid = nn.Conv2d(chans[-1], chans[-1], 1)
        self.zero_skips = nn.ModuleList([nn.Conv2d(c, c, 1) for c in chans])
        if g.zero_init:
            for conv in [self.zero_mid, *self.zero_skips]:
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def set_lambda(self, lam: float) -> None:
        check_lambda(lam)
        self.gfc_config.lam = lam
        for block in self.hybrid_blocks():
            block.attn2.lam = lam

    def set_hybrid(self, enabled: bool) -> None:
        self.gfc_config.hybrid = enabled
        for block in self.hybrid_blocks():
            block.attn2.enabled = enabled

    def hybrid_blocks(self) -> list[SpatialTransformer]:
        return [*self.encoder.attn.values(), self.encoder.mid_attn]

    def forward(
        self,
        x_t: torch.Tensor,
        mask: torch.Tensor,
        masked_person: torch.Tensor,
        garment_tokens: torch.Tensor,
        pose: torch.Tensor,
        densepose: torch.Tensor,
        t: torch.Tensor,
    ) -> ControlVectors:
        extra = torch.cat([pose, densepose], dim=1)
        if extra.shape[1] != self.gfc_config.extra_in_channels:
            raise ConfigError(
                f"control branch expects {self.gfc_config.extra_in_channels} pose+densepose "
                f"channels, got {extra.shape[1]}"
            )
        enc = self.encoder
        temb = enc.time(t)
        h = enc.conv_in(torch.cat([x_t, mask, masked_person], dim=1)) + self.hint(extra)
        h, skips = enc.run(h, temb, garment_tokens)
        return ControlVectors([self.zero_mid(h)] + [z(s) for z, s in zip(self.zero_skips, skips)])

    def init_from_backbone(self, backbone: BackboneUNet) -> None:
        """Copy encoder + middle weights from the backbone (ControlNet-style warm start).

        In attention blocks the backbone's cross-attention query feeds the
        shared query, its garment key/value feed ``W'_k, W'_v`` and its
        self-attention key/value feed the hybrid block's ``W_k, W_v``.
        """
        src = backbone.encoder.state_dict()
        dst = self.encoder.state_dict()
        remap = {
            "attn2.w_k_g": "attn2.w_k",
            "attn2.w_v_g": "attn2.w_v",
            "attn2.w_k": "attn1.w_k",
            "attn2.w_v": "attn1.w_v",
        }
        new = {}
        for name, val in dst.items():
            cand = name
            for suffix, repl in remap.items():
                if name.endswith(suffix):
                    cand = name[: -len(suffix)] + repl
                    break
            if cand in src and src[cand].shape == val.shape:
                new[name] = src[cand].clone()
        self.encoder.load_state_dict(new, strict=False)


class DHVTON(nn.Module):
    """Backbone + control branch + garment extractor behind one noise-prediction call."""

    def __init__(
        self,
        backbone: BackboneConfig | None = None,
        gfc: GfcConfig | None = None,
        encoder: EncoderConfig | None = None,
        extractor: str = "tiled",
        use_gfc: bool = True,
    ):
        super().__init__()
        backbone = backbone or BackboneConfig()
        encoder = encoder or EncoderConfig(dim=backbone.ctx_channels)
        if encoder.dim != backbone.ctx_channels:
            raise ConfigError(f"encoder dim {encoder.dim} != backbone ctx_channels {backbone.ctx_channels}")
        self.backbone = BackboneUNet(backbone)
        self.gfc = GfcPlus(backbone, gfc)
        self.encoder: TiledPatchEncoder = build_extractor(extractor, encoder)
        self.use_gfc = use_gfc

    def tokens(self, garment: torch.Tensor) -> GarmentTokens:
        return self.encoder.encode(garment)

    def backbone_forward(self, x_t, t, conds: Conditions, tokens: GarmentTokens | None = None):
        tokens = tokens or self.tokens(conds.garment)
        return self.backbone(x_t, conds.mask, conds.masked_person, tokens.thumb_tokens, t)

    def gfc_forward(self, x_t, t, conds: Conditions, tokens: GarmentTokens | None = None) -> ControlVectors:
        tokens = tokens or self.tokens(conds.garment)
        return self.gfc(
            x_t, conds.mask, conds.masked_person, tokens.combined, conds.pose, conds.densepose, t
        )

    def combined_forward(
        self, x_t, t, conds: Conditions, control: ControlVectors | None = None
    ) -> torch.Tensor:
        tokens = self.tokens(conds.garment)
        if control is None and self.use_gfc:
            control = self.gfc_forward(x_t, t, conds, tokens)
        return self.backbone(x_t, conds.mask, conds.masked_person, tokens.thumb_tokens, t, control)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, conds: Conditions) -> torch.Tensor:
        return self.combined_forward(x_t, t, conds)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Parameters and buffers keyed ``backbone/...``, ``gfc/...``, ``encoder/...``."""
        out = {}
        for part in ("backbone", "gfc", "encoder"):
            for k, v in getattr(self, part).state_dict().items():
                out[f"{part}/{k}"] = v.detach().clone()
        return out

    def load_named_tensors(self, tensors: Mapping[str, torch.Tensor], strict: bool = True) -> None:
        for part in ("backbone", "gfc", "encoder"):
            sub = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(part + "/")}
            if sub or strict:
                getattr(self, part).load_state_dict(sub, strict=strict)


@dataclass
class FreezeReport:
    checked: int
    drifted: list[str]
    missing: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.drifted and not self.missing

    def __str__(self) -> str:
        if self.passed:
            return f"PASS frozen: {self.checked} backbone tensors bit-identical"
        return f"FAIL frozen: drifted={self.drifted} missing={self.missing}"


def assert_frozen(
    backbone: nn.Module, reference: Mapping[str, torch.Tensor] | str | Path, prefix: str = "backbone/"
) -> FreezeReport:
    """Bitwise comparison of every backbone tensor against a pre-training snapshot.

    ``reference`` is a name->tensor mapping or a checkpoint path; names may
    carry ``prefix`` (as written by ``DHVTON.named_tensors``).
    """
    if isinstance(reference, (str, Path)):
        reference = load_checkpoint(reference)
    ref = {k[len(prefix):] if k.startswith(prefix) else k: v for k, v in reference.items()}
    current = backbone.state_dict()
    drifted = [prefix + k for k, v in current.items() if k in ref and not torch.equal(v, ref[k].to(v.dtype))]
    missing = [prefix + k for k in current if k not in ref]
    return FreezeReport(checked=len(current), drifted=drifted, missing=missing)
