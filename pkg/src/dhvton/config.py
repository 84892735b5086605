"""Run configuration: one JSON file per run, validated at parse time."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attention import check_lambda
from .core import ConfigError
from .denoiser import BackboneConfig, GfcConfig
from .diffusion import NoiseSchedule, make_schedule
from .garment import EXTRACTORS, EncoderConfig
from .synthdata import SynthConfig

DEFAULT_LAMBDAS = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)

# named overrides on top of the defaults
PRESETS = {
    # short from-scratch run at the reference learning rate, then 500 control steps
    "smoke": dict(backbone_steps=500, backbone_lr=3e-5, gfc_steps=500),
    # desk-scale budget for a visible control-branch effect
    "fidelity": dict(backbone_steps=3000, backbone_lr=1e-3, gfc_steps=1500, lr=1e-3),
}


@dataclass
class RunConfig:
    # data
    height: int = 64
    width: int = 48
    keypoints: int = 8
    parts: int = 5
    n_train: int = 200
    n_eval: int = 20
    data_seed: int = 0
    eval_seed: int = 1
    # diffusion
    T: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.4
    # model
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 2])
    attention_levels: list[int] = field(default_factory=lambda: [2])
    heads: int = 1
    token_dim: int = 64
    tile_px: int = 16
    patch_px: int = 4
    max_tiles: int = 6
    extractor: str = "tiled"
    lam: float = 1.0
    hybrid: bool = True
    use_gfc: bool = True
    gfc_warm_start: bool = True
    freeze_encoder: bool = False
    # optimisation (AdamW)
    lr: float = 3e-5
    backbone_lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 2
    backbone_batch_size: int = 2
    backbone_steps: int = 3000
    gfc_steps: int = 500
    checkpoint_every: int = 0
    seed: int = 0
    # output
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            check_lambda(self.lam)
        except ConfigError as exc:
            raise ConfigError(f"lam: {exc}") from None
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"extractor must be one of {sorted(EXTRACTORS)}, got {self.extractor!r}")
        for name in ("n_train", "n_eval", "T", "batch_size", "backbone_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("backbone_steps", "gfc_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0 or self.backbone_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.tile_px % self.patch_px:
            raise ConfigError(f"patch_px {self.patch_px} must divide tile_px {self.tile_px}")
        div = 2 ** (len(self.channel_multipliers) - 1)
        if self.height % div or self.width % div:
            raise ConfigError(f"resolution {self.height}x{self.width} must be divisible by {div}")
        make_schedule(self.T, self.beta_start, self.beta_end)

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    @classmethod
    def preset(cls, name: str, **changes) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        return cls.from_dict({**PRESETS[name], **changes})

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    def diff(self, other: "RunConfig") -> dict[str, tuple]:
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}

    # -- derived component configs ------------------------------------------

    def synth(self) -> SynthConfig:
        return SynthConfig(
            height=self.height,
            width=self.width,
            keypoints=self.keypoints,
            parts=self.parts,
            garment_height=self.height,
            garment_width=self.width,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            attention_levels=tuple(self.attention_levels),
            ctx_channels=self.token_dim,
            heads=self.heads,
        )

    def gfc(self) -> GfcConfig:
        return GfcConfig(extra_in_channels=self.keypoints + self.parts, lam=self.lam, hybrid=self.hybrid)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            tile_px=self.tile_px, patch_px=self.patch_px, max_tiles=self.max_tiles, dim=self.token_dim
        )
