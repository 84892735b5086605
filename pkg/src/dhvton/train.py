"""Two-phase training: backbone pretraining, then frozen backbone + control branch."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .core import ConfigError, SeededRng, load_checkpoint, make_optimizer, save_checkpoint, set_trainable
from .denoiser import DHVTON, FreezeReport, assert_frozen
from .diffusion import training_loss
from .synthdata import Manifest, Sample, collate, make_split, sample_for_record

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
SEEDS_FILE = "seeds.json"
VERSION_FILE = "version.txt"
LOSS_FILE = "loss.jsonl"
MANIFEST_FILE = "manifest.jsonl"
INIT_CKPT = "init.dhvt"
BACKBONE_CKPT = "backbone.dhvt"
FINAL_CKPT = "final.dhvt"

_STREAM_BATCH_A, _STREAM_BATCH_B = 0xA0, 0xB0


class ConfigMismatch(ConfigError):
    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: existing={a!r} requested={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("output dir holds a run with a different config:\n" + "\n".join(lines))


class FreezeViolation(RuntimeError):
    def __init__(self, report: FreezeReport):
        self.report = report
        super().__init__(str(report))


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"dhvton {__version__} src-sha256:{h.hexdigest()[:16]} torch {torch.__version__} python {platform.python_version()}"


def build_model(cfg: RunConfig) -> DHVTON:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return DHVTON(cfg.backbone(), cfg.gfc(), cfg.encoder(), extractor=cfg.extractor, use_gfc=cfg.use_gfc)


def training_samples(cfg: RunConfig) -> tuple[Manifest, list[Sample]]:
    manifest = make_split(max(cfg.n_train, 2), cfg.data_seed)
    recs = manifest.setting("paired")[: cfg.n_train]
    synth = cfg.synth()
    return manifest, [sample_for_record(r, synth) for r in recs]


def eval_manifest(cfg: RunConfig) -> Manifest:
    """Held-out records: seeds drawn from a stream disjoint from the training split."""
    return make_split(max(cfg.n_eval, 2), cfg.eval_seed + 1_000_003)


@dataclass
class TrainResult:
    model: DHVTON
    losses: list[dict] = field(default_factory=list)
    freeze: FreezeReport | None = None
    out_dir: Path | None = None

    def phase_losses(self, phase: str) -> np.ndarray:
        return np.array([r["loss"] for r in self.losses if r["phase"] == phase])


def _run_phase(
    model: DHVTON,
    params: list[torch.nn.Parameter],
    samples: list[Sample],
    cfg: RunConfig,
    phase: str,
    steps: int,
    lr: float,
    batch_size: int,
    log_file,
    on_checkpoint=None,
) -> list[dict]:
    if steps == 0:
        return []
    opt = make_optimizer(params, lr=lr, weight_decay=cfg.weight_decay)
    sched = cfg.schedule()
    stream = _STREAM_BATCH_A if phase == "A" else _STREAM_BATCH_B
    rng = SeededRng(cfg.seed, stream_id=stream)
    records = []
    model.train()
    for step in range(1, steps + 1):
        step_rng = rng.child(step)
        idx = step_rng.integers(0, len(samples), batch_size)
        x0, conds = collate([samples[i] for i in idx])
        t = step_rng.integers(1, sched.T + 1, batch_size)
        eps = step_rng.normal(tuple(x0.shape))
        loss = training_loss(model, x0, conds, t, eps, sched)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {"phase": phase, "step": step, "loss": float(loss.item())}
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
        if step % 100 == 0:
            log.info("phase %s step %d loss %.4f", phase, step, np.mean([r["loss"] for r in records[-100:]]))
        if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(phase, step)
    return records


def prepare_run_dir(cfg: RunConfig, out_dir: Path, resume: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = out_dir / CONFIG_FILE
    if cfg_path.exists():
        existing = RunConfig.load(cfg_path)
        diff = existing.diff(cfg)
        diff.pop("output_dir", None)
        if diff:
            raise ConfigMismatch(diff)
        if not resume:
            raise ConfigError(f"{out_dir} already holds a run; pass resume=True to continue it")
    cfg_path.write_text(cfg.to_json())
    (out_dir / SEEDS_FILE).write_text(
        json.dumps({"seed": cfg.seed, "data_seed": cfg.data_seed, "eval_seed": cfg.eval_seed}, indent=2) + "\n"
    )
    (out_dir / VERSION_FILE).write_text(code_version() + "\n")


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    backbone_from: str | Path | None = None,
) -> TrainResult:
    """Phase A trains backbone + tokenizer; phase B freezes the backbone and trains the control branch.

    With ``out_dir`` the config, seeds, code version, manifest, loss log and
    checkpoints are written there (config first).  ``backbone_from`` loads a
    phase-A checkpoint and skips phase A; ``resume`` does the same from the
    run's own ``backbone.dhvt`` when present.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        prepare_run_dir(cfg, out, resume)
    manifest, samples = training_samples(cfg)
    model = build_model(cfg)
    log_file = None
    if out is not None:
        manifest.write(out / MANIFEST_FILE)
        save_checkpoint(out / INIT_CKPT, model.named_tensors())
        log_file = (out / LOSS_FILE).open("w")
    result = TrainResult(model=model, out_dir=out)

    try:
        if backbone_from is None and resume and out is not None and (out / BACKBONE_CKPT).exists():
            backbone_from = out / BACKBONE_CKPT
        if backbone_from is not None:
            model.load_named_tensors(load_checkpoint(backbone_from), strict=False)
        else:
            model.use_gfc = False
            params = list(model.backbone.parameters()) + list(model.encoder.parameters())
            result.losses += _run_phase(
                model, params, samples, cfg, "A", cfg.backbone_steps, cfg.backbone_lr, cfg.backbone_batch_size, log_file
            )
            if out is not None:
                save_checkpoint(out / BACKBONE_CKPT, model.named_tensors())

        set_trainable(model.backbone, False)
        reference = {f"backbone/{k}": v.detach().clone() for k, v in model.backbone.state_dict().items()}
        if cfg.gfc_warm_start:
            model.gfc.init_from_backbone(model.backbone)
        model.use_gfc = cfg.use_gfc
        if cfg.freeze_encoder:
            set_trainable(model.encoder, False)

        def check(phase=None, step=None):
            report = assert_frozen(model.backbone, reference)
            if not report.passed:
                raise FreezeViolation(report)
            if out is not None and step is not None:
                save_checkpoint(out / f"ckpt_{phase}{step:06d}.dhvt", model.named_tensors())
            return report

        if cfg.use_gfc and cfg.gfc_steps:
            params = [p for p in model.parameters() if p.requires_grad]
            result.losses += _run_phase(
                model, params, samples, cfg, "B", cfg.gfc_steps, cfg.lr, cfg.batch_size, log_file, check
            )
        result.freeze = check()
        model.eval()
        if out is not None:
            save_checkpoint(out / FINAL_CKPT, model.named_tensors())
    finally:
        if log_file is not None:
            log_file.close()
    return result


def load_trained(cfg: RunConfig, checkpoint: str | Path) -> DHVTON:
    model = build_model(cfg)
    model.load_named_tensors(load_checkpoint(checkpoint))
    set_trainable(model, False)
    model.eval()
    return model
