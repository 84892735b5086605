"""Lambda sweep: one shared pretrained backbone, one control-branch run per setting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .config import DEFAULT_LAMBDAS, RunConfig
from .core import ConfigError
from .metrics import DiffusionTryOn, MetricReport, evaluate, format_table
from .train import BACKBONE_CKPT, eval_manifest, train

OFF_LABEL = "hybrid off"


@dataclass
class SweepRow:
    label: str
    lam: float | None
    paired: MetricReport
    unpaired: MetricReport

    def cells(self) -> list[float]:
        p, u = self.paired, self.unpaired
        return [p.ssim, p.fid, p.kid, p.lpips_proxy, u.fid, u.kid]

    def finite(self) -> bool:
        return all(v is not None and math.isfinite(v) for v in self.cells())


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    @property
    def table(self) -> str:
        return format_table([(r.label, r.paired, r.unpaired) for r in self.rows], label="lambda")

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"label": r.label, "lam": r.lam, "paired": r.paired.to_dict(), "unpaired": r.unpaired.to_dict()}
                for r in self.rows
            ]
        }

    def ordering_note(self) -> str:
        """Which lambda scored best per column; reported, never asserted."""
        lam_rows = [r for r in self.rows if r.lam is not None]
        if not lam_rows:
            return "no lambda rows"
        cols = [("SSIM", lambda r: r.paired.ssim, max), ("FID", lambda r: r.paired.fid, min),
                ("LPIPS", lambda r: r.paired.lpips_proxy, min), ("unpaired FID", lambda r: r.unpaired.fid, min)]
        parts = [f"{name} best at {pick(lam_rows, key=get).label}" for name, get, pick in cols]
        return "ordering across lambda (reported only): " + "; ".join(parts)


def _row(cfg: RunConfig, label: str, lam: float | None, backbone: Path, out: Path | None, seed: int) -> SweepRow:
    res = train(cfg, out, resume=True, backbone_from=backbone)
    gen = DiffusionTryOn(res.model, cfg.schedule())
    recs = eval_manifest(cfg).records
    synth = cfg.synth()
    return SweepRow(
        label,
        lam,
        evaluate(recs, gen, "paired", synth, seed=seed),
        evaluate(recs, gen, "unpaired", synth, seed=seed),
    )


def sweep_lambda(
    cfg: RunConfig,
    values=DEFAULT_LAMBDAS,
    out_dir: str | Path | None = None,
    include_off: bool = True,
    backbone_from: str | Path | None = None,
    eval_seed: int = 0,
) -> SweepResult:
    """Train and evaluate the hybrid-off row, then one row per lambda.

    Phase A runs once (or is loaded from ``backbone_from``) and every row
    starts its control-branch training from that same backbone.
    """
    for v in values:
        cfg.replace(lam=float(v))  # validates the range before any compute
    out = Path(out_dir) if out_dir is not None else None
    if backbone_from is None:
        if out is None:
            raise ConfigError("sweep needs out_dir or backbone_from")
        base = out / "backbone"
        if not (base / BACKBONE_CKPT).exists():
            train(cfg.replace(gfc_steps=0), base, resume=True)
        backbone_from = base / BACKBONE_CKPT
    elif not Path(backbone_from).exists():
        raise FileNotFoundError(f"backbone checkpoint not found: {backbone_from}")

    result = SweepResult()
    jobs = [(OFF_LABEL, None, cfg.replace(hybrid=False))] if include_off else []
    jobs += [(f"{float(v):g}", float(v), cfg.replace(lam=float(v), hybrid=True)) for v in values]
    for label, lam, row_cfg in jobs:
        row_dir = None if out is None else out / ("off" if lam is None else f"lam_{lam:g}")
        result.rows.append(_row(row_cfg, label, lam, Path(backbone_from), row_dir, eval_seed))
    if out is not None:
        (out / "sweep.txt").write_text(result.table + "\n" + result.ordering_note() + "\n")
        (out / "sweep.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return result
