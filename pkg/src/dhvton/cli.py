"""Command-line entry point: ``dhvton <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import DEFAULT_LAMBDAS, PRESETS, RunConfig
from .core import ConfigError, DataError, DimensionError, PreconditionError, SeededRng
from .garment import select_grid
from .gradsuite import run_suite

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("dhvton")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for validation failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = RunConfig.preset(args.preset)
    else:
        cfg = RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    return cfg.replace(**overrides) if overrides else cfg


def to_png(img: torch.Tensor, path: Path) -> None:
    """Save a (C, H, W) tensor in [-1, 1] as PNG."""
    arr = ((img.detach().clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def grid_sheet(rows: list[list[torch.Tensor]], pad: int = 2) -> torch.Tensor:
    """Tile equally sized (C, H, W) images into one sheet, white padding."""
    c, h, w = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    sheet = torch.ones(c, len(rows) * (h + pad) + pad, ncol * (w + pad) + pad)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[:, y : y + h, x : x + w] = img[:c]
    return sheet


def _model_from_run(run_dir: Path, checkpoint: str | None):
    from .train import CONFIG_FILE, FINAL_CKPT, load_trained

    cfg = RunConfig.load(run_dir / CONFIG_FILE)
    ckpt = Path(checkpoint) if checkpoint else run_dir / FINAL_CKPT
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return cfg, load_trained(cfg, ckpt)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthdata import make_split, sample_for_record

    cfg = _load_config(args)
    out = Path(args.out)
    manifest = make_split(args.n, args.seed)
    for sub in ("image", "cloth", "agnostic-mask", "pose", "densepose"):
        (out / args.setting / sub).mkdir(parents=True, exist_ok=True)
    synth = cfg.synth()
    root = out / args.setting
    for rec in manifest.setting(args.setting):
        s = sample_for_record(rec, synth)
        stem = f"{rec.index:05d}"
        to_png(s.person, root / "image" / f"{stem}.png")
        to_png(s.garment, root / "cloth" / f"{stem}.png")
        to_png(s.mask * 2 - 1, root / "agnostic-mask" / f"{stem}_mask.png")
        np.save(root / "pose" / f"{stem}.npy", s.pose.numpy())
        labels = (s.densepose * torch.arange(1, s.densepose.shape[0] + 1).view(-1, 1, 1)).sum(0)
        np.save(root / "densepose" / f"{stem}.npy", labels.numpy().astype(np.int64))
    manifest.write(out / "manifest.jsonl")
    print(f"wrote {len(manifest.setting(args.setting))} {args.setting} samples to {root}")
    print(f"manifest sha256 {manifest.digest()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args)
    res = train(cfg, cfg.output_dir, resume=args.resume, backbone_from=args.backbone)
    for phase in ("A", "B"):
        losses = res.phase_losses(phase)
        if len(losses):
            print(f"phase {phase}: {len(losses)} steps, first-20 mean {losses[:20].mean():.4f}, last-100 mean {losses[-100:].mean():.4f}")
    print(res.freeze)
    print(f"run written to {cfg.output_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .metrics import DiffusionTryOn
    from .synthdata import sample_for_record
    from .train import eval_manifest

    run = Path(args.run)
    cfg, model = _model_from_run(run, args.checkpoint)
    model.use_gfc = not args.no_gfc and cfg.use_gfc
    recs = eval_manifest(cfg).setting(args.setting)
    if args.n > len(recs):
        recs = eval_manifest(cfg.replace(n_eval=args.n)).setting(args.setting)
    recs = recs[: args.n]
    samples = [sample_for_record(r, cfg.synth()) for r in recs]
    gen = DiffusionTryOn(model, cfg.schedule()).generate(samples, SeededRng(args.seed, stream_id=0x5A))
    out = Path(args.out or run / "samples")
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(gen):
        to_png(img, out / f"tryon_{k:03d}.png")
    rows = [[s.masked_person, s.garment, g, s.person] for s, g in zip(samples, gen)]
    to_png(grid_sheet(rows), out / "sheet.png")
    print(f"wrote {len(gen)} images and sheet.png to {out} (columns: masked, garment, try-on, reference)")
    return EXIT_OK


def _eval_model(args):
    from .metrics import OracleTryOn, DiffusionTryOn

    if args.oracle:
        return (_load_config(args) if args.run is None else RunConfig.load(Path(args.run) / "config.json")), OracleTryOn()
    if args.run is None:
        raise ConfigError("eval needs --run DIR or --oracle")
    cfg, model = _model_from_run(Path(args.run), args.checkpoint)
    model.use_gfc = not args.no_gfc and cfg.use_gfc
    return cfg, DiffusionTryOn(model, cfg.schedule())


def cmd_eval(args) -> int:
    from .metrics import evaluate, format_table
    from .train import eval_manifest

    cfg, gen = _eval_model(args)
    recs = eval_manifest(cfg).records
    settings = ["paired", "unpaired"] if args.setting == "both" else [args.setting]
    reports = {s: evaluate(recs, gen, s, cfg.synth(), seed=args.seed) for s in settings}
    label = "oracle" if args.oracle else Path(args.run).name
    print(format_table([(label, reports.get("paired"), reports.get("unpaired"))], label="model"))
    if args.json:
        Path(args.json).write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import sweep_lambda

    cfg = _load_config(args)
    values = [float(v) for v in args.values.split(",")] if args.values else list(DEFAULT_LAMBDAS)
    result = sweep_lambda(cfg, values, Path(cfg.output_dir), include_off=not args.no_off, backbone_from=args.backbone)
    print(result.table)
    print(result.ordering_note())
    return EXIT_OK


def cmd_tile(args) -> int:
    if args.image is not None:
        with Image.open(args.image) as im:
            w, h = im.size
    else:
        if args.width is None or args.height is None:
            raise UsageError("tile: give WIDTH HEIGHT or --image PATH")
        w, h = args.width, args.height
    grid = select_grid(w, h, args.tile_px, args.max_tiles)
    print(grid.describe())
    if args.boxes:
        for k in range(grid.n_tiles):
            r, c = divmod(k, grid.cols)
            x0, y0 = c * grid.tile_px, r * grid.tile_px
            print(f"  tile {k}: x {x0}..{x0 + grid.tile_px}, y {y0}..{y0 + grid.tile_px}")
        print(f"  thumbnail: whole image -> {grid.tile_px}x{grid.tile_px}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = None if args.ops in (None, [], ["all"]) else args.ops
    reports = run_suite(names, eps=args.eps, tol=args.tol, seed=args.seed)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_OK if not failed else EXIT_INVALID


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dhvton", description="Desk-scale diffusion virtual try-on with hybrid garment attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named config preset (ignored with --config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (JSON value)")

    sp = sub.add_parser("synth", help="materialise a synthetic dataset in a VITON-HD style layout")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("-n", type=int, default=20, help="number of pairs")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--setting", choices=["paired", "unpaired"], default="paired")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="phase A backbone pretraining, then frozen-backbone control training")
    with_config(sp)
    sp.add_argument("--out", help="run directory (overrides output_dir)")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--backbone", help="phase-A checkpoint to start from (skips phase A)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="write try-on PNGs and a sheet for held-out records")
    sp.add_argument("--run", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("-n", type=int, default=8)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--setting", choices=["paired", "unpaired"], default="paired")
    sp.add_argument("--no-gfc", action="store_true", help="force zero control vectors")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="paired/unpaired metric report")
    with_config(sp)
    sp.add_argument("--run")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    sp.add_argument("--setting", choices=["paired", "unpaired", "both"], default="both")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-gfc", action="store_true")
    sp.add_argument("--json", help="also write the report(s) as JSON")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep-lambda", help="hybrid-off row plus one row per lambda")
    with_config(sp)
    sp.add_argument("--out")
    sp.add_argument("--values", help="comma-separated lambdas (default 0.25..1.5)")
    sp.add_argument("--no-off", action="store_true", help="skip the hybrid-off row")
    sp.add_argument("--backbone", help="shared phase-A checkpoint")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("tile", help="print the tiling grid for an image size")
    sp.add_argument("width", type=int, nargs="?")
    sp.add_argument("height", type=int, nargs="?")
    sp.add_argument("tile_px", type=int, nargs="?", default=448)
    sp.add_argument("max_tiles", type=int, nargs="?", default=6)
    sp.add_argument("--image", help="read the size from an image file")
    sp.add_argument("--verbose", dest="boxes", action="store_true", help="print per-tile crop boxes")
    sp.set_defaults(fn=cmd_tile)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("ops", nargs="*", help="op names (default: all)")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, DimensionError, PreconditionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
