"""``pnen`` command line.

Exit codes: 0 ok, 2 usage/config, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as pio
from .backbone import PnenModel
from .config import SCHEMA, RunConfig, coerce, load_config
from .costs import attention_memory_ratio, count_costs
from .errors import ConfigError, DataError, NumericError, PnenError
from .filters import apply_filter
from .gradcheck import run_all
from .metrics import quality
from .nonlocal_blocks import PyramidNonLocalBlock, dump_attention
from .tensor import Tensor
from .training import TextureSpec, synth_textures, train

BENCH_VARIANTS = ("none", "nlb", "apnb", "pnb")


def thread_cap() -> int:
    raw = os.environ.get("PNB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PNB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PNB_THREADS must be a positive integer, got {raw!r}")
    return n


# --- argument plumbing ---------------------------------------------------------


def _converter(key: str):
    def convert(raw: str):
        return coerce(key, raw)

    typ = SCHEMA[key].type
    convert.__name__ = typ if isinstance(typ, str) else typ.__name__
    return convert


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value config file; flags override it")
    group = p.add_argument_group("run configuration")
    for key, f in SCHEMA.items():
        meta = f.metadata
        kw = dict(dest=f"cfg_{key}", default=None, help=f"{meta['help']} (default: {f.default!r})")
        if meta.get("choices"):
            kw["choices"] = meta["choices"]
        else:
            kw["type"] = _converter(key)
            kw["metavar"] = kw["type"].__name__.upper()
        group.add_argument(f"--{key.replace('_', '-')}", **kw)


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return load_config(args.config, **overrides)


def _images(paths) -> list[tuple[Path, np.ndarray]]:
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out += [(f, pio.read_image(f)) for f in sorted(p.iterdir()) if f.suffix.lower() in (".pgm", ".ppm")]
        else:
            out.append((p, pio.read_image(p)))
    if not out:
        raise DataError("no input images")
    return out


def _frozen_predict(model: PnenModel, img: np.ndarray) -> np.ndarray:
    Y, _ = model(Tensor(img[None].astype(model.cfg.np_dtype)))
    return Y.data[0].astype(np.float64)


def _predict_all(model: PnenModel, images: list[np.ndarray], jobs: int) -> list[np.ndarray]:
    model.eval()
    for img in images:
        if img.shape[0] != model.cfg.c:
            raise DataError(f"image has {img.shape[0]} channels, checkpoint expects {model.cfg.c}")
    if jobs <= 1 or len(images) <= 1:
        return [_frozen_predict(model, img) for img in images]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda img: _frozen_predict(model, img), images))


def _parse_pixel(raw: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in raw.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected Y,X, got {raw!r}") from None
    return y, x


# --- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve

    cfg = _run_config(args)
    result = train(cfg, out_dir=args.out)
    fig = plot_loss_curve(result.losses, result.lrs, Path(args.out) / "loss.png")
    first = np.mean(result.losses[:100]) if result.losses else float("nan")
    last = np.mean(result.losses[-100:]) if result.losses else float("nan")
    print("steps,first100_mean,last100_mean,final_lr,checkpoint,figure")
    print(f"{len(result.losses)},{first:.6g},{last:.6g},{result.lrs[-1] if result.lrs else cfg.lr_init:.6g},{result.checkpoint},{fig}")
    return 0


def cmd_infer(args) -> int:
    model = pio.load_checkpoint(args.checkpoint)
    items = _images(args.inputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = _predict_all(model, [img for _, img in items], args.jobs or thread_cap())
    for (path, _), pred in zip(items, preds):
        dest = out / path.name
        pio.write_image(pred, dest)
        print(dest)
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    items = _images(args.inputs)
    images = [img for _, img in items]
    if args.checkpoint:
        preds = _predict_all(pio.load_checkpoint(args.checkpoint), images, thread_cap())
    else:
        preds = images
    if args.reference:
        targets = [pio.read_image(Path(args.reference) / p.name) for p, _ in items]
    else:
        spec = cfg.filter_spec()
        targets = [apply_filter(img, spec) for img in images]
    rows = []
    for (path, _), pred, tgt in zip(items, preds, targets):
        if pred.shape != tgt.shape:
            raise DataError(f"{path.name}: prediction {pred.shape} vs target {tgt.shape}")
        q = quality(np.clip(pred, 0, 1), tgt)
        rows.append([path.name, q.psnr_text(), f"{q.ssim:.6f}"])
    lines = ["image,psnr,ssim"] + [",".join(r) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    from .plotting import plot_costs

    cfg = _run_config(args)
    shape = (1, cfg.c, args.size, args.size)
    dtype_bytes = 4 if cfg.dtype == "f32" else 8
    reports, depths = {}, {}
    for kind in BENCH_VARIANTS:
        model = PnenModel(cfg.replace(nonlocal_kind=kind).model_config())
        reports[kind] = count_costs(model, shape, dtype_bytes)
        depths[kind] = model.max_conv_depth()
    if args.verbose_table:
        for rep in reports.values():
            print(rep.render(max_rows=args.verbose_table))
            print()
    header = "variant,params,depth,macs,flops,attention_elements,attention_macs,nonlocal_activations,peak_bytes_inference,peak_bytes_training"
    lines = [header]
    for kind, rep in reports.items():
        lines.append(
            f"{kind},{rep.total_params},{depths[kind]},{rep.total_macs},{rep.total_flops},{rep.attention_elements},"
            f"{rep.attention_macs},{rep.nonlocal_activations},{rep.peak_bytes()},{rep.peak_bytes(True)}"
        )
    print("\n".join(lines))
    elem_ratio = reports["pnb"].attention_elements / reports["nlb"].attention_elements
    mem_ratio = attention_memory_ratio(reports["pnb"], reports["nlb"])
    order = sorted(("apnb", "pnb", "nlb"), key=lambda k: reports[k].attention_macs)
    print(f"pnb/nlb attention element ratio: {elem_ratio:.6f}")
    print(f"pnb/nlb non-local activation memory ratio: {mem_ratio:.4f}")
    print(f"attention cost order: {' < '.join(order)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        for kind, rep in reports.items():
            (out / f"costs_{kind}.csv").write_text(rep.to_csv())
        print(f"figure: {plot_costs(reports, out / 'costs.png')}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, samples=args.samples or None)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_dump_attn(args) -> int:
    from .plotting import plot_attention

    if args.checkpoint:
        model = pio.load_checkpoint(args.checkpoint)
    else:
        model = PnenModel(_run_config(args).model_config())
    if args.image:
        img = pio.read_image(args.image)
    else:
        rng = np.random.default_rng(model.cfg.seed)
        img = synth_textures(TextureSpec(count=1, size=args.size, channels=model.cfg.c), rng)[0]
    if not 1 <= args.group <= model.cfg.M:
        raise ConfigError(f"--group must be in 1..{model.cfg.M}")
    block = model.nonlocals[args.group - 1]
    if not isinstance(block, PyramidNonLocalBlock):
        raise ConfigError(f"dump-attn needs a pnb model, checkpoint uses {model.cfg.nonlocal_kind}")
    model.eval()
    captured = []
    model.features(Tensor(img[None].astype(model.cfg.np_dtype)), capture=captured)
    dumps = dump_attention(captured[args.group - 1], block, args.pixel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print("scale,grid_h,grid_w,min,max,pgm")
    for dump in dumps:
        w = dump.weights
        lo, hi = float(w.min()), float(w.max())
        scaled = (w - lo) / (hi - lo) if hi > lo else np.zeros_like(w)
        pgm = out / f"attn_g{args.group}_s{dump.scale}.pgm"
        pio.write_image(scaled[None], pgm)
        pio.write_tensor(pgm.with_suffix(".pnt"), w)
        pgm.with_suffix(".txt").write_text(
            f"pixel={dump.pixel[0]},{dump.pixel[1]}\nscale={dump.scale}\ngrid={w.shape[0]}x{w.shape[1]}\nmin={lo!r}\nmax={hi!r}\nsum={float(w.sum())!r}\n"
        )
        print(f"{dump.scale},{w.shape[0]},{w.shape[1]},{lo:.6g},{hi:.6g},{pgm}")
    print(f"figure: {plot_attention(img, dumps, out / 'attention.png')}")
    return 0


def cmd_synth_data(args) -> int:
    cfg = _run_config(args)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    spec = TextureSpec(count=cfg.synth_count, size=cfg.synth_size, channels=cfg.c, amplitude=cfg.synth_amplitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if cfg.c == 1 else ".ppm"
    fspec = cfg.filter_spec()
    for i, img in enumerate(synth_textures(spec, rng)):
        dest = out / f"synth_{i:04d}{ext}"
        pio.write_image(img, dest)
        if args.targets:
            tdir = out / "targets"
            tdir.mkdir(exist_ok=True)
            pio.write_image(apply_filter(pio.read_image(dest), fspec), tdir / dest.name)
        print(dest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnen", description="Pyramid non-local enhanced networks on CPU.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model; writes checkpoints, loss.csv and loss.png")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over images")
    p.add_argument("inputs", nargs="+", help="PGM/PPM files or directories")
    p.add_argument("--checkpoint", required=True, help="checkpoint manifest or stem")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=0, help="concurrent images (default: PNB_THREADS)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM CSV against filtered targets")
    p.add_argument("inputs", nargs="+", help="PGM/PPM files or directories")
    p.add_argument("--checkpoint", help="score model outputs; without it the inputs are scored directly")
    p.add_argument("--reference", help="directory of targets matched by file name (default: filter the inputs)")
    p.add_argument("--out", help="also write the CSV here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="analytic cost report for none/nlb/apnb/pnb")
    p.add_argument("--size", type=int, default=96, help="square input edge (default: 96)")
    p.add_argument("--out", help="directory for bench.csv, per-variant CSVs and costs.png")
    p.add_argument("--verbose-table", type=int, default=0, metavar="ROWS", help="print each report's first ROWS rows")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks per layer class")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--samples", type=int, default=24, help="entries probed per tensor; 0 probes all (default: 24)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attn", help="per-scale attention maps of one pixel")
    p.add_argument("--checkpoint", help="checkpoint to inspect (default: fresh model from the config)")
    p.add_argument("--image", help="input PGM/PPM (default: a synthetic texture)")
    p.add_argument("--size", type=int, default=64, help="synthetic image edge (default: 64)")
    p.add_argument("--pixel", type=_parse_pixel, required=True, metavar="Y,X")
    p.add_argument("--group", type=int, default=1, help="which non-local block, 1-based (default: 1)")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("synth-data", help="write a synthetic texture corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--targets", action="store_true", help="also write filtered targets to OUT/targets")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_cap()):
            return args.func(args)
    except PnenError as exc:
        print(f"pnen: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"pnen: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
