"""Command-line operator surface.

Subcommands: shapes, train, eval, compare, gradcheck, gen-data.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure. Commands that produce files write a run manifest (run.json) into
the output directory before any long computation; re-running with the same
inputs reproduces outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import graph as G
from . import metrics as M
from . import tensor as T
from . import train as TR
from .errors import ConfigError, FormatError, NumericalError, ParseError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def resolve_config_path(name: str) -> Path:
    """Accept a filesystem path or the name of a packaged config."""
    p = Path(name)
    if p.exists():
        return p
    stem = name if name.endswith(".cfg") else name + ".cfg"
    packaged = resources.files("smalldet") / "configs" / stem
    with resources.as_file(packaged) as fp:
        if fp.exists():
            return Path(fp)
    raise ConfigError(f"config {name!r} not found (no such file or packaged config)")


def load_dataset(manifest: str | Path, input_size: int) -> list[TR.Sample]:
    """Load a manifest's images + labels, letterboxed to the model input."""
    samples: list[TR.Sample] = []
    for entry in D.load_manifest(manifest):
        img = D.load_image(entry.image_path)
        gts = D.parse_annotation_file(entry.label_path)
        if img.shape[1:] != (input_size, input_size):
            img, affine = D.letterbox(img, input_size)
            gts = [D.GroundTruthBox(box=affine.apply_box(g.box),
                                    class_id=g.class_id, occlusion=g.occlusion,
                                    truncation=g.truncation) for g in gts]
        samples.append((img, gts))
    return samples


def _write_run_manifest(out: Path, args: argparse.Namespace,
                        digests: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": args.cmd,
        "argv": sys.argv[1:],
        "version": __version__,
        "config_digests": digests,
        "out": str(out),
    }
    for key in ("seed", "seeds", "precision"):
        if hasattr(args, key):
            payload[key] = getattr(args, key)
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shapes

def cmd_shapes(args) -> int:
    cfg = G.load_config(resolve_config_path(args.config))
    rows = G.shape_infer(cfg, args.size)
    total = 0
    print(f"{'idx':>3}  {'kind':<10} {'from':<14} {'output':<22} {'params':>9}")
    for r in rows:
        total += r.params
        if r.kind == "detect":
            shape = "; ".join("x".join(str(d) for d in s) for s in r.out)
        else:
            shape = "x".join(str(d) for d in r.out)
        frm = ",".join(str(f) for f in r.frm)
        print(f"{r.index:>3}  {r.kind:<10} [{frm}]".ljust(32) + f"{shape:<22} {r.params:>9}")
    size = args.size or cfg.input_size
    for s in cfg.head_strides:
        print(f"head stride {s} -> grid {size // s}x{size // s}")
    print(f"total params: {total}")
    return 0


# ---------------------------------------------------------------------------
# train

def _protocol_from_args(args) -> TR.TrainProtocol:
    proto = TR.load_protocol(args.protocol) if args.protocol else TR.TrainProtocol()
    if args.seed is not None:
        proto.seed = args.seed
    return proto


def cmd_train(args) -> int:
    T.set_default_dtype(args.precision)
    cfg = G.load_config(resolve_config_path(args.config))
    proto = _protocol_from_args(args)
    out = Path(args.out)
    _write_run_manifest(out, args, {cfg.name: G.config_digest(cfg)})
    train_set = load_dataset(args.data, cfg.input_size)
    val_set = load_dataset(args.val, cfg.input_size) if args.val else train_set
    model = G.build_model(cfg, seed=proto.seed)
    settings = M.PostprocessSettings(operating_conf=args.conf, nms_iou=args.iou)
    state, rows = TR.fit(model, train_set, val_set, proto, out_dir=out,
                         settings=settings, resume=args.resume)
    print(f"trained {cfg.name}: {state.epoch} epochs, "
          f"best mAP@0.5 {state.best_map50:.4f} at epoch {state.best_epoch}"
          + (" (early stop)" if state.stopped_early else ""))
    print(f"wrote {out / 'metrics.csv'}, {out / 'best.ckpt'}, {out / 'last.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    T.set_default_dtype(args.precision)
    cfg = G.load_config(resolve_config_path(args.config))
    out = Path(args.out)
    _write_run_manifest(out, args, {cfg.name: G.config_digest(cfg)})
    entries = D.load_manifest(args.data)
    samples = load_dataset(args.data, cfg.input_size)
    settings = M.PostprocessSettings(operating_conf=args.conf, nms_iou=args.iou)

    if args.detections:
        det_dir = Path(args.detections)
        dets = []
        for entry in entries:
            f = det_dir / (entry.image_path.stem + ".txt")
            dets.append(M.load_detections(f) if f.exists() else [])
        label = "detections"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --detections")
        model = G.build_model(cfg, seed=0)
        G.load_checkpoint(model, args.checkpoint)  # refuses on digest mismatch
        dets = TR.predict_dataset(model, samples, batch_size=8, settings=settings)
        label = cfg.name

    det_out = out / "detections"
    det_out.mkdir(parents=True, exist_ok=True)
    for entry, d in zip(entries, dets):
        M.save_detections(det_out / (entry.image_path.stem + ".txt"), d)

    report = M.evaluate(dets, [gts for _, gts in samples], cfg.num_classes,
                        operating_conf=args.conf, class_names=D.CLASS_NAMES)
    (out / "per_class.csv").write_text(M.report_csv(report))
    table = M.report_table([(label, report.precision, report.recall,
                             report.map50, report.map5095)])
    (out / "report.txt").write_text(table)
    print(table, end="")
    if report.flagged_empty:
        print("warning: no ground truth present anywhere; all classes skipped",
              file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# compare

def cmd_compare(args) -> int:
    T.set_default_dtype(args.precision)
    configs = [G.load_config(resolve_config_path(c)) for c in args.configs]
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    seeds = [int(s) for s in args.seeds.split(",")]
    proto_base = TR.load_protocol(args.protocol) if args.protocol else TR.TrainProtocol()
    out = Path(args.out)
    _write_run_manifest(out, args, {c.name: G.config_digest(c) for c in configs})

    sizes = {c.input_size for c in configs}
    if len(sizes) != 1:
        raise ConfigError(f"compare configs disagree on input_size: {sizes}")
    train_set = load_dataset(args.data, sizes.pop())
    val_set = load_dataset(args.val, configs[0].input_size) if args.val else train_set

    rows_out: list[tuple[str, float, float, float, float]] = []
    csv_lines = ["config,seed,precision,recall,map50,map5095"]
    medians: list[tuple[str, float, float, float, float]] = []
    for cfg in configs:
        per_seed = []
        for seed in seeds:
            proto = TR.TrainProtocol(**{**vars(proto_base), "seed": seed})
            run_dir = out / cfg.name / f"seed{seed}"
            model = G.build_model(cfg, seed=seed)
            state, rows = TR.fit(model, train_set, val_set, proto, out_dir=run_dir)
            best = next(r for r in rows if r.epoch == state.best_epoch)
            metrics = (best.precision, best.recall, best.map50, best.map5095)
            per_seed.append(metrics)
            rows_out.append((f"{cfg.name}/s{seed}", *metrics))
            csv_lines.append(f"{cfg.name},{seed}," + ",".join(f"{v:.6f}" for v in metrics))
        med = tuple(statistics.median(m[i] for m in per_seed) for i in range(4))
        medians.append((f"{cfg.name} (median)", *med))
        csv_lines.append(f"{cfg.name},median," + ",".join(f"{v:.6f}" for v in med))

    table = M.report_table(rows_out) + "\n" + M.report_table(medians, mark_best=True)
    (out / "compare.txt").write_text(table)
    (out / "compare.csv").write_text("\n".join(csv_lines) + "\n")
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    T.set_default_dtype("float64")  # finite differences need double precision
    cfg = G.load_config(resolve_config_path(args.config))
    model = G.build_model(cfg, seed=args.seed or 0)
    report = TR.gradient_check(model, num_samples=args.samples,
                               threshold=args.threshold,
                               seed=args.seed or 0)
    print(f"sampled {report.num_sampled} parameters on {cfg.name}")
    for layer in sorted(report.per_layer, key=lambda s: int(s)):
        err, pname = report.per_layer[layer]
        print(f"  layer {layer:>3}: worst {err:.3e}  ({pname})")
    print(f"max relative error {report.max_rel_err:.3e} "
          f"(threshold {report.threshold:g}) -> "
          + ("PASS" if report.passed else "FAIL"))
    if not report.passed:
        raise NumericalError(
            f"gradient check failed: {report.max_rel_err:.3e} >= {report.threshold:g}")
    return 0


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _write_run_manifest(out, args, {})
    spec = D.SceneSpec(
        image_size=args.image_size,
        count_range=(args.count_min, args.count_max),
        size_range=(args.min_size, args.max_size),
        occlusion_prob=args.occlusion_prob,
        seed=args.seed or 0,
    )
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    base = args.seed or 0
    man_train, short1 = D.generate_dataset(out / "train", args.train, spec,
                                           base_seed=base)
    man_val, short2 = D.generate_dataset(out / "val", args.val, spec,
                                         base_seed=base + 1_000_000)
    print(f"wrote {args.train} train scenes -> {man_train}")
    print(f"wrote {args.val} val scenes -> {man_val}")
    if short1 or short2:
        print("note: some scenes fell short of the requested target count",
              file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="smalldet",
                description="small-target detection engine: build, train, "
                            "evaluate, compare")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    sp = sub.add_parser("shapes", help="print the per-layer shape/param table")
    sp.add_argument("config")
    sp.add_argument("--size", type=int, default=None)
    sp.set_defaults(func=cmd_shapes)

    tp = sub.add_parser("train", help="train a config on a dataset manifest")
    tp.add_argument("config")
    tp.add_argument("--protocol", default=None)
    tp.add_argument("--data", required=True, help="train manifest csv")
    tp.add_argument("--val", default=None, help="val manifest (default: train)")
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--resume", default=None, help="resume from last.ckpt")
    tp.add_argument("--conf", type=float, default=0.25)
    tp.add_argument("--iou", type=float, default=0.45)
    tp.add_argument("--precision", choices=("float32", "float64"),
                    default="float32")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint or detection files")
    ep.add_argument("--config", required=True)
    ep.add_argument("--checkpoint", default=None)
    ep.add_argument("--detections", default=None,
                    help="directory of per-image detection files (bypasses model)")
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--conf", type=float, default=0.25)
    ep.add_argument("--iou", type=float, default=0.45)
    ep.add_argument("--precision", choices=("float32", "float64"),
                    default="float32")
    ep.set_defaults(func=cmd_eval)

    cp = sub.add_parser("compare", help="train several configs under one "
                                        "protocol and tabulate metrics")
    cp.add_argument("configs", nargs="+")
    cp.add_argument("--protocol", default=None)
    cp.add_argument("--data", required=True)
    cp.add_argument("--val", default=None)
    cp.add_argument("--out", required=True)
    cp.add_argument("--seeds", default="0,1,2")
    cp.add_argument("--precision", choices=("float32", "float64"),
                    default="float32")
    cp.set_defaults(func=cmd_compare)

    gp = sub.add_parser("gradcheck", help="finite-difference check of the "
                                          "full graph + loss")
    gp.add_argument("--config", default="spts_tiny")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--samples", type=int, default=200)
    gp.add_argument("--threshold", type=float, default=1e-3)
    gp.set_defaults(func=cmd_gradcheck)

    dp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    dp.add_argument("--out", required=True)
    dp.add_argument("--train", type=int, default=200)
    dp.add_argument("--val", type=int, default=50)
    dp.add_argument("--image-size", type=int, default=128)
    dp.add_argument("--min-size", type=float, default=6.0)
    dp.add_argument("--max-size", type=float, default=20.0)
    dp.add_argument("--count-min", type=int, default=6)
    dp.add_argument("--count-max", type=int, default=10)
    dp.add_argument("--occlusion-prob", type=float, default=0.15)
    dp.add_argument("--seed", type=int, default=0)
    dp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, FormatError, FileNotFoundError,
            NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
