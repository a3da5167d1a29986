"""``dflgcn`` command line: preprocess, generate, train, eval, gradcheck,
visualize and experiment.

Exit codes: 0 success, 1 usage / IO / configuration error, 2 empty result,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .dif import apply_dif
from .heads import BRANCH_MODES, load_checkpoint, save_checkpoint
from .skeleton import (ClipParseError, Dataset, SkeletonTopology, generate_synthetic_dataset,
                       parse_clip_file, read_manifest, resample_uniform, save_dataset,
                       stratified_split, write_clip_file, write_manifest)
from .training import (evaluate, prepare_clip, run_noise_experiment, run_reduced_data_experiment,
                       train, write_experiment_csv, write_metrics_csv, write_timing_csv)

log = logging.getLogger("dflgcn")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_VERIFY = 0, 1, 2, 3

CLIP_SUFFIXES = {"json": (".json",), "ntu": (".skeleton", ".txt")}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 means "empty result" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- preprocess -------------------------------------------------------------------------

_NTU_ACTION = re.compile(r"A(\d{3})")


def _ntu_label(name: str):
    m = _NTU_ACTION.search(name)
    return int(m.group(1)) - 1 if m else None


def cmd_preprocess(args) -> int:
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise CliError(f"input directory not found: {src}")
    if args.resample < 2:
        raise CliError(f"--resample must be >= 2, got {args.resample}")
    manifest = src / "manifest.csv"
    if manifest.is_file():
        entries = read_manifest(manifest)
    else:
        files = sorted(p for p in src.iterdir() if p.suffix in CLIP_SUFFIXES[args.format])
        entries = [(p.name, None, "train") for p in files]
    rows, failures = [], 0
    out_made = False
    for rel, label, split in entries:
        path = src / rel
        try:
            clip = parse_clip_file(path, args.format)
            if label is None:
                label = clip.label if clip.label is not None else _ntu_label(path.name)
            if label is None:
                raise ClipParseError(f"{path}: no label in file, manifest or file name")
            clip.label = int(label)
            if args.dif:
                clip = apply_dif(clip)
            clip = resample_uniform(clip, args.resample)
        except (OSError, ValueError) as e:
            log.error("%s", e)
            failures += 1
            continue
        if not out_made:
            out.mkdir(parents=True, exist_ok=True)
            out_made = True
        name = Path(rel).with_suffix(".json")
        (out / name).parent.mkdir(parents=True, exist_ok=True)
        write_clip_file(clip, out / name)
        rows.append((name.as_posix(), clip.label, split))
    if not rows:
        log.error("no clips written (%d failures)", failures)
        return EXIT_EMPTY
    write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} clips to {out} ({failures} failed)")
    return EXIT_USAGE if failures else EXIT_OK


# -- generate ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    ds = generate_synthetic_dataset(args.classes, args.clips_per_class, seed=args.seed,
                                    frames=args.frames)
    tr, va = stratified_split(ds, args.val_fraction, args.seed)
    manifest = save_dataset(args.out, {"train": tr, "val": va})
    print(f"wrote {len(tr)} train and {len(va)} val clips; manifest {manifest}")
    return EXIT_OK


# -- train / eval -----------------------------------------------------------------------

def _load_config(path) -> RunConfig:
    return RunConfig.load(path)


def _prepare_output(cfg: RunConfig, override: str | None) -> Path:
    if override:
        cfg.values["output_dir"] = str(Path(override).resolve())
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.yaml")
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_output(cfg, args.out)
    train_set, val_set = cfg.datasets()
    if len(train_set) == 0:
        return EXIT_EMPTY

    def progress(m):
        print(f"epoch {m.epoch:3d}  loss {m.lg + m.ls + m.ld + m.la:8.4f}  "
              f"train {m.train_top1:.3f}  val {m.val_top1:.3f}  ({m.seconds:.1f}s)", flush=True)

    res = train(cfg.model_config(train_set.class_count), train_set, val_set,
                cfg.train_config(), None if args.quiet else progress)
    save_checkpoint(res.model, out / "checkpoint.json")
    write_metrics_csv(res.metrics, out / "metrics.csv")
    write_timing_csv(res.metrics, out / "timing.csv")
    last = res.metrics[-1]
    print(f"final val top-1 {last.val_top1!r}  top-5 {last.val_top5!r}")
    return EXIT_OK


def write_confusion_csv(confusion: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(range(confusion.shape[1])))
        for i, row in enumerate(confusion):
            w.writerow([i] + [int(v) for v in row])


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "checkpoint.json"
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    _, val_set = cfg.datasets()
    if len(val_set) == 0:
        return EXIT_EMPTY
    res = evaluate(model, val_set, args.fusion)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_confusion_csv(res.confusion, out / f"confusion_{args.fusion}.csv")
    print(f"top-1 {res.top1!r}")
    print(f"top-5 {res.top5!r}")
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradsuite import corrupted_backward, run_suite
    seed = args.seed
    if args.config:
        seed = _load_config(args.config).seed if seed is None else seed
    seed = 0 if seed is None else seed
    if args.corrupt_backward:
        with corrupted_backward():
            results = run_suite(seed)
    else:
        results = run_suite(seed)
    failed = []
    for name, report in results:
        print(f"== {name}")
        print(report.format_table())
        if not report.passed:
            failed.append(name)
    worst = max(r.max_rel_error for _, r in results)
    print(f"max relative error {worst:.3e} over {len(results)} checks")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# -- visualize --------------------------------------------------------------------------

def cmd_visualize(args) -> int:
    from .visualize import export_maps, saliency_maps
    ckpt, clip_path = Path(args.checkpoint), Path(args.clip)
    for p in (ckpt, clip_path):
        if not p.is_file():
            raise CliError(f"file not found: {p}")
    model = load_checkpoint(ckpt)
    topo = SkeletonTopology.from_dict(model.cfg.topology)
    clip = parse_clip_file(clip_path, args.format, topo)
    if clip.topology.num_joints != topo.num_joints:
        raise CliError(f"clip has {clip.topology.num_joints} joints, model expects "
                       f"{topo.num_joints}")
    x = prepare_clip(clip, model.cfg.dif_enabled, model.cfg.frames)
    maps = saliency_maps(model, x)
    written = export_maps(maps, args.out, list(topo.names))
    for m in maps:
        print(f"slot {m.slot}: segment {m.segment}, receptive field frames "
              f"[{m.receptive_field[0]}, {m.receptive_field[1]}), "
              f"peak frame {int(np.argmax(m.curve))}")
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# -- experiments ------------------------------------------------------------------------

def cmd_experiment(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_output(cfg, args.out)
    train_set, val_set = cfg.datasets()
    exp = cfg.values["experiment"]
    seeds = tuple(exp["seeds"])
    model_cfg = cfg.model_config(train_set.class_count)
    train_cfg = cfg.train_config()
    if args.kind == "reduced-data":
        rows = run_reduced_data_experiment(model_cfg, train_cfg, train_set, val_set,
                                           exp["fractions"], seeds)
        path = out / "reduced_data.csv"
    else:
        rows = run_noise_experiment(model_cfg, train_cfg, train_set, val_set, exp["sigmas"],
                                    seeds)
        path = out / "noise.csv"
    if not rows:
        return EXIT_EMPTY
    write_experiment_csv(rows, path)
    key = "fraction" if args.kind == "reduced-data" else "sigma"
    for r in rows:
        print(f"{key} {r[key]}  seed {r['seed']}  top-1 {r['top1']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dflgcn", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="parse, optionally DIF-transform and resample clips")
    s.add_argument("--in", dest="input", required=True, help="input directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--dif", action="store_true", help="apply the body-frame transform")
    s.add_argument("--resample", type=int, default=100, help="target frame count")
    s.add_argument("--format", choices=("json", "ntu"), default="json")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("generate", help="write the synthetic direction-randomized dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--clips-per-class", type=int, default=40)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--val-fraction", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override output_dir")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", help="default: <output_dir>/checkpoint.json")
    s.add_argument("--fusion", choices=BRANCH_MODES, default="both")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and the model")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("visualize", help="export input-gradient heat maps for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("json", "ntu"), default="json")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("experiment", help="reduced-data or input-noise sweep")
    s.add_argument("kind", choices=("reduced-data", "noise"))
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
