"""``scaf`` command line: fixture, scribble, bank, train, eval, robust, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig

log = logging.getLogger("scaf")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = str(args.out)
    if getattr(args, "data", None) is not None:
        cfg.data.root = str(args.data)
    if getattr(args, "deterministic", False):
        cfg.train.deterministic = True
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        cfg.train.epochs = args.epochs
    return cfg


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return path


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and out.is_dir() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, default=str))


# ---------------------------------------------------------------------------
# commands

def cmd_fixture(args) -> dict:
    from .fixture import write_fixture
    seed = 0 if args.seed is None else args.seed
    out = write_fixture(args.out, args.n, seed, size=args.size, coverage=args.coverage,
                        n_authentic=args.n_authentic, n_test=args.n_test, force=args.force)
    return {"out": str(out), "n_samples": args.n}


def cmd_scribble(args) -> dict:
    from .dataio import encode_scribble, list_ids, read_mask, synthesize_scribble
    base = _require(Path(args.data) / args.split, "split")
    mask_dir = _require(base / "masks", "mask directory")
    scribble_dir = base / "scribbles"
    scribble_dir.mkdir(exist_ok=True)
    ids = list_ids(mask_dir)
    if not ids:
        raise CommandError(f"no masks found in {mask_dir}")
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    for sample_id in ids:
        target = scribble_dir / f"{sample_id}.png"
        seed = int(rng.integers(2**31))
        if target.exists() and not args.force:
            continue
        scribble = synthesize_scribble(read_mask(mask_dir / f"{sample_id}.png"), args.coverage, seed,
                                       args.authentic_coverage)
        encode_scribble(target, scribble)
    return {"split": str(base), "n_scribbles": len(ids)}


def cmd_bank_build(args) -> dict:
    from .dataio import load_dataset, load_images
    from .trainer import build_discriminator, seed_everything, to_tensor_images
    cfg = _config(args)
    out = _prepare_out(Path(args.out) if args.out else Path(cfg.out_dir) / "bank", args.force)
    root = _require(cfg.data.root, "data root")
    size = cfg.train.image_size
    authentic = to_tensor_images([img for _, img in load_images(root, cfg.data.authentic_split)], size)
    manipulated = to_tensor_images([s.image for s in load_dataset(root, cfg.data.train_split)], size)
    seed_everything(cfg.seed)
    md = build_discriminator(cfg, authentic, manipulated)
    md.save(out)
    return {"out": str(out), "files": sorted(p.name for p in out.iterdir())}


def cmd_bank_score(args) -> dict:
    import torch
    import torch.nn.functional as F
    from .dataio import read_image, write_image
    from .discriminator import ManipulatedDiscriminator
    md = ManipulatedDiscriminator.load(_require(args.bank, "bank directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for image_path in args.images:
        image = read_image(_require(image_path, "image"))
        x = torch.from_numpy(image).permute(2, 0, 1)[None].float()
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise CommandError(f"{image_path}: image size {h}x{w} must be divisible by 32")
        pp = md.prior_map(x)
        stem = Path(image_path).stem
        for name, prior in (("mp", pp.mp), ("ap", pp.ap)):
            full = F.interpolate(prior, size=(h, w), mode="bilinear", align_corners=False)
            path = out / f"{stem}_{name}.png"
            write_image(path, full[0, 0].clamp(0, 1).numpy())
            written.append(str(path))
    return {"files": written}


def cmd_train(args) -> dict:
    from .dataio import load_dataset
    from .discriminator import ManipulatedDiscriminator
    from .trainer import Trainer, run_training, seed_everything
    cfg = _config(args)
    out = _prepare_out(Path(cfg.out_dir), args.force)
    _require(cfg.data.root, "data root")
    config_mod.dump(cfg, out / "config.yaml")
    if args.bank:
        md = ManipulatedDiscriminator.load(_require(args.bank, "bank directory"))
        seed_everything(cfg.seed, cfg.train.deterministic)
        ckpt = Trainer(cfg, md).fit(load_dataset(cfg.data.root, cfg.data.train_split), out)
    else:
        ckpt = run_training(cfg, out_dir=out)
    return {"checkpoint": str(ckpt), "log": str(out / "train_log.jsonl")}


def _eval_samples(args):
    from .dataio import load_dataset
    root = _require(args.data, "data root")
    return load_dataset(root, args.split, require_scribbles=False), f"{Path(root).name}/{args.split}"


def cmd_eval(args) -> dict:
    from .metrics import evaluate_checkpoint, write_eval
    ckpt = _require(args.checkpoint, "checkpoint")
    samples, name = _eval_samples(args)
    result = evaluate_checkpoint(ckpt, samples, name)
    path = write_eval(result, args.out)
    return {"eval": str(path), "mean_f1": result.mean_f1, "n_errors": len(result.errors)}


def cmd_robust(args) -> dict:
    from .metrics import robustness_checkpoint, write_robustness
    ckpt = _require(args.checkpoint, "checkpoint")
    for q in args.qualities:
        if not 1 <= q <= 100:
            raise CommandError(f"JPEG quality must be in [1, 100], got {q}")
    samples, name = _eval_samples(args)
    rows = robustness_checkpoint(ckpt, samples, args.qualities, name)
    table, plot = write_robustness(rows, args.out)
    return {"table": str(table), "plot": str(plot), "rows": rows}


def cmd_report(args) -> dict:
    from .metrics import write_report
    evals = {}
    for item in args.eval:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).parent.name, item
        evals[name] = _require(path, "eval file")
    robust = _require(args.robust, "robustness table") if args.robust else None
    report = write_report(evals, args.out, robust)
    return {"report": str(report), "files": sorted(str(p) for p in Path(args.out).iterdir())}


def cmd_config(args) -> dict:
    cfg = config_mod.toy_config() if args.toy else RunConfig()
    if args.reference:
        text = config_mod.reference(cfg)
        if args.out:
            Path(args.out).write_text(text)
    else:
        text = config_mod.dump(cfg, args.out)
    if args.out is None:
        sys.stdout.write(text)
        return {}
    return {"out": str(args.out)}


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaf", description="Scribble-supervised manipulation localisation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fixture", help="write a procedural splice dataset")
    f.add_argument("--out", required=True)
    f.add_argument("--n", type=int, default=20, help="number of training samples")
    f.add_argument("--n-test", type=int, default=0)
    f.add_argument("--n-authentic", type=int, default=None)
    f.add_argument("--size", type=int, default=128)
    f.add_argument("--coverage", type=float, default=0.1)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--force", action="store_true")
    f.set_defaults(func=cmd_fixture)

    s = sub.add_parser("scribble", help="synthesise scribbles from dense masks")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--coverage", type=float, default=0.1)
    s.add_argument("--authentic-coverage", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--force", action="store_true", help="overwrite existing scribbles")
    s.set_defaults(func=cmd_scribble)

    b = sub.add_parser("bank", help="build memory banks or score images against them")
    bsub = b.add_subparsers(dest="action", required=True)
    bb = bsub.add_parser("build")
    bb.add_argument("--config")
    bb.add_argument("--data")
    bb.add_argument("--seed", type=int, default=None)
    bb.add_argument("--out")
    bb.add_argument("--force", action="store_true")
    bb.set_defaults(func=cmd_bank_build)
    bs = bsub.add_parser("score")
    bs.add_argument("--bank", required=True)
    bs.add_argument("--out", required=True)
    bs.add_argument("images", nargs="+")
    bs.set_defaults(func=cmd_bank_score)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--bank", help="prebuilt bank directory (default: build before training)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "pixel F1@0.5 on a split"),
                                 ("robust", cmd_robust, "F1 under JPEG re-encoding")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="train")
        e.add_argument("--out", required=True)
        if name == "robust":
            e.add_argument("--qualities", type=int, nargs="+", default=[90, 50, 10])
        e.set_defaults(func=func)

    r = sub.add_parser("report", help="collect eval files into a report")
    r.add_argument("--eval", action="append", required=True, metavar="[NAME=]PATH")
    r.add_argument("--robust")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("config", help="print or write the default config")
    c.add_argument("--toy", action="store_true")
    c.add_argument("--reference", action="store_true", help="markdown table of keys and defaults")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001  surfaced as a structured error
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    if result:
        _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
