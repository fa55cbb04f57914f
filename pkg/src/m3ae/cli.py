"""Command-line entry point: ``m3ae <command> ...``.

Failures print one line ``error: <ErrorClass>: <message>`` to stderr and exit
with the class's status code (see ``m3ae.errors``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, M3AEError, UsageError

log = logging.getLogger("m3ae")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def _resolution(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive sizes DxHxW, got {text!r}")
    return dims


def _announce(**seeds) -> None:
    print(" ".join(f"{k}={v}" for k, v in seeds.items()), file=sys.stderr)


# -- commands ------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    from .synthetic import SyntheticSpec, make_dataset
    from .volume_io import write_dataset

    spec = SyntheticSpec(resolution=args.res, n_samples=args.n, seed=args.seed,
                         magnitude=args.magnitude, blobs=args.blobs).validate()
    _announce(seed=args.seed)
    template, volumes, manifest = make_dataset(spec)
    write_dataset(args.out, template, volumes, manifest)
    print(f"wrote {len(volumes)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .network import M3AE
    from .synthetic import make_template
    from .trainer import load_model, train
    from .volume_io import load_dataset

    cfg = load_config(args.config)
    template, volumes, _ = load_dataset(args.data)
    if template is None:
        template = make_template(cfg.model.resolution)
    _announce(seed=cfg.train.seed, init_seed=cfg.model.init_seed)
    opt_state = None
    if args.resume:
        loaded = load_model(args.resume, expect=cfg.model)
        model, opt_state = loaded.model, loaded.opt_state
        print(f"resuming from step {loaded.step}", file=sys.stderr)
    else:
        model = M3AE(cfg.model, template=template)
    log_path = args.log or f"{args.out}.log.ndjson"
    if not args.resume and Path(log_path).exists():
        Path(log_path).unlink()
    result = train(model, volumes, cfg.train, cfg.loss, log_path=log_path, ckpt_path=args.out,
                   opt_state=opt_state, max_steps=args.max_steps)
    means = result.epoch_means("recon_l1") if result.records else {}
    if means:
        last = max(means)
        print(f"trained to step {result.step}; epoch {last + 1} mean recon_l1 {means[last]:.5f}")
    else:
        print(f"nothing to do: checkpoint already at step {result.step}")
    return 0


def cmd_sample(args) -> int:
    from .trainer import load_model
    from .volume_io import write_volume

    model = load_model(args.ckpt).model
    _announce(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for start in range(0, args.n, args.batch_size):
        k = min(args.batch_size, args.n - start)
        vols = model.sample(k, rng).final.data[:, 0]
        for j, v in enumerate(vols):
            write_volume(out / f"sample_{start + j:05d}.m3v", v)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    from .trainer import load_model
    from .volume_io import read_volume, write_volume

    model = load_model(args.ckpt).model
    vol = read_volume(args.inp)
    if vol.ndim != 3:
        raise ConfigError(f"{args.inp}: expected a single-channel volume, got shape {vol.shape}")
    trace = model.reconstruct(vol[None, None])
    write_volume(args.out, trace.final.data[0, 0])
    if args.trace:
        d = Path(args.trace)
        d.mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(trace.levels, start=1):
            write_volume(d / f"level{i}.m3v", x.data[0, 0])
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_model
    from .trainer import load_model
    from .volume_io import load_dataset

    model = load_model(args.ckpt).model
    _, volumes, _ = load_dataset(args.data)
    _announce(seed=args.seed)
    report = evaluate_model(model, volumes, args.n_samples, seed=args.seed)
    report["meta"]["checkpoint"] = str(args.ckpt)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(text)
    print(json.dumps(report["metrics"], sort_keys=True))
    return 0


def cmd_inspect_warp(args) -> int:
    from . import autodiff as ad
    from .autodiff import Tensor
    from .trainer import load_model
    from .volume_io import write_volume

    model = load_model(args.ckpt).model
    cfg = model.config
    if cfg.direct_output:
        raise ConfigError("inspect-warp needs a metamorphic model; this checkpoint is direct-output")
    if not 1 <= args.level < cfg.levels:
        raise ConfigError(f"level must be in 1..{cfg.levels - 1} (level {cfg.levels} has no deformation)")
    _announce(seed=args.seed)
    z = np.random.default_rng(args.seed).standard_normal((1, cfg.latent_dim)).astype(model.dtype)
    with ad.no_grad():
        transforms = model.decode(Tensor(z, dtype=model.dtype))
    write_volume(args.out, transforms[args.level - 1].phi.data[0])
    print(f"wrote level-{args.level} displacement field to {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_gradient_checks, run_warp_checks

    results = run_warp_checks() + ([] if args.skip_gradients else run_gradient_checks())
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser --------------------------------------------------------------


def _schema_epilog() -> str:
    from .config import schema

    rows = [f"  {key} = {default!r}" for key, default in schema()]
    return "config keys (TOML tables [model], [loss], [train]) and defaults:\n" + "\n".join(rows)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="m3ae", description="Multiscale metamorphic autoencoder toolkit.", formatter_class=_Formatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_text, epilog=None):
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=_Formatter)
        sp.set_defaults(func=fn)
        return sp

    sp = add("make-synthetic", cmd_make_synthetic, "generate a synthetic dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=256, help="number of samples")
    sp.add_argument("--res", type=_resolution, default=(16, 24, 16), help="grid size DxHxW")
    sp.add_argument("--seed", type=int, default=0, help="dataset seed")
    sp.add_argument("--magnitude", type=float, default=0.5, help="peak velocity magnitude in voxels")
    sp.add_argument("--blobs", type=int, default=4, help="intensity blobs per sample")

    sp = add("train", cmd_train, "train a model", epilog=_schema_epilog())
    sp.add_argument("--config", required=True, help="TOML config file or preset name (desk, full)")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="checkpoint path (rewritten at every checkpoint)")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.add_argument("--log", default=None, help="loss log path (default: <out>.log.ndjson)")
    sp.add_argument("--max-steps", type=int, default=None, help="stop after this many total steps")

    sp = add("sample", cmd_sample, "draw volumes from the prior")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--n", type=int, default=16, help="number of samples")
    sp.add_argument("--seed", type=int, default=0, help="latent sampling seed")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--batch-size", type=int, default=16, help="decode batch size")

    sp = add("reconstruct", cmd_reconstruct, "reconstruct a volume through the posterior mean")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--in", dest="inp", required=True, help="input volume file")
    sp.add_argument("--out", required=True, help="output volume file")
    sp.add_argument("--trace", default=None, help="directory for every intermediate level output")

    sp = add("evaluate", cmd_evaluate, "write a metrics report (Frechet distances, MSE, SSIM, PSNR)")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--n-samples", type=int, default=256, help="number of generated samples")
    sp.add_argument("--report", required=True, help="report path (JSON)")
    sp.add_argument("--seed", type=int, default=0, help="latent sampling seed")

    sp = add("inspect-warp", cmd_inspect_warp, "export one level's displacement field for a prior sample")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--seed", type=int, default=0, help="latent sampling seed")
    sp.add_argument("--level", type=int, default=1, help="transform level (1-based)")
    sp.add_argument("--out", required=True, help="output 3-channel volume file")

    sp = add("selfcheck", cmd_selfcheck, "run gradient checks and warp invariants")
    sp.add_argument("--skip-gradients", action="store_true", help="only run the warp invariants")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except M3AEError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        print("error: Interrupted: stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
