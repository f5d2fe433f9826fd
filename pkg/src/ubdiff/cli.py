"""Command-line entry point: ``ubdiff <command> --config run.json [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort,
3 missing artifact.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .errors import MissingArtifactError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_MISSING = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set trainer.epochs_step1=10")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ubdiff", description="Unbalanced paired velocity/seismic generation pipeline.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesize the unbalanced training set and a paired test set")
    _add_common(p)
    p.add_argument("--family", choices=("flatvel", "curvevel", "flatfault", "curvefault"))
    p.add_argument("--count", type=int)
    p.add_argument("--n-paired", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train-encdec", help="train the encoder/decoder network")
    _add_common(p)
    p.add_argument("--step", choices=("1", "2", "ablation"), required=True)
    p.add_argument("--freeze", choices=("0", "1", "auto"), default="auto")

    p = sub.add_parser("train-diff", help="train the latent denoiser")
    _add_common(p)
    p.add_argument("--source", choices=("step2", "step1", "ablation"), default="step2",
                   help="which encoder/decoder checkpoint supplies the latents")
    p.add_argument("--resume", help="denoiser checkpoint or snapshot directory to continue from")
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides diffusion.steps)")

    p = sub.add_parser("generate", help="sample paired data")
    _add_common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source", choices=("step2", "step1", "ablation"), default="step2")
    p.add_argument("--out", help="output directory (default: next version under generated/)")

    p = sub.add_parser("eval", help="evaluate generated data against real data")
    _add_common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--axes", default="fid,pairwise,physics",
                   help="comma-separated subset of fid, pairwise, physics")

    p = sub.add_parser("plot", help="write heatmap PNGs of dataset samples")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--indices", default="0", help="comma-separated sample indices")
    p.add_argument("--out", required=True)
    return ap


def _overrides(args) -> list[str]:
    ov = list(args.set)
    if args.command == "synth":
        for flag, key in (("family", "data.family"), ("count", "data.count"),
                          ("n_paired", "data.n_paired"), ("n_test", "data.n_test")):
            val = getattr(args, flag)
            if val is not None:
                ov.append(f"{key}={val}" if flag != "family" else f'{key}="{val}"')
    if args.command == "train-diff" and args.steps is not None:
        ov.append(f"diffusion.steps={args.steps}")
    return ov


def run(args) -> int:
    from . import pipeline as P

    cfg = load_config(args.config, _overrides(args))
    cmd = args.command
    if cmd == "synth":
        path, created = P.cmd_synth(cfg)
        print(f"wrote {path}" if created else f"already synthesized: {path}")
    elif cmd == "train-encdec":
        print(f"wrote {P.cmd_train_encdec(cfg, args.step, args.freeze)}")
    elif cmd == "train-diff":
        print(f"wrote {P.cmd_train_diff(cfg, args.source, args.resume)}")
    elif cmd == "generate":
        print(f"wrote {P.cmd_generate(cfg, args.count, args.seed, args.source, args.out)}")
    elif cmd == "eval":
        axes = tuple(a.strip() for a in args.axes.split(",") if a.strip())
        bad = set(axes) - {"fid", "pairwise", "physics"}
        if bad or not axes:
            raise ConfigError(f"unknown evaluation axes {sorted(bad)}")
        print(f"wrote {P.cmd_eval(cfg, args.real, args.generated, axes)}")
    elif cmd == "plot":
        from .plot import plot_samples
        try:
            indices = [int(i) for i in args.indices.split(",") if i.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --indices: {args.indices!r}") from exc
        for p in plot_samples(args.dataset, indices, args.out):
            print(p)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    try:
        return run(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, IndexError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
