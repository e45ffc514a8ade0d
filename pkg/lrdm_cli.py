#!/usr/bin/env python3
"""
LRDM CLI

Command-line interface for training, sampling and analysing diffusion models
with learned representations.

Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""

import argparse
import sys
import traceback
from typing import Any, Dict, List, Optional

from lrdm import ConfigError, LRDMState, PipelineService, load_run_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class LRDMArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("-c", "--config", help="JSON run config (defaults are used for missing keys)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value (repeatable, wins over --config)")
    parser.add_argument("-o", "--output-dir", help="Output directory (default: $LRDM_OUT/<command> or out/<command>)")
    parser.add_argument("--seed", type=int, help="Seed for training and sampling (overrides trainer.seed and sampler.seed)")
    parser.add_argument("--force", action="store_true", help="Overwrite existing output files")
    parser.add_argument("--jobs", type=int, default=1, help="Worker threads for sampling shards (default: 1)")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    parser.add_argument("--verbose", action="store_true", help="Verbose output")


def build_parser() -> argparse.ArgumentParser:
    parser = LRDMArgumentParser(
        prog="lrdm_cli.py",
        description="Diffusion models with learned representations (LRDM / t-LRDM / LVAE)",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the 8-mode mixture datasets
  python lrdm_cli.py make-data -o runs/data

  # Train a plain diffusion model
  python lrdm_cli.py train --set trainer.steps=2000 -o runs/dm

  # KL-weight sweep for LRDM
  python lrdm_cli.py train --set model.mode=lrdm --set model.parameterization=image \\
      --lambdas 0.1 0.01 0.001 0.0001 -o runs/sweep

  # Resume training from a checkpoint
  python lrdm_cli.py train -c runs/dm/config.json --set trainer.steps=4000 \\
      --resume runs/dm/checkpoint.lrdm -o runs/dm_more

  # 5000 DDIM samples with 50 steps on 4 threads
  python lrdm_cli.py sample runs/dm/checkpoint.lrdm --n 5000 --sampler ddim --steps 50 --jobs 4

  # Reconstructions, interpolation and evaluation of an LRDM
  python lrdm_cli.py reconstruct runs/sweep/lam_0.0001/checkpoint.lrdm
  python lrdm_cli.py interpolate runs/sweep/lam_0.0001/checkpoint.lrdm --points 10
  python lrdm_cli.py eval runs/sweep/lam_0.0001/checkpoint.lrdm

  # Dump the noise schedule
  python lrdm_cli.py schedule-dump --set schedule.T=1000
        """
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("make-data", help="Write train/held-out mixture datasets")
    _add_common(p)

    p = sub.add_parser("train", help="Train a model (or a KL-weight sweep)")
    _add_common(p)
    p.add_argument("--lambdas", type=float, nargs="+", help="KL weights to sweep (one run each)")
    p.add_argument("--resume", help="Checkpoint to continue training from")
    p.add_argument("--dm-baseline", help="Plain-DM checkpoint to compare a sweep against (trained if omitted)")

    p = sub.add_parser("sample", help="Draw samples from a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--n", type=int, help="Number of samples (default: sampler.n)")
    p.add_argument("--sampler", choices=["ancestral", "ddim"], help="Sampler kind (default: sampler.kind)")
    p.add_argument("--steps", type=int, help="Number of DDIM steps (uniform stride)")
    p.add_argument("--class-id", type=int, help="Class label for class-conditional checkpoints")
    p.add_argument("--trace", action="store_true", help="Also write a per-step trace of the first chains")

    p = sub.add_parser("reconstruct", help="Encode and decode points through a representation model")
    _add_common(p)
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--input", help="CSV of points (default: held-out data)")
    p.add_argument("--n", type=int, help="Number of points (default: analysis.n_eval)")
    p.add_argument("--mode", choices=["ddim", "ancestral"], help="Decoding mode (default: analysis.recon_mode)")
    p.add_argument("--steps", type=int, help="Number of DDIM steps")

    p = sub.add_parser("interpolate", help="Slerp between two encoded points")
    _add_common(p)
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--points", type=int, help="Points on the path (default: analysis.interp_points)")
    p.add_argument("--a", type=int, default=0, help="Index of the first input point")
    p.add_argument("--b", type=int, default=1, help="Index of the second input point")
    p.add_argument("--input", help="CSV of points (default: held-out data)")
    p.add_argument("--mode", choices=["ddim", "ancestral"], help="Decoding mode (default: analysis.recon_mode)")
    p.add_argument("--steps", type=int, help="Number of DDIM steps")

    p = sub.add_parser("eval", help="Distortion/KL curves, energy distance and reconstruction metrics")
    _add_common(p)
    p.add_argument("checkpoint", help="Checkpoint file")

    p = sub.add_parser("schedule-dump", help="Write per-timestep schedule coefficients")
    _add_common(p)

    p = sub.add_parser("pca-grid", help="Decode a grid over the two leading PCA directions of r")
    _add_common(p)
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--grid-n", type=int, help="Grid points per axis (default: analysis.pca_grid_n)")
    p.add_argument("--extent", type=float, help="Grid half-width in standard deviations")
    p.add_argument("--class-id", type=int, help="Class label for class-conditional checkpoints")
    return parser


def dispatch(pipeline: PipelineService, args: argparse.Namespace) -> Dict[str, Any]:
    """Run the pipeline command selected on the command line."""
    if args.command == "make-data":
        return pipeline.run_make_data()
    if args.command == "train":
        return pipeline.run_train(args.lambdas, args.resume, args.dm_baseline)
    if args.command == "sample":
        return pipeline.run_sample(args.checkpoint, args.n, args.sampler, args.steps, args.class_id, args.trace)
    if args.command == "reconstruct":
        return pipeline.run_reconstruct(args.checkpoint, args.input, args.n, args.mode, args.steps)
    if args.command == "interpolate":
        return pipeline.run_interpolate(args.checkpoint, args.a, args.b, args.points, args.mode,
                                        args.input, args.steps)
    if args.command == "eval":
        return pipeline.run_eval(args.checkpoint)
    if args.command == "schedule-dump":
        return pipeline.run_schedule_dump()
    return pipeline.run_pca_grid(args.checkpoint, args.grid_n, args.extent, args.class_id)


def _print_info(info: Dict[str, Any], indent: str = "  "):
    for key, value in info.items():
        if isinstance(value, dict):
            print(f"{indent}{key}:")
            _print_info(value, indent + "  ")
        elif isinstance(value, float):
            print(f"{indent}{key}: {value:.6g}")
        elif isinstance(value, list) and len(value) > 8:
            print(f"{indent}{key}: [{len(value)} values]")
        else:
            print(f"{indent}{key}: {value}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI function."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        state = LRDMState()
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"trainer.seed={args.seed}", f"sampler.seed={args.seed}"]
        config = load_run_config(args.config, overrides, state)
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")

        pipeline = PipelineService(state, config, args.output_dir, force=args.force,
                                   jobs=args.jobs, progress=args.progress)
        print(f"Running {args.command}")
        results = dispatch(pipeline, args)

        if results.get("success", False):
            print(f"\n✅ {args.command} completed successfully!")
            if results.get("outputs"):
                print("\nGenerated output files:")
                for name, path in results["outputs"].items():
                    if isinstance(path, dict):
                        for inner, inner_path in path.items():
                            print(f"  {name}/{inner}: {inner_path}")
                    else:
                        print(f"  {name}: {path}")
            if results.get("processing_info"):
                print("\nResults:")
                _print_info(results["processing_info"])
            return EXIT_OK

        print(f"\n❌ {args.command} failed!")
        print("\nErrors:")
        for error in results.get("errors", []):
            print(f"  {error}")
        if args.verbose and results.get("traceback"):
            print(results["traceback"])
        return EXIT_USAGE if results.get("error_kind") == "config" else EXIT_RUNTIME

    except ConfigError as e:
        print(f"\n❌ Invalid configuration: {e}")
        return EXIT_USAGE

    except KeyboardInterrupt:
        print("\n\n⚠️  Processing interrupted by user")
        return EXIT_RUNTIME

    except Exception as e:
        print(f"\n❌ Unexpected error: {e}")
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
