"""
Command-line entry point: `cfld <command> [flags]`.

Usage errors exit with status 2. Runtime failures exit with status 1 and print one JSON line
`{"error": <type>, "message": <text>}` to stderr.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from cfld.common import services
from cfld.common.config import PRESETS, CfldConfig, load_config, parse_assignments, with_overrides

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file (default: $CFLD_CONFIG)")
    parser.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--seed", type=int)


def _add_sampling_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ckpt", type=Path, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--w-pose", type=float)
    parser.add_argument("--w-app", type=float)
    parser.add_argument("--ddim-steps", type=int)


def _lambdas(value: str) -> list[float]:
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfld", description="Coarse-to-fine latent diffusion for pose-guided synthesis")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("pretrain-codec", help="pretrain the latent codec")
    _add_config_options(command)
    command.add_argument("--out", type=Path, required=True)
    command.add_argument("--steps", type=int)
    command.add_argument("--loss-csv", type=Path)

    command = commands.add_parser("pretrain-backbone", help="pretrain the UNet base on codec latents")
    command.add_argument("--ckpt", type=Path, required=True)
    command.add_argument("--out", type=Path, required=True)
    command.add_argument("--steps", type=int)
    command.add_argument("--loss-csv", type=Path)

    command = commands.add_parser("train", help="train CFLD from a backbone checkpoint")
    command.add_argument("--ckpt", type=Path, required=True)
    command.add_argument("--out", type=Path, required=True)
    command.add_argument("--steps", type=int, help="total step count")
    command.add_argument("--resume", action="store_true", help="continue the CFLD run stored in --ckpt")
    command.add_argument("--loss-csv", type=Path)

    command = commands.add_parser("sample", help="generate the source person in a target pose")
    _add_sampling_options(command)
    command.add_argument("--src", type=Path, required=True)
    command.add_argument("--pose", type=Path, help="target pose map; omitted = pose dropped")
    command.add_argument("--out", type=Path, required=True)

    command = commands.add_parser("transfer", help="masked style transfer onto a reference image")
    _add_sampling_options(command)
    command.add_argument("--ref", type=Path, required=True)
    command.add_argument("--mask", type=Path, required=True)
    command.add_argument("--style", type=Path, required=True)
    command.add_argument("--pose", type=Path, required=True, help="pose map of the reference")
    command.add_argument("--out", type=Path, required=True)

    command = commands.add_parser("interpolate", help="blend two source styles")
    _add_sampling_options(command)
    command.add_argument("--src-a", type=Path, required=True)
    command.add_argument("--src-b", type=Path, required=True)
    command.add_argument("--pose", type=Path, required=True)
    command.add_argument("--lam", type=_lambdas, default=[0.5], help="weight(s) in [0, 1], comma-separated")
    command.add_argument("--out", type=Path, required=True)

    command = commands.add_parser("eval", help="PSNR/SSIM report on held-out pairs")
    _add_sampling_options(command)
    command.add_argument("--pairs", type=int)
    command.add_argument("--split", choices=["test", "train"], default="test")
    command.add_argument("--out", type=Path, required=True)

    command = commands.add_parser("attn-viz", help="grid of perception-refined decoder attention maps")
    command.add_argument("--ckpt", type=Path, required=True)
    command.add_argument("--src", type=Path, required=True)
    command.add_argument("--out", type=Path, required=True)

    command = commands.add_parser("export-data", help="write synthetic pairs as PNG files")
    _add_config_options(command)
    command.add_argument("--split", choices=["train", "test", "pretrain"], default="train")
    command.add_argument("--count", type=int)
    command.add_argument("--out", type=Path, required=True)

    command = commands.add_parser("selftest", help="run the invariant test-suite")
    command.add_argument("--slow", action="store_true", help="include slow statistical checks")

    command = commands.add_parser("defaults", help="print the effective configuration")
    _add_config_options(command)

    return parser


def resolve_config(args: argparse.Namespace) -> CfldConfig:
    """Preset, then config file, then `--set` assignments, then dedicated flags."""
    path = args.config if args.config is not None else services.config_path()
    config = load_config(path, parse_assignments(args.assignments), preset=args.preset)
    if args.seed is not None:
        config = with_overrides(config, {"seed": str(args.seed)})
    return config


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command; flows are imported lazily so `defaults` stays fast."""
    command = args.command
    if command == "defaults":
        print("\n".join(resolve_config(args).to_lines()))
        return EXIT_OK

    if command == "selftest":
        import pytest

        markers = "not acceptance" if args.slow else "not acceptance and not slow"
        return int(pytest.main(["-q", "-m", markers, str(Path(__file__).parent)]))

    if command == "pretrain-codec":
        from cfld.train.pretrain_codec import pretrain_codec_flow

        config = resolve_config(args)
        if args.steps is not None:
            config = with_overrides(config, {"codec_steps": str(args.steps)})
        pretrain_codec_flow(config=config, output=args.out, loss_csv=args.loss_csv)
    elif command == "pretrain-backbone":
        from cfld.train.pretrain_backbone import pretrain_backbone_flow

        pretrain_backbone_flow(checkpoint=args.ckpt, output=args.out, steps=args.steps, loss_csv=args.loss_csv)
    elif command == "train":
        from cfld.train.train_cfld import train_cfld_flow

        train_cfld_flow(
            checkpoint=args.ckpt, output=args.out, steps=args.steps, resume=args.resume, loss_csv=args.loss_csv
        )
    elif command == "sample":
        from cfld.sample.flows import sample_flow

        sample_flow(
            checkpoint=args.ckpt,
            source=args.src,
            pose=args.pose,
            output=args.out,
            seed=args.seed,
            w_pose=args.w_pose,
            w_app=args.w_app,
            steps=args.ddim_steps,
        )
    elif command == "transfer":
        from cfld.sample.flows import transfer_flow

        transfer_flow(
            checkpoint=args.ckpt,
            reference=args.ref,
            mask=args.mask,
            style=args.style,
            pose=args.pose,
            output=args.out,
            seed=args.seed,
            w_pose=args.w_pose,
            w_app=args.w_app,
            steps=args.ddim_steps,
        )
    elif command == "interpolate":
        from cfld.sample.flows import interpolate_flow

        interpolate_flow(
            checkpoint=args.ckpt,
            source_a=args.src_a,
            source_b=args.src_b,
            pose=args.pose,
            output=args.out,
            lams=args.lam,
            seed=args.seed,
            w_pose=args.w_pose,
            w_app=args.w_app,
            steps=args.ddim_steps,
        )
    elif command == "eval":
        from cfld.evaluate.evaluate import evaluate_flow

        evaluate_flow(
            checkpoint=args.ckpt,
            output=args.out,
            pairs=args.pairs,
            split=args.split,
            seed=args.seed,
            w_pose=args.w_pose,
            w_app=args.w_app,
            steps=args.ddim_steps,
        )
    elif command == "attn-viz":
        from cfld.sample.flows import attn_viz_flow

        attn_viz_flow(checkpoint=args.ckpt, source=args.src, output=args.out)
    elif command == "export-data":
        from cfld.extract.export_data import export_data_flow

        export_data_flow(config=resolve_config(args), split=args.split, output_dir=args.out, count=args.count)
    return EXIT_OK


def error_line(err: BaseException) -> str:
    return json.dumps({"error": type(err).__name__, "message": str(err)})


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_USAGE if exit_.code not in (0, None) else EXIT_OK
    try:
        return run(args)
    except Exception as err:
        print(error_line(err), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
