"""
Command line entry point.

    python cli.py train-sampler --config sampler.cfg --set iterations=2000
    python cli.py train-refiner --config refiner.cfg --sampler runs/sampler_latest.pt
    python cli.py infer --config infer.cfg --normal n.png --partial t.png --mask m.png --out out/
    python cli.py prepare-data --spec fixtures.cfg --out fixtures/
    python cli.py evaluate --pred out/ --gt fixtures/textures --strict

Exit codes: 0 success, 1 aborted run, 2 usage or configuration error, 3 unmatched files (--strict).
"""

import sys, argparse, logging, pydantic
import modules.training as training, modules.inference as inference, modules.metrics as metrics, modules.fixtures as fixtures
import utils.images as images

from typing import List, Optional
from modules.types import InvalidInputError, ConfigurationError, FixtureError, CheckpointVersionError, NonFiniteLossError
from utils.config import load_config


logger = logging.getLogger("texgen")

EXIT_ABORT = 1
EXIT_USAGE = 2
EXIT_UNMATCHED = 3


def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="Flat 'key = value' config file.")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override one config key.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texgen", description="Single-image UV texture completion.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train-sampler", help="Train SamplerNet under the curriculum.")
    _add_config_args(p)
    p.add_argument("--resume", help="Sampler checkpoint to resume from.")

    p = commands.add_parser("train-refiner", help="Train RefinerNet against a frozen sampler.")
    _add_config_args(p)
    p.add_argument("--sampler", required=True, help="Sampler checkpoint.")

    p = commands.add_parser("infer", help="Complete one texture.")
    _add_config_args(p)
    p.add_argument("--sampler", help="Sampler checkpoint (overrides the config).")
    p.add_argument("--refiner", help="Refiner checkpoint (overrides the config).")
    p.add_argument("--normal", required=True)
    p.add_argument("--partial", help="Partial texture (with --mask).")
    p.add_argument("--mask")
    p.add_argument("--image", help="Photo (with --iuv).")
    p.add_argument("--iuv", help="16-bit IUV map of the photo.")
    p.add_argument("--no-refiner", action="store_true", help="Return the sampled texture only.")
    p.add_argument("--blend-override", type=float, help="Constant blend mask in [0,1].")
    p.add_argument("--device")
    p.add_argument("--out", required=True, help="Directory for t_final.png and the intermediates.")

    p = commands.add_parser("prepare-data", help="Generate a procedural fixture set.")
    p.add_argument("--spec", help="Flat 'key = value' FixtureSpec file.")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)

    p = commands.add_parser("evaluate", help="Score predicted textures against ground truth.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--strict", action="store_true", help="Fail when a file has no counterpart.")
    p.add_argument("--extractor", default="random", choices=["random", "vgg19"])
    p.add_argument("--extractor-weights")
    p.add_argument("--out", help="Directory for metrics.csv and metrics.json.")

    return parser


def infer_config(args: argparse.Namespace) -> inference.InferConfig:
    """Config file and --set values, then the dedicated flags on top."""
    config = load_config(inference.InferConfig, args.config, args.overrides)
    flags = {"sampler": args.sampler, "refiner": args.refiner, "device": args.device, "blend_override": args.blend_override}
    updates = {key: value for key, value in flags.items() if value is not None}
    if args.no_refiner:
        updates["use_refiner"] = False
    try:
        config = inference.InferConfig.model_validate({**config.model_dump(), **updates})
    except pydantic.ValidationError as e:
        raise ConfigurationError(f"Invalid InferConfig: {e}") from e
    if not config.sampler:
        raise ConfigurationError("No sampler checkpoint: pass --sampler or set sampler in the config.")
    return config


def run(args: argparse.Namespace) -> int:
    if args.command == "train-sampler":
        config = load_config(training.TrainConfig, args.config, args.overrides)
        result = training.train_sampler(config, resume=args.resume)
        print(result.checkpoint)

    elif args.command == "train-refiner":
        config = load_config(training.TrainConfig, args.config, args.overrides)
        result = training.train_refiner(config, args.sampler)
        print(result.checkpoint)

    elif args.command == "infer":
        config = infer_config(args)
        kwargs = {}
        if args.image:
            kwargs["image"] = images.read_texture(args.image)
            kwargs["iuv"] = images.read_iuv(args.iuv) if args.iuv else None
        elif args.partial and args.mask:
            kwargs["partial"] = images.read_texture(args.partial)
            kwargs["mask"] = images.read_mask(args.mask)
        else:
            raise InvalidInputError("Pass --image with --iuv, or --partial with --mask.")
        inference.infer(
            images.read_normal(args.normal), config.sampler, config.refiner,
            use_refiner=config.use_refiner, blend_override=config.blend_override, out_dir=args.out, device=config.device, **kwargs,
        )

    elif args.command == "prepare-data":
        spec = load_config(fixtures.FixtureSpec, args.spec, args.overrides, environ={})
        manifest = fixtures.generate_fixtures(spec, args.out)
        print(f"{len(manifest.samples)} fixtures written to {args.out}")

    elif args.command == "evaluate":
        config = metrics.EvalConfig(strict=args.strict, extractor=args.extractor, extractor_weights=args.extractor_weights)
        report = metrics.evaluate(args.pred, args.gt, config)
        if args.out:
            metrics.write_report(report, args.out)
        print(f"{len(report.samples)} samples  PSNR {report.mean_psnr:.4f} dB  SSIM {report.mean_ssim:.4f}  perceptual {report.mean_perceptual:.4f}")
        for name in report.unmatched:
            print(f"unmatched: {name}", file=sys.stderr)
        if report.failed:
            return EXIT_UNMATCHED

    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except NonFiniteLossError as e:
        logger.error("%s", e)
        return EXIT_ABORT
    except (ConfigurationError, InvalidInputError, CheckpointVersionError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except FileNotFoundError as e:
        # FixtureError included
        logger.error("%s", e)
        return EXIT_ABORT if isinstance(e, FixtureError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
