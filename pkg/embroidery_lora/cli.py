"""
Embroidery LoRA CLI Module.

Command-line entry point: ``pairgen``, ``analyze``, ``train``, ``gen`` and
``eval`` subcommands sharing one config loader, seed and run directory.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from omegaconf import OmegaConf

from embroidery_lora import __version__
from embroidery_lora.analysis import (
    aggregate_reference_set,
    invert_reconstruct,
    pair_similarity,
    render_heatmap,
    select_style_blocks,
    write_block_manifest,
)
from embroidery_lora.backbone import Backbone, build_backbone
from embroidery_lora.captioning import Captioner, build_captioner
from embroidery_lora.config import ExperimentConfig, config_to_yaml, load_config
from embroidery_lora.errors import CheckpointError, ConfigError, EmbroideryLoraError
from embroidery_lora.fixtures import (
    synthetic_design,
    synthetic_embroidery,
    synthetic_pair,
)
from embroidery_lora.images import ImageArray, list_images, load_rgb, save_rgb
from embroidery_lora.inference import (
    GenerationMode,
    InferenceRequest,
    StyledView,
    apply_style_blocks,
    generate,
)
from embroidery_lora.lora import BlockPartition, load_checkpoint
from embroidery_lora.metrics import (
    BenchmarkCell,
    MetricReport,
    evaluate_directories,
    register_optional_backends,
    run_benchmark,
)
from embroidery_lora.pairgen import (
    PairOrigin,
    TrainingPair,
    content_prompt,
    find_pairs,
    load_pair,
    make_pair,
    save_pair,
)
from embroidery_lora.runs import LOG_FORMAT, RunRecord
from embroidery_lora.training import ContrastiveTrainer

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
ADAPTER_FILE = "adapter.safetensors"
REFERENCE_DIR = "reference"
EVAL_FIXTURE_OFFSET = 1000


class UsageError(EmbroideryLoraError):
    """Bad command-line arguments or missing inputs."""


def _images(path: Path) -> List[Tuple[str, ImageArray]]:
    files = [path] if path.is_file() else list_images(path)
    if not files:
        raise UsageError(f"no images found in {path}")
    return [(p.stem, load_rgb(p)) for p in files]


def _captioner(cfg: ExperimentConfig) -> Captioner:
    return build_captioner(
        cfg.pairgen.captioner, cfg.seed, cfg.pairgen.captioner_model
    )


def _fixture_pair(
    cfg: ExperimentConfig, captioner: Captioner, index: int = 0
) -> TrainingPair:
    embroidery, design = synthetic_pair(cfg.seed + index)
    caption = captioner.caption(embroidery)
    return TrainingPair.build(
        embroidery,
        design,
        content_prompt(caption),
        caption,
        PairOrigin.REFERENCE,
        cfg.pairgen.emb_token,
        fixture=cfg.seed + index,
    )


def _styled_view(
    backbone: Backbone, cfg: ExperimentConfig, adapter_path: Path
) -> StyledView:
    if adapter_path.is_dir():
        adapter_path = adapter_path / ADAPTER_FILE
    checkpoint = load_checkpoint(adapter_path, backbone.denoiser)
    if checkpoint.backbone != backbone.name:
        raise CheckpointError(
            f"adapter was trained on backbone '{checkpoint.backbone}', "
            f"not '{backbone.name}'"
        )
    partition = checkpoint.partition
    if partition is None:
        logger.warning("%s stores no block partition; using every block", adapter_path)
        partition = BlockPartition.everything(backbone.block_names)
    return apply_style_blocks(
        backbone, checkpoint.adapter, partition, cfg.inference.use_all_blocks
    )


def cmd_pairgen(
    args: argparse.Namespace, cfg: ExperimentConfig, run: RunRecord
) -> None:
    """Build reference pairs from style images (or seeded fixtures)."""
    if args.input:
        images = _images(Path(args.input))
    else:
        images = [
            (f"fixture_{i:02d}", synthetic_embroidery(cfg.seed + i))
            for i in range(args.fixtures)
        ]
    captioner = _captioner(cfg)
    for index, (name, image) in enumerate(images):
        pair = make_pair(image, captioner, cfg.pairgen, cfg.seed + index, args.caption)
        paths = save_pair(pair, run.path("pairs", name))
        run.add_artifacts(paths, prefix=f"pairs/{name}/")
        for warning in pair.metadata.get("warnings", []):
            run.details.setdefault("warnings", []).append(f"{name}: {warning}")
        logger.info("Pair %s: '%s'", name, pair.prompt_style)


def cmd_analyze(
    args: argparse.Namespace, cfg: ExperimentConfig, run: RunRecord
) -> None:
    """Block-wise similarity of style and content features over a reference set."""
    backbone = build_backbone(cfg.backbone, cfg.seed)
    acfg = cfg.analysis
    if args.pairs:
        pairs = [
            (d.name, load_pair(d)) for root in args.pairs for d in find_pairs(root)
        ]
        if not pairs:
            raise UsageError(f"no pair directories under {', '.join(args.pairs)}")
    else:
        captioner = _captioner(cfg)
        pairs = [
            (f"fixture_{i:02d}", _fixture_pair(cfg, captioner, i))
            for i in range(args.fixtures)
        ]

    matrices = []
    for name, pair in pairs:
        traces = []
        for image in (pair.style_image, pair.content_image):
            _, trace = invert_reconstruct(
                backbone,
                image,
                renoise_iters=acfg.renoise_iters,
                prompt=acfg.inversion_prompt,
                tolerance=acfg.residual_tolerance,
            )
            for warning in trace.metadata.get("warnings", []):
                run.details.setdefault("warnings", []).append(warning)
            traces.append(trace)
        matrix = pair_similarity(traces[0], traces[1], acfg.sections)
        csv_path = matrix.to_csv(run.path("similarity", f"{name}.csv"))
        run.add_artifact(f"similarity/{name}", csv_path)
        matrices.append(matrix)

    aggregated = aggregate_reference_set(matrices)
    partition = select_style_blocks(aggregated, acfg.k, acfg.selection_sections)
    run.add_artifact("similarity", aggregated.to_csv(run.path("similarity.csv")))
    run.add_artifact("heatmap", render_heatmap(aggregated, run.path("heatmap.png")))
    run.add_artifact(
        "blocks",
        write_block_manifest(
            run.path("blocks.yaml"),
            aggregated,
            partition,
            acfg.k,
            acfg.selection_sections,
            [name for name, _ in pairs],
        ),
    )
    run.details["style_blocks"] = list(partition.style_blocks)
    logger.info("Selected style blocks: %s", ", ".join(partition.style_blocks))


def cmd_train(
    args: argparse.Namespace, cfg: ExperimentConfig, run: RunRecord
) -> None:
    """Two-stage adapter training on one reference pair."""
    backbone = build_backbone(cfg.backbone, cfg.seed)
    if args.pair:
        found = find_pairs(args.pair)
        if len(found) != 1:
            raise UsageError(
                f"--pair must name exactly one pair directory: {args.pair}"
            )
        reference = load_pair(found[0])
    else:
        reference = _fixture_pair(cfg, _captioner(cfg))
    run.add_artifacts(
        save_pair(reference, run.path(REFERENCE_DIR)),
        prefix=f"{REFERENCE_DIR}/",
    )

    partition = None
    if args.blocks:
        data = OmegaConf.to_container(OmegaConf.load(args.blocks))
        if not isinstance(data, dict) or "style_blocks" not in data:
            raise UsageError(f"{args.blocks} is not a block manifest")
        partition = BlockPartition.of(data["style_blocks"], backbone.block_names)

    trainer = ContrastiveTrainer(backbone, cfg, output_dir=run.directory)
    result = trainer.train(reference, partition)
    run.add_artifacts(result.artifacts)
    for path in result.checkpoints:
        run.add_artifact(f"checkpoints/{path.stem}", path)
    run.details["style_blocks"] = list(result.partition.style_blocks)
    run.details["events"] = len(result.events)
    if result.complementary is not None:
        run.details["complementary"] = {
            "style_selected": len(result.complementary.style_selected),
            "final": len(result.complementary.final),
        }


def cmd_gen(
    args: argparse.Namespace, cfg: ExperimentConfig, run: RunRecord
) -> None:
    """One text- or image-conditioned generation with a trained adapter."""
    backbone = build_backbone(cfg.backbone, cfg.seed)
    view = _styled_view(backbone, cfg, Path(args.adapter))
    mode = GenerationMode(args.mode or cfg.inference.mode)
    input_image = None
    prompt = args.prompt
    if mode is GenerationMode.IMAGE:
        if not args.input:
            raise UsageError("--mode image needs --input")
        input_image = load_rgb(args.input)
        if prompt is None:
            prompt = content_prompt(_captioner(cfg).caption(input_image))
    elif prompt is None:
        raise UsageError("--mode text needs --prompt")

    strict = args.strict_boundary
    if strict is None:
        strict = cfg.inference.strict_boundary
    strength = cfg.inference.strength if args.strength is None else args.strength
    request = InferenceRequest(
        mode,
        prompt,
        input_image,
        strict_boundary=strict,
        strength=strength,
        seed=cfg.seed,
        emb_token=cfg.pairgen.emb_token,
        size=args.size,
    )
    result = generate(view, request, cfg.inference, cfg.backbone.eta, cfg.pairgen)
    out = run.path(args.out)
    run.add_artifact("image", save_rgb(result.image, out))
    manifest = out.with_suffix(".yaml")
    metadata = {**result.metadata, "adapter": str(args.adapter), "input": args.input}
    OmegaConf.save(OmegaConf.create(metadata), manifest)
    run.add_artifact("generation", manifest)
    logger.info("Wrote %s", out)


def cmd_eval(
    args: argparse.Namespace, cfg: ExperimentConfig, run: RunRecord
) -> None:
    """Benchmark a trained run, or score pre-generated images."""
    if args.external_metrics:
        registered = register_optional_backends()
        logger.info("External metrics: %s", ", ".join(registered) or "none")
    prompts = list(cfg.metrics.prompts)

    report: MetricReport
    if args.generated:
        if not args.reference:
            raise UsageError("--generated needs --reference")
        report = evaluate_directories(
            args.generated, args.reference, args.inputs, prompts, cfg.metrics
        )
    else:
        if not args.run:
            raise UsageError("eval needs --run or --generated")
        run_dir = Path(args.run)
        backbone = build_backbone(cfg.backbone, cfg.seed)
        view = _styled_view(backbone, cfg, run_dir)
        reference = load_pair(run_dir / REFERENCE_DIR).style_image
        if args.inputs:
            inputs = _images(Path(args.inputs))
        else:
            inputs = [
                (
                    f"design_{i:02d}",
                    synthetic_design(cfg.seed + EVAL_FIXTURE_OFFSET + i),
                )
                for i in range(args.fixtures)
            ]
        captioner = _captioner(cfg)

        def pipeline(cell: BenchmarkCell) -> ImageArray:
            if cell.input_image is None:
                request = InferenceRequest(
                    GenerationMode.TEXT,
                    cell.prompt,
                    seed=cfg.seed,
                    emb_token=cfg.pairgen.emb_token,
                    size=cell.reference.shape[0],
                )
            else:
                request = InferenceRequest(
                    GenerationMode.IMAGE,
                    content_prompt(captioner.caption(cell.input_image)),
                    cell.input_image,
                    strict_boundary=cfg.inference.strict_boundary,
                    strength=cfg.inference.strength,
                    seed=cfg.seed,
                    emb_token=cfg.pairgen.emb_token,
                )
            settings, eta = cfg.inference, cfg.backbone.eta
            return generate(view, request, settings, eta, cfg.pairgen).image

        report = run_benchmark(
            [(run_dir.name, reference)],
            inputs,
            prompts,
            pipeline,
            args.mode,
            cfg.metrics,
        )

    run.add_artifact("report_csv", report.to_csv(run.path("report.csv")))
    markdown = run.path("report.md")
    markdown.write_text(report.to_markdown(), encoding="utf-8")
    run.add_artifact("report_md", markdown)
    run.details["aggregates"] = report.formatted()
    run.details["failures"] = report.failures


Command = Callable[[argparse.Namespace, ExperimentConfig, RunRecord], None]

COMMANDS: Dict[str, Command] = {
    "pairgen": cmd_pairgen,
    "analyze": cmd_analyze,
    "train": cmd_train,
    "gen": cmd_gen,
    "eval": cmd_eval,
}

INPUT_ARGS = (
    "input",
    "pair",
    "blocks",
    "adapter",
    "run",
    "generated",
    "reference",
    "inputs",
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", default="toy", help="Config file or shipped preset (default: toy)"
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value, e.g. training.N=10 (repeatable)",
    )
    common.add_argument("--seed", type=int, help="Seed for every stochastic component")
    common.add_argument("--run-root", help="Directory that holds run directories")
    common.add_argument("--run-id", help="Run directory name (default: timestamped)")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level",
    )

    parser = argparse.ArgumentParser(
        prog="embroidery-lora",
        description="One-shot embroidery style adapters on a diffusion backbone",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pairgen", parents=[common], help="Build style/content pairs")
    p.add_argument("--input", help="Style image or directory of images")
    p.add_argument("--caption", help="Use this caption instead of the captioner")
    p.add_argument(
        "--fixtures", type=int, default=1, help="Fixture count without --input"
    )

    p = sub.add_parser("analyze", parents=[common], help="Select style blocks")
    p.add_argument(
        "--pairs", nargs="*", default=[], help="Pair directories or their roots"
    )
    p.add_argument(
        "--fixtures", type=int, default=1, help="Fixture pairs without --pairs"
    )

    p = sub.add_parser("train", parents=[common], help="Train a style adapter")
    p.add_argument("--pair", help="Reference pair directory")
    p.add_argument("--blocks", help="Block manifest from an analyze run")

    p = sub.add_parser("gen", parents=[common], help="Generate with a trained adapter")
    p.add_argument(
        "--adapter", required=True, help="Adapter archive or train run directory"
    )
    p.add_argument("--mode", choices=[m.value for m in GenerationMode])
    p.add_argument("--prompt", help="Content prompt; the style suffix is appended")
    p.add_argument("--input", help="Input design for image mode")
    boundary = p.add_mutually_exclusive_group()
    boundary.add_argument(
        "--strict-boundary", dest="strict_boundary", action="store_true", default=None
    )
    boundary.add_argument(
        "--loose-boundary", dest="strict_boundary", action="store_false"
    )
    p.add_argument("--strength", type=float, help="SDEdit strength in (0, 1]")
    p.add_argument("--size", type=int, default=64, help="Text-mode image side")
    p.add_argument("--out", default="generated.png", help="Output file inside the run")

    p = sub.add_parser("eval", parents=[common], help="Benchmark metrics")
    p.add_argument("--run", help="Train run directory")
    p.add_argument("--mode", choices=[m.value for m in GenerationMode], default="image")
    p.add_argument("--inputs", help="Directory of input designs")
    p.add_argument(
        "--fixtures", type=int, default=3, help="Fixture designs without --inputs"
    )
    p.add_argument("--generated", help="Directory of pre-generated images")
    p.add_argument("--reference", help="Reference image for --generated")
    p.add_argument(
        "--external-metrics",
        action="store_true",
        help="Register LPIPS / CLIP-Score when their packages are installed",
    )
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(getattr(logging, level))


def check_inputs(args: argparse.Namespace) -> None:
    for name in INPUT_ARGS:
        value = getattr(args, name, None)
        if value and not Path(value).exists():
            raise UsageError(f"--{name} not found: {value}")
    for root in getattr(args, "pairs", []):
        if not Path(root).exists():
            raise UsageError(f"--pairs not found: {root}")
    out = getattr(args, "out", None)
    if out and Path(out).is_absolute():
        raise UsageError("--out must be a path inside the run directory")


def _diagnose(command: str, message: str) -> None:
    first = message.splitlines()[0] if message else "unknown error"
    print(f"embroidery-lora {command}: error: {first}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command-line interface; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        check_inputs(args)
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        with RunRecord(args.command, cfg, args.run_root, args.run_id) as run:
            logger.info("Resolved config:\n%s", config_to_yaml(cfg))
            COMMANDS[args.command](args, cfg, run)
    except (ConfigError, UsageError) as e:
        _diagnose(args.command, str(e))
        return EXIT_USAGE
    except EmbroideryLoraError as e:
        _diagnose(args.command, str(e))
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("\nExiting...", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        _diagnose(args.command, f"{type(e).__name__}: {e}")
        return EXIT_FAILURE

    print(run.directory)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
