"""modellab command line: data, training, ablations, probes, masks, costs."""

import argparse
import dataclasses
import json
import logging
import pathlib
import sys
from typing import Any, Callable, Sequence

from modellab import (
    ablation,
    checkpoint,
    config,
    costs,
    data,
    masking,
    mllm,
    probes,
    train,
)
from modellab.lib import utils
from modellab.vision import VisionConfig

logger = logging.getLogger("modellab")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

LOG_LEVELS: tuple[str, ...] = ("DEBUG", "INFO", "WARNING", "ERROR")


class UsageError(Exception):
    """The command line is invalid."""


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() owns the exit
    codes.
    """

    def error(self, message: str) -> Any:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _emit(text: str | bytes, out: pathlib.Path | None) -> None:
    """Write to a file atomically, or to stdout when no file is given."""
    if out is not None:
        utils.atomic_write(out, text)
        logger.info("Wrote %s", out)
    elif isinstance(text, bytes):
        sys.stdout.buffer.write(text)
        sys.stdout.flush()
    else:
        print(text)


def _run_config(args: argparse.Namespace) -> config.RunConfig:
    """The run config with --seed applied on top."""
    cfg = config.load(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise config.ConfigError(
                f"seed must be a non-negative integer: {args.seed}")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _vision(cfg: mllm.ModelConfig) -> VisionConfig:
    if cfg.vision is None:
        raise ValueError("The synthetic task needs a model with a vision "
                         "encoder")
    return cfg.vision


def _dataset(
    args: argparse.Namespace,
    model_cfg: mllm.ModelConfig,
    run_cfg: config.RunConfig,
) -> list[data.SynthSample]:
    """Samples from --data, or generated from the run config's seed."""
    vocab = data.Vocab(model_cfg.vocab_size)
    if getattr(args, "data", None) is not None:
        _, samples = data.load_dataset(args.data, _vision(model_cfg), vocab)
        return samples
    return data.gen_dataset(run_cfg.seed, run_cfg.data, _vision(model_cfg),
                            vocab)


# --------------------------------------------------------------------------
# commands


def gen_data(args: argparse.Namespace) -> int:
    """Generate the synthetic dataset as JSON lines."""
    cfg = _run_config(args)
    vision = _vision(cfg.model)
    samples = data.gen_dataset(
        cfg.seed, cfg.data, vision, data.Vocab(cfg.model.vocab_size))

    header = {
        "seed": cfg.seed,
        "data": dataclasses.asdict(cfg.data),
        "vision": cfg.model.to_dict()["vision"],
        "vocab_size": cfg.model.vocab_size,
    }
    data.save_dataset(args.out, samples, header)
    print(f"{len(samples)} samples "
          f"({len(data.split(samples, 'eval'))} eval) -> {args.out}")
    return EXIT_OK


def train_cmd(args: argparse.Namespace) -> int:
    """Train one model through both stages, checkpointing each."""
    cfg = _run_config(args)
    model_cfg = cfg.model
    if args.variant:
        model_cfg = ablation.resolve_variants(
            [args.variant], cfg.model)[args.variant]

    samples = _dataset(args, model_cfg, cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    metrics = train.MetricsLog(args.metrics)

    result = train.run_pipeline(
        model_cfg, cfg.stages, samples, data.Vocab(model_cfg.vocab_size),
        cfg.seed, variant=args.variant or "", metrics=metrics,
        checkpoint_dir=args.out_dir)

    print(f"variant={args.variant or 'model'} seed={cfg.seed} "
          f"accuracy={result.evaluation.accuracy:.4f}")
    return EXIT_OK


def ablate(args: argparse.Namespace) -> int:
    """Run the ablation matrix and print the comparison table."""
    cfg = _run_config(args)
    variants = list(args.variants or ablation.TABLE_ROWS)
    if args.with_ablation and ablation.ABLATION_ROW not in variants:
        variants.append(ablation.ABLATION_ROW)

    samples = _dataset(args, cfg.model, cfg)
    table = ablation.run_ablation_matrix(
        cfg.model, cfg.stages, samples, data.Vocab(cfg.model.vocab_size),
        args.seeds, variants, metrics=train.MetricsLog(args.metrics))

    print(table.render())
    if args.out is not None:
        payload = {"data_seed": cfg.seed, **table.to_dict()}
        utils.atomic_write(args.out, json.dumps(payload, indent=2))
    return EXIT_OK


def _probe_one(
    model: mllm.MllmModel,
    sample: data.SynthSample,
    k: int,
) -> tuple[dict[str, probes.LensReport], dict[str, float]]:
    """Both lenses, and the share of visual tokens each translates into
    the colour word of their source patch.
    """
    vision = _vision(model.cfg)
    vocab = data.Vocab(model.cfg.vocab_size)
    batch = mllm.assemble(sample.qa_sample(vocab), model.cfg)
    expected = data.patch_colors(sample, vision, vocab)

    reports = {
        "input": probes.input_lens(model, batch, k),
        "output": probes.output_lens(model, batch, k),
    }
    translation = {
        lens: probes.translation_accuracy(report, expected)
        for lens, report in reports.items()
    }
    return reports, translation


def probe(args: argparse.Namespace) -> int:
    """Input and output lenses of one or two checkpoints on one sample."""
    cfg = _run_config(args)
    loaded = [checkpoint.load(path) for path in args.checkpoint]
    samples = _dataset(args, loaded[0][0].cfg, cfg)
    evals = data.split(samples, "eval") or samples
    if not 0 <= args.sample < len(evals):
        raise UsageError(
            f"--sample must lie in 0..{len(evals) - 1}, got {args.sample}")
    sample = evals[args.sample]

    records = []
    for path, (model, meta) in zip(args.checkpoint, loaded):
        reports, translation = _probe_one(model, sample, args.k)
        record = {
            "checkpoint": str(path),
            "meta": meta,
            "translation": translation,
            **{lens: report.to_dict() for lens, report in reports.items()},
        }
        records.append(record)
        print(f"{path}: translation input={record['translation']['input']:.3f}"
              f" output={record['translation']['output']:.3f}")
        if args.ppm_dir is not None:
            args.ppm_dir.mkdir(parents=True, exist_ok=True)
            for lens, report in reports.items():
                utils.atomic_write(
                    args.ppm_dir / f"{path.stem}-{lens}.ppm",
                    probes.render_ppm(report))

    if args.out is not None:
        payload = {"seed": cfg.seed, "sample": sample.index,
                   "checkpoints": records}
        utils.atomic_write(args.out, json.dumps(payload, indent=2))
    return EXIT_OK


def mask(args: argparse.Namespace) -> int:
    """Draw an attention mask, or report its entry counts."""
    built = masking.build_mask(args.layout, args.policy)
    if args.format == "json":
        text = json.dumps({
            "layout": dataclasses.asdict(args.layout),
            "policy": args.policy.value,
            "N": built.N,
            "allowed_count": built.allowed_count,
            "expected_allowed_count": masking.expected_allowed_count(
                args.layout, args.policy),
            "bypass_rows": sorted(built.bypass_rows),
        }, indent=2)
        _emit(text, args.out)
        return EXIT_OK

    rendered = masking.render_mask(built, args.format)
    _emit(rendered.decode("ascii") if args.format == "ascii" else rendered,
          args.out)
    return EXIT_OK


def cost(args: argparse.Namespace) -> int:
    """Analytic parameters and FLOPs for a dims preset."""
    if args.dims == "config":
        llm_dims, vision_dims = costs.dims_from_config(
            _run_config(args).model)
    elif args.dims.strip().lower() in costs.presets():
        llm_dims, vision_dims = costs.load_dims(args.dims)
    else:
        raise UsageError(
            f"Unknown --dims {args.dims!r}. Choose from "
            f"{costs.presets() + ['config']}")

    text_tokens = args.seq - args.system - args.visual
    if text_tokens < 0:
        raise UsageError(
            f"--seq {args.seq} is shorter than --system {args.system} plus "
            f"--visual {args.visual}")
    layout = masking.TokenLayout(args.system, args.visual, text_tokens)

    conventions = costs.Conventions(mlp_matmuls=args.mlp_matmuls)
    report = costs.count_flops(
        llm_dims, layout, args.policy, conventions, vision_dims, args.taps,
        include_encoder=args.encoder)
    payload = {
        "dims": args.dims,
        **report.to_dict(),
        "param_delta": costs.param_delta(llm_dims, vision_dims, args.taps),
    }

    if args.out is not None:
        utils.atomic_write(args.out, json.dumps(payload, indent=2))
    if args.format == "table":
        print(costs.render_flops_table({args.policy.value: report}))
        print()
        print(costs.render_params_table(payload["param_delta"]))
    else:
        print(json.dumps(payload, indent=2))
    return EXIT_OK


def eval_cmd(args: argparse.Namespace) -> int:
    """Greedy-decode the eval split with a checkpoint."""
    cfg = _run_config(args)
    model, meta = checkpoint.load(args.checkpoint)
    vocab = data.Vocab(model.cfg.vocab_size)
    evals = data.split(_dataset(args, model.cfg, cfg), "eval")
    if not evals:
        raise ValueError("The dataset has no eval split")

    result = train.evaluate(model, [s.qa_sample(vocab) for s in evals])
    summary = {
        "variant": meta.get("variant", ""),
        "seed": meta.get("seed"),
        "data_seed": cfg.seed,
        "accuracy": result.accuracy,
    }
    if args.out is not None:
        lines = [json.dumps(r, sort_keys=True) for r in result.records]
        lines.append(json.dumps(summary, sort_keys=True))
        utils.atomic_write(args.out, "".join(f"{line}\n" for line in lines))

    print(f"accuracy={result.accuracy:.4f} "
          f"({sum(r['correct'] for r in result.records)}/"
          f"{len(result.records)})")
    return EXIT_OK


DISPATCH: dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": gen_data,
    "train": train_cmd,
    "ablate": ablate,
    "probe": probe,
    "mask": mask,
    "cost": cost,
    "eval": eval_cmd,
}


# --------------------------------------------------------------------------
# argument parsing


def _layout(token: str) -> masking.TokenLayout:
    try:
        return masking.TokenLayout.parse(token)
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def _policy(token: str) -> masking.MaskPolicy:
    try:
        return masking.MaskPolicy.parse(token)
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def _int_list(token: str) -> list[int]:
    try:
        values = [int(part) for part in token.split(",") if part.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(
            f"Expected comma separated integers, got {token!r}") from error
    if not values:
        raise argparse.ArgumentTypeError(
            f"Expected comma separated integers, got {token!r}")
    return values


def _name_list(token: str) -> list[str]:
    names = [part.strip() for part in token.split(",") if part.strip()]
    if not names:
        raise argparse.ArgumentTypeError(
            f"Expected comma separated names, got {token!r}")
    return names


def _common(parser: argparse.ArgumentParser) -> None:
    """Flags every subcommand takes."""
    parser.add_argument(
        "--config",
        type=pathlib.Path,
        help="YAML run config; defaults are used when omitted",
    )
    parser.add_argument(
        "--seed",
        type=int,
        help="Overrides the seed of the run config",
    )
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        type=str.upper,
        default="WARNING",
        help="Logging level (default WARNING)",
    )
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Shorthand for --log-level INFO",
    )


def cli(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments.

    :param argv: arguments without the program name, sys.argv when None
    :return: parsed CLI args
    :rtype: argparse.Namespace
    :raises UsageError: on an invalid command line
    """
    parser = _Parser(
        prog="modellab",
        description="Desk-scale multimodal transformer lab")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    sub = commands.add_parser("gen-data", help="Generate the dataset")
    _common(sub)
    sub.add_argument("--out", type=pathlib.Path, required=True,
                     help="Dataset file (JSON lines) to write")

    sub = commands.add_parser("train", help="Train through both stages")
    _common(sub)
    sub.add_argument("--data", type=pathlib.Path,
                     help="Dataset file; generated from the seed otherwise")
    sub.add_argument("--variant", choices=sorted(ablation.CATALOGUE),
                     help="Apply a catalogue variant to the config's model")
    sub.add_argument("--out-dir", type=pathlib.Path, required=True,
                     help="Directory receiving one checkpoint per stage")
    sub.add_argument("--metrics", type=pathlib.Path,
                     help="JSON lines metrics file to append to")

    sub = commands.add_parser("ablate", help="Run the ablation matrix")
    _common(sub)
    sub.add_argument("--data", type=pathlib.Path,
                     help="Dataset file; generated from the seed otherwise")
    sub.add_argument("--variants", type=_name_list,
                     help="Comma separated variants (default: table rows)")
    sub.add_argument("--with-ablation", action="store_true",
                     help="Add the no-visual-attention row")
    sub.add_argument("--seeds", type=_int_list, default=[0, 1, 2],
                     help="Comma separated training seeds (default 0,1,2)")
    sub.add_argument("--out", type=pathlib.Path,
                     help="JSON file receiving the table")
    sub.add_argument("--metrics", type=pathlib.Path,
                     help="JSON lines metrics file to append to")

    sub = commands.add_parser("probe", help="Logit lenses on visual tokens")
    _common(sub)
    sub.add_argument("--checkpoint", type=pathlib.Path, action="append",
                     required=True,
                     help="Checkpoint to probe; give twice to compare")
    sub.add_argument("--data", type=pathlib.Path,
                     help="Dataset file; generated from the seed otherwise")
    sub.add_argument("--sample", type=int, default=0,
                     help="Index into the eval split (default 0)")
    sub.add_argument("--k", type=int, default=5,
                     help="Words per visual token (default 5)")
    sub.add_argument("--out", type=pathlib.Path,
                     help="JSON file receiving the reports")
    sub.add_argument("--ppm-dir", type=pathlib.Path,
                     help="Directory receiving PPM patch-grid overlays")

    sub = commands.add_parser("mask", help="Draw an attention mask")
    _common(sub)
    sub.add_argument("--layout", type=_layout, required=True,
                     help="m,n,o: system, visual and user token counts")
    sub.add_argument("--policy", type=_policy, default="causal",
                     help="causal, bidir or no-visual-attention")
    sub.add_argument("--format", choices=("ascii", "pgm", "json"),
                     default="ascii")
    sub.add_argument("--out", type=pathlib.Path,
                     help="File to write; stdout otherwise")

    sub = commands.add_parser("cost", help="Analytic params and FLOPs")
    _common(sub)
    sub.add_argument("--dims", default="qwen2.5-3b",
                     help="Preset from the dims file, or 'config'")
    sub.add_argument("--seq", type=int, required=True,
                     help="Sequence length N")
    sub.add_argument("--visual", type=int, default=0,
                     help="Visual tokens n")
    sub.add_argument("--system", type=int, default=0,
                     help="System tokens m before the visual tokens")
    sub.add_argument("--policy", type=_policy, default="causal",
                     help="causal, bidir or no-visual-attention")
    sub.add_argument("--taps", type=int, default=3,
                     help="Tapped encoder depths K (default 3)")
    sub.add_argument("--mlp-matmuls", type=int, default=2,
                     help="Matmuls priced per MLP block (default 2)")
    sub.add_argument("--encoder", action="store_true",
                     help="Include one vision encoder pass")
    sub.add_argument("--format", choices=("json", "table"), default="json")
    sub.add_argument("--out", type=pathlib.Path,
                     help="JSON file receiving the report")

    sub = commands.add_parser("eval", help="Evaluate a checkpoint")
    _common(sub)
    sub.add_argument("--checkpoint", type=pathlib.Path, required=True)
    sub.add_argument("--data", type=pathlib.Path,
                     help="Dataset file; generated from the seed otherwise")
    sub.add_argument("--out", type=pathlib.Path,
                     help="JSON lines file: per-sample records, then the "
                          "summary")

    args = parser.parse_args(argv)
    if args.command == "probe" and len(args.checkpoint) > 2:
        parser.error("probe compares at most two checkpoints")
    return args


def main(argv: Sequence[str] | None = None) -> int:
    """Main function.

    :param argv: arguments without the program name
    :returns: 0 on success, 1 on a usage or config error, 2 when the run
        itself fails
    :rtype: int
    """
    try:
        args = cli(argv)
        utils.worker_threads()
    except UsageError as error:
        print(error, file=sys.stderr)
        return EXIT_USAGE
    except ValueError as error:
        print(error, file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level="INFO" if args.verbose else args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return DISPATCH[args.command](args)
    except (UsageError, config.ConfigError) as error:
        print(error, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as error:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(error, file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
