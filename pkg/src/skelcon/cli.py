"""Command-line entry point: ``skelcon {pretrain,eval,gen-synth}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
``SCD_RUN_DIR`` overrides the output root for every command.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, save_config
from .errors import CheckpointError, ConfigError, FormatError
from .synthetic import SyntheticParams, generate_synthetic

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
RUN_DIR_ENV = "SCD_RUN_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _output_root(args_out: str | None, default: str) -> Path:
    env = os.environ.get(RUN_DIR_ENV)
    if env:
        return Path(env)
    return Path(args_out) if args_out else Path(default)


def _load(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed).validate()
    return config


def write_snapshot(config: RunConfig, run_dir: Path) -> None:
    """``config.json`` plus ``config.sha256``, the hash every checkpoint header carries."""
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    (run_dir / "config.sha256").write_text(config.config_hash().hex() + "\n", encoding="utf-8")


def cmd_pretrain(args) -> int:
    from .training import Pretrainer

    config = _load(args)
    run_dir = _output_root(args.out, config.output_dir)
    config = config.replace(output_dir=str(run_dir))
    dataset = config.dataset.load()
    train, _ = dataset.split_by_subject(config.dataset.test_subjects)
    write_snapshot(config, run_dir)
    trainer = Pretrainer(config, train)
    trainer.run(run_dir=run_dir)
    print(f"pretrained {trainer.epoch} epochs; final loss {trainer.epoch_losses()[-1]:.4f}; "
          f"checkpoint {run_dir / 'checkpoint_final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .downstream import TASKS, evaluate, write_results

    if args.task not in TASKS:
        raise ConfigError(f"unknown task {args.task!r}; choose from {', '.join(TASKS)}", "task")
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required", "checkpoint")
    config = _load(args)
    try:
        results = evaluate(args.task, args.checkpoint, config, args.seed)
    except (CheckpointError, FileNotFoundError) as exc:
        raise ConfigError(f"cannot use checkpoint: {exc}", "checkpoint") from None
    run_dir = _output_root(args.out, config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"results_{args.task}.json"
    write_results(results, path)
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    from .formats import save_dataset

    params = {} if args.config is None else json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(params, dict):
        raise ConfigError("synthetic params must be a JSON object")
    params = params.get("dataset", {}).get("synthetic", params) if "dataset" in params else params
    for key in ("classes", "per_class"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    if args.seed is not None:
        params["seed"] = args.seed
    known = set(SyntheticParams.__dataclass_fields__)
    unknown = sorted(set(params) - known)
    if unknown:
        raise ConfigError("unknown field", unknown[0])
    dataset = generate_synthetic(SyntheticParams(**params))
    out = _output_root(args.out, "synthetic")
    manifest = save_dataset(out, dataset)
    print(f"wrote {len(dataset)} samples to {manifest.parent}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelcon", description="Skeleton contrastive pretraining and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="run directory (default: config output_dir)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="downstream evaluation of a checkpoint")
    p.add_argument("--config", required=True, help="run config JSON (dataset and protocol settings)")
    p.add_argument("--checkpoint", help="pretraining checkpoint")
    p.add_argument("--task", required=True, help="probe, retrieval, semi or transfer")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="directory for results JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset directory")
    p.add_argument("--config", help="JSON of synthetic params (or a run config)")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: ./synthetic)")
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
