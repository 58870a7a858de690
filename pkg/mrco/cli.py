"""
Command-line entry point.

    mrco_experiments.py augment|train|sweep|eval|gradcheck [--config PATH] [--set key=value ...]

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from typing import Callable, Dict, List, Optional
import argparse
import json
import logging
import os
import sys

from .config import ExperimentConfig
from .exceptions import ConfigurationError, MRCoError, ValidationError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


class UsageError(ValidationError):
    """Raised for unknown subcommands or flags"""
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that reports usage errors by exception instead of exiting with code 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config value (repeatable, applied in order)')
    common.add_argument('--out-dir', help='output directory (default: $MRK_OUT_DIR or ./runs)')
    common.add_argument('--seeds', help='comma-separated seed list, e.g. 0,1,2')
    common.add_argument('--quiet', action='store_true', help='warnings only, no progress bars')

    parser = ArgumentParser(prog='mrco', description='Meta reweighting with contrastive learning')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('augment', parents=[common], help='build the augmented dataset')
    sub.add_parser('train', parents=[common], help='run one method over the seed list')
    sweep = sub.add_parser('sweep', parents=[common], help='hyperparameter grid')
    sweep.add_argument('--grid', required=True, help='JSON file or inline JSON object of value lists')
    evaluate = sub.add_parser('eval', parents=[common], help='score a checkpoint on a dataset')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True, help='TSV dataset with id, label, text_a[, text_b]')
    evaluate.add_argument('--vocab', help='vocabulary file (default: vocab_seed<k>.txt next to the checkpoint)')
    gradcheck = sub.add_parser('gradcheck', parents=[common], help='gradient verification suite')
    gradcheck.add_argument('--trials', type=int, help='random trials per check')
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """File, then ordered --set overrides, then flags; validated before returning"""
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    for assignment in args.set:
        config.apply_override(assignment)
    if args.out_dir:
        config.out_dir = args.out_dir
    if args.seeds:
        try:
            config.seeds = [int(s) for s in args.seeds.split(',') if s.strip()]
        except ValueError:
            raise ConfigurationError(f"--seeds must be comma-separated integers, got {args.seeds}")
    return config.validate()


def _save_effective_config(config: ExperimentConfig, args: argparse.Namespace) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, 'effective_config.json')
    config.save(path, args.set)
    return path


def cmd_augment(config: ExperimentConfig, args: argparse.Namespace) -> int:
    from .services.harness import prepare_data

    _save_effective_config(config, args)
    data = prepare_data(config)
    ratio = len(data.augmented) / max(1, len(data.train))
    print(f"{len(data.augmented)} augmented samples from {len(data.train)} raw (ratio {ratio:.2f}) "
          f"in {os.path.join(config.out_dir, 'data')}")
    return EXIT_OK


def cmd_train(config: ExperimentConfig, args: argparse.Namespace) -> int:
    from .services.harness import run_experiment

    _save_effective_config(config, args)
    results = run_experiment(config, progress=not args.quiet)
    for result in results.values():
        print(f"{result.method}: {result.metric} {result.mean:.4f} +/- {result.std:.4f} "
              f"({len(result.per_seed)} seeds)")
        for seed, (clean, flipped) in sorted(result.weight_separation.items()):
            print(f"  seed {seed}: mean weight clean {clean:.4f} / flipped {flipped:.4f}")
    return EXIT_OK


def cmd_sweep(config: ExperimentConfig, args: argparse.Namespace) -> int:
    from .services.harness import sweep

    if os.path.exists(args.grid):
        with open(args.grid, 'r', encoding='utf-8') as f:
            raw = f.read()
    else:
        raw = args.grid
    try:
        grid = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Invalid sweep grid: {str(e)}")
    if not isinstance(grid, dict):
        raise ConfigurationError("Sweep grid must be a JSON object of value lists")
    _save_effective_config(config, args)
    frame = sweep(config, grid, progress=not args.quiet)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_eval(config: ExperimentConfig, args: argparse.Namespace) -> int:
    from .services.harness import evaluate_checkpoint

    vocab_path = args.vocab
    if vocab_path is None:
        base = os.path.basename(args.checkpoint)
        vocab_path = os.path.join(os.path.dirname(args.checkpoint),
                                  base.replace('checkpoint_', 'vocab_').replace('.bin', '.txt'))
    scores = evaluate_checkpoint(args.checkpoint, vocab_path, args.data)
    for metric, value in scores.items():
        print(f"{metric}: {value:.4f}")
    return EXIT_OK


def cmd_gradcheck(config: ExperimentConfig, args: argparse.Namespace) -> int:
    from .services.verification import format_table, run_gradcheck_suite

    results = run_gradcheck_suite(args.trials or config.gradcheck_trials, seed=config.seeds[0])
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace], int]] = {
    'augment': cmd_augment,
    'train': cmd_train,
    'sweep': cmd_sweep,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
}


def parse_and_dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        force=True
    )
    try:
        config = load_config(args)
        return COMMANDS[args.command](config, args)
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except MRCoError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(parse_and_dispatch())
