"""Command-line interface for mherlab: training, aggregation, plots and campaigns."""

import argparse
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .config import Algo, Config, ConfigurationError, EnvName, RelabelMode
from .envs import GoalEnvError
from .harness import RELABEL_DUMP_FILE, TrainingError, run_campaign
from .main import TrainingSession
from .metrics import AggregateStats, MetricsError, aggregate_stats, plot_aggregate
from .replay import ReplayError
from .utils import read_csv_rows, setup_logging

SWEEP_PARAMETERS = {'alpha': float, 'n_mbr_steps': int}


def _handle_interrupt(message: str = "Operation cancelled by user") -> None:
    print(f"\n{message}")
    sys.exit(130)


def _train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Map train flags onto run settings; unset flags are left to the config file."""
    return {
        'env': args.env,
        'algo': args.algo,
        'alpha': args.alpha,
        'n_mbr_steps': args.n_steps,
        'relabel_mode': args.relabel,
        'seed': args.seed,
        'epochs': args.epochs,
        'output_dir': args.out,
        'mve_horizon': args.mve_horizon,
        'model_layers': args.model_layers,
        'target_clip': False if args.no_target_clip else None,
        'normalize_obs': False if args.no_obs_norm else None,
        'dump_buffer': True if args.dump_buffer else None,
    }


class CLI:
    """Command-line interface for training runs and their results."""

    def train(self, config_file: Optional[str], overrides: Dict[str, Any]) -> Path:
        """Train one run; returns its directory."""
        with TrainingSession(config_file, overrides, handle_signals=True) as session:
            rows = session.run()
        final = rows[-1] if rows else None
        print(f"Run directory: {session.run_dir}")
        if final is not None:
            print(f"Epoch {final.epoch}: success rate {final.success_rate:.3f}, "
                  f"mean final distance {final.mean_final_distance:.3f}")
        return session.run_dir

    def aggregate(self, runs: Sequence[str], out: str, metric: str = 'success_rate') -> AggregateStats:
        """Aggregate run directories (or metrics CSVs) into one per-epoch CSV."""
        stats = aggregate_stats(runs, metric=metric)
        stats.write_csv(out)
        print(f"Aggregated {stats.n_seeds} runs into {out}")
        print(f"Area under curve: median {stats.auc_median:.4f} over {stats.n_seeds} seeds")
        return stats

    def plot(self, aggregates: Sequence[str], out: str, labels: Optional[Sequence[str]] = None) -> None:
        """Plot one or more aggregate CSVs as SVG."""
        if labels and len(labels) != len(aggregates):
            raise MetricsError("Give one label per aggregate file")
        curves = {}
        for i, path in enumerate(aggregates):
            label = labels[i] if labels else Path(path).stem
            curves[label] = AggregateStats.read_csv(path)
        plot_aggregate(curves, out)
        print(f"Wrote {out}")

    def dump_goals(self, run: str, out: str, epochs: Optional[Sequence[int]] = None) -> int:
        """Export the relabel-goal dump of a run, optionally for some epochs only."""
        source = Path(run) / RELABEL_DUMP_FILE
        if not source.exists():
            raise MetricsError(f"No relabel dump in {run}")
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        if not epochs:
            shutil.copyfile(source, out)
            count = len(read_csv_rows(source))
        else:
            wanted = {str(e) for e in epochs}
            with open(source, encoding='utf-8') as src, open(out, 'w', encoding='utf-8') as dst:
                header = src.readline()
                dst.write(header)
                count = 0
                for line in src:
                    if line.split(',', 1)[0] in wanted:
                        dst.write(line)
                        count += 1
        print(f"Wrote {count} relabeled goals to {out}")
        return count

    def campaign(
        self,
        config_file: Optional[str],
        overrides: Dict[str, Any],
        algos: Sequence[str],
        seeds: Sequence[int],
        out: str,
        sweep: Optional[str],
        sweep_values: Sequence[str],
        workers: int
    ) -> None:
        """Run algorithms (and optionally a parameter sweep) over several seeds."""
        config = Config(config_file, overrides=overrides)
        setup_logging(
            log_file=config.get('log_file'),
            log_level=config['log_level'],
            log_dir=config.get('log_dir'),
        )
        values: List = []
        if sweep is not None:
            if sweep not in SWEEP_PARAMETERS:
                raise ConfigurationError(
                    f"Cannot sweep {sweep}; choose one of {', '.join(SWEEP_PARAMETERS)}"
                )
            if not sweep_values:
                raise ConfigurationError("A sweep needs --values")
            try:
                values = [SWEEP_PARAMETERS[sweep](v) for v in sweep_values]
            except ValueError as e:
                raise ConfigurationError(f"Invalid sweep value: {e}")
        for algo in algos:
            if not Algo.is_valid(algo):
                raise ConfigurationError(f"Invalid algo: {algo!r}")
        results = run_campaign(
            config.run, algos, seeds, out,
            sweep=sweep, sweep_values=values, workers=workers,
            log_level=config['log_level'],
            agent_settings=config.agent_settings,
        )
        for label, stats in results.items():
            print(f"{label}: final median {stats.median[-1]:.3f}, "
                  f"AUC median {stats.auc_median:.4f} ({stats.n_seeds} seeds)")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='JSON or YAML run configuration file')
    parser.add_argument('--env', choices=EnvName.ALL, help='Environment')
    parser.add_argument('--alpha', type=float, help='Weight of the supervised actor term')
    parser.add_argument('--n-steps', type=int, help='Model rollout depth for relabeling')
    parser.add_argument('--relabel', choices=RelabelMode.ALL, help='Relabel strategy')
    parser.add_argument('--epochs', type=int, help='Number of epochs')
    parser.add_argument('--out', help='Output directory')
    parser.add_argument('--mve-horizon', type=int, help='Value-expansion horizon for --algo mve')
    parser.add_argument('--model-layers', type=int, help='Hidden layers of the dynamics model')
    parser.add_argument('--no-target-clip', action='store_true', help='Do not clip critic targets')
    parser.add_argument('--no-obs-norm', action='store_true', help='Do not normalize network inputs')
    parser.add_argument('--dump-buffer', action='store_true', help='Write the replay buffer at the end')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mherlab',
        description='Goal-conditioned RL with hindsight and model-based relabeling'
    )
    subparsers = parser.add_subparsers(dest='command', help='Commands')

    train_parser = subparsers.add_parser('train', help='Train one run')
    _add_run_flags(train_parser)
    train_parser.add_argument('--algo', choices=Algo.ALL, help='Algorithm')
    train_parser.add_argument('--seed', type=int, help='Master random seed')

    aggregate_parser = subparsers.add_parser('aggregate', help='Aggregate runs across seeds')
    aggregate_parser.add_argument('--runs', nargs='+', required=True, help='Run directories or metrics CSVs')
    aggregate_parser.add_argument('--out', required=True, help='Aggregate CSV to write')
    aggregate_parser.add_argument('--metric', default='success_rate', help='Metric column to aggregate')

    plot_parser = subparsers.add_parser('plot', help='Plot aggregate CSVs as SVG')
    plot_parser.add_argument('--aggregate', nargs='+', required=True, help='Aggregate CSV file(s)')
    plot_parser.add_argument('--labels', nargs='+', help='Curve labels, one per file')
    plot_parser.add_argument('--out', required=True, help='SVG file to write')

    dump_parser = subparsers.add_parser('dump-goals', help='Export relabeled goals of a run')
    dump_parser.add_argument('--run', required=True, help='Run directory')
    dump_parser.add_argument('--out', required=True, help='CSV file to write')
    dump_parser.add_argument('--epochs', nargs='+', type=int, dest='dump_epochs', help='Only these epochs')

    campaign_parser = subparsers.add_parser('campaign', help='Run algorithms over several seeds')
    _add_run_flags(campaign_parser)
    campaign_parser.add_argument('--algos', nargs='+', default=[Algo.MHER, Algo.HER, Algo.DDPG],
                                 help='Algorithms to compare')
    campaign_parser.add_argument('--seeds', nargs='+', type=int, default=[0, 1, 2, 3, 4],
                                 help='Seeds per algorithm')
    campaign_parser.add_argument('--sweep', choices=sorted(SWEEP_PARAMETERS), help='Parameter to sweep')
    campaign_parser.add_argument('--values', nargs='+', default=[], help='Sweep values')
    campaign_parser.add_argument('--workers', type=int, default=1, help='Parallel worker processes')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main entry point for the CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    cli = CLI()

    try:
        if args.command == 'train':
            cli.train(args.config, _train_overrides(args))
        elif args.command == 'aggregate':
            cli.aggregate(args.runs, args.out, args.metric)
        elif args.command == 'plot':
            cli.plot(args.aggregate, args.out, args.labels)
        elif args.command == 'dump-goals':
            cli.dump_goals(args.run, args.out, args.dump_epochs)
        elif args.command == 'campaign':
            args.algo = None
            args.seed = None
            if args.workers < 1:
                raise ConfigurationError("--workers must be at least 1")
            cli.campaign(
                args.config, _train_overrides(args), args.algos, args.seeds, args.out or 'campaign',
                args.sweep, args.values, args.workers,
            )
        else:
            parser.print_help()
    except KeyboardInterrupt:
        _handle_interrupt()
    except (ConfigurationError, TrainingError, MetricsError, GoalEnvError, ReplayError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
