"""Per-epoch run metrics, seed aggregation and learning-curve plots.

Quantiles use linear interpolation between order statistics (numpy's
default ``linear`` method): for sorted values x_0..x_{n-1} the q-quantile is
x_i + (h - i)(x_{i+1} - x_i) with h = q(n - 1) and i = floor(h).
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .utils import append_csv_rows, read_csv_rows  # noqa: E402

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
AGGREGATE_HEADER = ('epoch', 'median', 'q25', 'q75', 'n_seeds')


class MetricsError(Exception):
    """Raised for unreadable or inconsistent metric files."""
    pass


@dataclass(frozen=True)
class EpochMetrics:
    """One row of a run's metrics CSV. Field order is the CSV column order."""

    epoch: int
    env_steps: int
    success_rate: float
    mean_final_distance: float
    expected_distance: float
    critic_loss: float
    actor_q_term: float
    sl_loss: float
    model_loss: float
    mean_relabel_goal_distance: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise MetricsError(f"success_rate out of [0, 1]: {self.success_rate}")

    def as_row(self) -> List:
        return [
            getattr(self, f.name) if f.type is int else float(getattr(self, f.name))
            for f in fields(self)
        ]

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> 'EpochMetrics':
        try:
            return cls(**{
                f.name: int(row[f.name]) if f.type is int else float(row[f.name])
                for f in fields(cls)
            })
        except (KeyError, ValueError) as e:
            raise MetricsError(f"Malformed metrics row {row}: {e}")


METRICS_HEADER = tuple(f.name for f in fields(EpochMetrics))


class RunMetrics:
    """Metrics CSV of one run; each recorded epoch is appended immediately."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.rows: List[EpochMetrics] = []

    def record(self, row: EpochMetrics) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise MetricsError(f"Epoch {row.epoch} recorded after epoch {self.rows[-1].epoch}")
        append_csv_rows(self.path, METRICS_HEADER, [row.as_row()])
        self.rows.append(row)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'RunMetrics':
        """Read a metrics CSV (or the one inside a run directory)."""
        path = Path(path)
        if path.is_dir():
            path = path / METRICS_FILE
        if not path.exists():
            raise MetricsError(f"Metrics file not found: {path}")
        metrics = cls(path)
        metrics.rows = [EpochMetrics.from_row(row) for row in read_csv_rows(path)]
        return metrics

    def column(self, name: str) -> np.ndarray:
        if name not in METRICS_HEADER:
            raise MetricsError(f"Unknown metric: {name}")
        return np.array([getattr(row, name) for row in self.rows], dtype=np.float64)

    @property
    def epochs(self) -> List[int]:
        return [row.epoch for row in self.rows]


@dataclass(frozen=True, eq=False)
class AggregateStats:
    """Per-epoch median and interquartile range across seeds.

    ``auc`` holds each seed's mean value over epochs, in the order of
    ``sources``.
    """

    metric: str
    epochs: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    n_seeds: int
    sources: tuple = ()
    auc: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def auc_median(self) -> float:
        return float(np.median(self.auc)) if self.auc.size else float('nan')

    def write_csv(self, path: Union[str, Path]) -> None:
        """Write the aggregate CSV and a JSON summary with the area under each curve."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            path.unlink()
        append_csv_rows(path, AGGREGATE_HEADER, [
            [int(e), float(m), float(lo), float(hi), self.n_seeds]
            for e, m, lo, hi in zip(self.epochs, self.median, self.q25, self.q75)
        ])
        with open(path.with_suffix('.json'), 'w') as f:
            json.dump({
                'metric': self.metric,
                'n_seeds': self.n_seeds,
                'sources': list(self.sources),
                'auc': [float(v) for v in self.auc],
                'auc_median': self.auc_median,
            }, f, indent=2)

    @classmethod
    def read_csv(cls, path: Union[str, Path], metric: str = 'success_rate') -> 'AggregateStats':
        path = Path(path)
        if not path.exists():
            raise MetricsError(f"Aggregate file not found: {path}")
        rows = read_csv_rows(path)
        if not rows:
            raise MetricsError(f"Aggregate file is empty: {path}")
        try:
            columns = {name: np.array([float(r[name]) for r in rows]) for name in AGGREGATE_HEADER}
        except (KeyError, ValueError) as e:
            raise MetricsError(f"Malformed aggregate file {path}: {e}")
        summary = path.with_suffix('.json')
        extra = {}
        if summary.exists():
            with open(summary) as f:
                meta = json.load(f)
            extra = {'sources': tuple(meta.get('sources', ())), 'auc': np.array(meta.get('auc', []))}
            metric = meta.get('metric', metric)
        return cls(
            metric=metric,
            epochs=columns['epoch'].astype(np.int64),
            median=columns['median'],
            q25=columns['q25'],
            q75=columns['q75'],
            n_seeds=int(columns['n_seeds'][0]),
            **extra,
        )


def aggregate_stats(
    metric_files: Sequence[Union[str, Path]],
    metric: str = 'success_rate'
) -> AggregateStats:
    """Aggregate one metric across seeds.

    Args:
        metric_files: Metrics CSVs or run directories, one per seed
        metric: Column to aggregate

    Returns:
        Per-epoch median and quartiles plus each seed's area under the curve

    Raises:
        MetricsError: If no files are given, a file is empty, or epochs do not line up
    """
    if not metric_files:
        raise MetricsError("No metric files to aggregate")
    runs = sorted((RunMetrics.load(p) for p in metric_files), key=lambda r: str(r.path))
    epochs = runs[0].epochs
    if not epochs:
        raise MetricsError(f"No epochs in {runs[0].path}")
    for run in runs[1:]:
        if run.epochs != epochs:
            raise MetricsError(
                f"Epochs of {run.path} do not match {runs[0].path}"
            )
    values = np.stack([run.column(metric) for run in runs])
    q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75], axis=0, method='linear')
    stats = AggregateStats(
        metric=metric,
        epochs=np.array(epochs, dtype=np.int64),
        median=median,
        q25=q25,
        q75=q75,
        n_seeds=len(runs),
        sources=tuple(str(run.path) for run in runs),
        auc=values.mean(axis=1),
    )
    logger.info('Aggregated runs', extra={
        'metric': metric, 'n_seeds': stats.n_seeds, 'auc_median': stats.auc_median,
    })
    return stats


def plot_aggregate(
    curves: Union[AggregateStats, Dict[str, AggregateStats]],
    out_path: Union[str, Path],
    title: Optional[str] = None
) -> None:
    """Draw median curves with shaded interquartile bands as SVG."""
    if isinstance(curves, AggregateStats):
        curves = {curves.metric: curves}
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, stats in curves.items():
        line, = ax.plot(stats.epochs, stats.median, label=label, linewidth=1.5)
        ax.fill_between(stats.epochs, stats.q25, stats.q75, color=line.get_color(), alpha=0.25)
    metric = next(iter(curves.values())).metric
    ax.set_xlabel('Epoch')
    ax.set_ylabel(metric.replace('_', ' '))
    if metric == 'success_rate':
        ax.set_ylim(-0.05, 1.05)
    ax.grid(True, alpha=0.25)
    if len(curves) > 1:
        ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format='svg')
    plt.close(fig)
