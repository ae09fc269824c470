import numpy as np
import pytest

from mherlab.metrics import (
    METRICS_FILE,
    METRICS_HEADER,
    AggregateStats,
    EpochMetrics,
    MetricsError,
    RunMetrics,
    aggregate_stats,
    plot_aggregate,
)


def epoch_row(epoch, success, horizon=100):
    return EpochMetrics(
        epoch=epoch, env_steps=epoch * horizon, success_rate=success,
        mean_final_distance=1.0, expected_distance=2.0, critic_loss=0.1,
        actor_q_term=-3.0, sl_loss=float('nan'), model_loss=0.01,
        mean_relabel_goal_distance=0.5,
    )


def write_run(directory, successes, first_epoch=1):
    directory.mkdir(parents=True, exist_ok=True)
    metrics = RunMetrics(directory / METRICS_FILE)
    for i, success in enumerate(successes):
        metrics.record(epoch_row(first_epoch + i, success))
    return directory


class TestRunMetrics:
    def test_rows_survive_the_file(self, tmp_path):
        write_run(tmp_path / 'run', [0.1, 0.25])
        loaded = RunMetrics.load(tmp_path / 'run')
        assert loaded.epochs == [1, 2]
        assert list(loaded.column('success_rate')) == [0.1, 0.25]
        assert np.isnan(loaded.column('sl_loss')).all()

    def test_header(self, tmp_path):
        write_run(tmp_path / 'run', [0.0])
        header = (tmp_path / 'run' / METRICS_FILE).read_text().splitlines()[0]
        assert tuple(header.split(',')) == METRICS_HEADER

    def test_epochs_must_increase(self, tmp_path):
        metrics = RunMetrics(tmp_path / METRICS_FILE)
        metrics.record(epoch_row(2, 0.0))
        with pytest.raises(MetricsError):
            metrics.record(epoch_row(2, 0.0))

    def test_success_rate_bounds(self):
        with pytest.raises(MetricsError):
            epoch_row(1, 1.5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MetricsError):
            RunMetrics.load(tmp_path / 'nowhere')

    def test_unknown_column(self, tmp_path):
        write_run(tmp_path / 'run', [0.0])
        with pytest.raises(MetricsError):
            RunMetrics.load(tmp_path / 'run').column('reward')


class TestAggregate:
    def test_quartiles(self, tmp_path):
        runs = [write_run(tmp_path / f'seed{i}', [v]) for i, v in enumerate([0.2, 0.4, 0.6, 0.8, 1.0])]
        stats = aggregate_stats(runs)
        assert stats.median[0] == pytest.approx(0.6)
        assert stats.q25[0] == pytest.approx(0.4)
        assert stats.q75[0] == pytest.approx(0.8)
        assert stats.n_seeds == 5

    def test_single_seed(self, tmp_path):
        stats = aggregate_stats([write_run(tmp_path / 'seed0', [0.3, 0.7])])
        assert np.array_equal(stats.median, [0.3, 0.7])
        assert np.array_equal(stats.q25, stats.median)
        assert np.array_equal(stats.q75, stats.median)

    def test_file_order_does_not_matter(self, tmp_path):
        rng = np.random.default_rng(0)
        runs = [write_run(tmp_path / f'seed{i}', rng.uniform(0, 1, 4)) for i in range(5)]
        forward = aggregate_stats(runs)
        backward = aggregate_stats(runs[::-1])
        for name in ('median', 'q25', 'q75', 'auc'):
            assert np.array_equal(getattr(forward, name), getattr(backward, name))

    def test_misaligned_epochs(self, tmp_path):
        runs = [write_run(tmp_path / 'a', [0.1, 0.2]), write_run(tmp_path / 'b', [0.1, 0.2], first_epoch=2)]
        with pytest.raises(MetricsError):
            aggregate_stats(runs)

    def test_different_lengths(self, tmp_path):
        runs = [write_run(tmp_path / 'a', [0.1, 0.2]), write_run(tmp_path / 'b', [0.1])]
        with pytest.raises(MetricsError):
            aggregate_stats(runs)

    def test_no_files(self):
        with pytest.raises(MetricsError):
            aggregate_stats([])

    def test_area_under_curve(self, tmp_path):
        runs = [write_run(tmp_path / 'a', [0.0, 0.5, 1.0]), write_run(tmp_path / 'b', [0.0, 0.0, 0.3])]
        stats = aggregate_stats(runs)
        assert stats.auc == pytest.approx([0.5, 0.1])
        assert stats.auc_median == pytest.approx(0.3)

    def test_other_metric(self, tmp_path):
        stats = aggregate_stats([write_run(tmp_path / 'a', [0.5])], metric='expected_distance')
        assert stats.median[0] == 2.0

    def test_csv_and_summary(self, tmp_path):
        runs = [write_run(tmp_path / f'seed{i}', [0.1 * i, 0.2 * i]) for i in range(3)]
        stats = aggregate_stats(runs)
        stats.write_csv(tmp_path / 'agg' / 'mher.csv')
        restored = AggregateStats.read_csv(tmp_path / 'agg' / 'mher.csv')
        assert np.array_equal(restored.median, stats.median)
        assert np.array_equal(restored.epochs, [1, 2])
        assert restored.n_seeds == 3
        assert restored.auc_median == pytest.approx(stats.auc_median)
        assert (tmp_path / 'agg' / 'mher.json').exists()

    def test_missing_aggregate(self, tmp_path):
        with pytest.raises(MetricsError):
            AggregateStats.read_csv(tmp_path / 'none.csv')


def test_plot_writes_svg(tmp_path):
    runs = [write_run(tmp_path / f'seed{i}', [0.1 * i, 0.3 * i, 0.3]) for i in range(3)]
    stats = aggregate_stats(runs)
    plot_aggregate({'mher': stats, 'her': stats}, tmp_path / 'plots' / 'curves.svg', title='point2d-large')
    text = (tmp_path / 'plots' / 'curves.svg').read_text()
    assert text.lstrip().startswith('<?xml') and '<svg' in text
