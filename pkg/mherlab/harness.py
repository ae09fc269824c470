"""Training loop, evaluation protocol and multi-seed campaigns.

A run directory holds:
  config.json             resolved run configuration
  metrics.csv             one row per epoch (see ``metrics.METRICS_HEADER``)
  relabel_goals.csv       relabeled goals of every training batch
  checkpoint/             agent and dynamics model at the end of the run
  buffer.csv              replay buffer contents (with ``dump_buffer``)
  failure_snapshot.json   written only when a run aborts on a numerical failure
"""

import json
import logging
import multiprocessing as mp
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .agents import GoalConditionedAgent
from .config import Algo, RelabelMode, RunConfig
from .dynamics import DynamicsModel, mbr_relabel
from .envs import GoalEnv, goal_distance, make_env
from .metrics import (
    METRICS_FILE,
    AggregateStats,
    EpochMetrics,
    RunMetrics,
    aggregate_stats,
    plot_aggregate,
)
from .nn import NetworkError
from .replay import (
    Episode,
    EpisodeBuffer,
    RelabeledBatch,
    TransitionBatch,
    relabel_baseline,
    relabel_distances,
    relabel_her_future,
)
from .utils import SeedStreams, append_csv_rows, setup_logging

logger = logging.getLogger(__name__)

RELABEL_DUMP_FILE = 'relabel_goals.csv'
FAILURE_SNAPSHOT_FILE = 'failure_snapshot.json'
CHECKPOINT_DIR = 'checkpoint'
BUFFER_DUMP_FILE = 'buffer.csv'
HELD_OUT_TRANSITIONS = 1000


class TrainingError(Exception):
    """Raised when a run aborts. ``snapshot`` describes the state at the failure."""

    def __init__(self, message: str, snapshot: Optional[Dict] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def relabel_dump_header(goal_dim: int) -> Tuple[str, ...]:
    return (
        ('epoch', 'row', 'candidate_index')
        + tuple(f'original_goal_{i}' for i in range(goal_dim))
        + tuple(f'relabeled_goal_{i}' for i in range(goal_dim))
        + ('distance',)
    )


def dump_relabel_goals(path: Union[str, Path], epoch: int, relabeled: RelabeledBatch) -> int:
    """Append the relabeled rows of a batch to a relabel-dump CSV.

    Returns:
        Number of rows appended (0 when no row was relabeled)
    """
    rows = np.flatnonzero(relabeled.sl_mask)
    if rows.size == 0:
        return 0
    distances = relabel_distances(relabeled)
    goal_dim = relabeled.goals.shape[1]
    return append_csv_rows(Path(path), relabel_dump_header(goal_dim), [
        [epoch, int(i), int(relabeled.candidate_index[i])]
        + [float(v) for v in relabeled.original_goals[i]]
        + [float(v) for v in relabeled.goals[i]]
        + [float(distances[i])]
        for i in rows
    ])


def rollout(
    env: GoalEnv,
    policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
    states: np.ndarray,
    goals: np.ndarray
) -> np.ndarray:
    """Run a deterministic policy for one horizon on a batch of episodes.

    Returns:
        Visited states, shape (horizon + 1, n, state_dim)
    """
    visited = [states]
    for _ in range(env.spec.horizon):
        states = env.step_batch(states, policy(states, goals))
        visited.append(states)
    return np.stack(visited)


def evaluate(
    policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
    env: GoalEnv,
    eval_episodes: int,
    rng: np.random.Generator
) -> Tuple[float, float]:
    """Noise-free evaluation.

    Success is judged at the final step of each episode.

    Returns:
        Tuple of (success rate, mean final distance to the goal)
    """
    states, goals = env.reset_batch(rng, eval_episodes)
    final = rollout(env, policy, states, goals)[-1]
    success = env.is_success(final, goals)
    distance = goal_distance(env.phi(final), goals)
    return float(np.mean(success)), float(np.mean(distance))


def discounted_sq_distance(achieved_goals: np.ndarray, goals: np.ndarray, gamma: float) -> float:
    """Mean over episodes of ``sum_t gamma^t ||achieved_t - g||^2``.

    Args:
        achieved_goals: Shape (T, n, goal_dim), one entry per step t = 0..T-1
        goals: Shape (n, goal_dim)
        gamma: Discount in [0, 1)
    """
    sq = np.sum((achieved_goals - goals[None]) ** 2, axis=-1)
    discounts = gamma ** np.arange(sq.shape[0], dtype=np.float64)
    return float(np.mean(discounts @ sq))


def expected_distance(
    policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
    env: GoalEnv,
    goal_set: Tuple[np.ndarray, np.ndarray],
    gamma: float
) -> float:
    """Expected-distance diagnostic over a fixed set of (start state, goal) pairs."""
    states, goals = goal_set
    visited = rollout(env, policy, states, goals)[:-1]
    return discounted_sq_distance(env.phi(visited), goals, gamma)


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float('nan')


@dataclass
class BatchStats:
    critic_loss: float = float('nan')
    actor_q_term: float = float('nan')
    sl_loss: float = float('nan')
    model_loss: float = float('nan')


class Trainer:
    """Runs one configuration end to end on one seed.

    Random streams are labeled substreams of the run seed, so a feature that
    is switched off never shifts the draws of the others.
    """

    def __init__(
        self,
        config: RunConfig,
        run_dir: Optional[Union[str, Path]] = None,
        logger: Optional[logging.Logger] = None
    ):
        """Initialize the environment, agent, model and buffer.

        Args:
            config: Run configuration
            run_dir: Directory for run artifacts; nothing is written without one
            logger: Logger instance
        """
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.env = make_env(config.env, config.horizon)
        self.streams = SeedStreams(config.seed)
        self.agent = GoalConditionedAgent(
            self.env.spec, config.agent, self.streams['agent_init'],
            actor_only=config.algo == Algo.GCSL
        )
        self.model: Optional[DynamicsModel] = None
        if config.uses_model:
            self.model = DynamicsModel(
                self.env.spec.state_dim,
                self.env.spec.action_dim,
                hidden_units=config.agent.hidden_units,
                n_layers=config.agent.model_layers,
                learning_rate=config.agent.lr_model,
                rng=self.streams['model_init'],
            )
        self.buffer = EpisodeBuffer.for_env(self.env, capacity=config.buffer_size)
        self.epoch = 0
        self.env_steps = 0
        self.model_updates = 0
        self.warmed_up = False
        self.history: List[EpochMetrics] = []

        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.metrics: Optional[RunMetrics] = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            for name in (METRICS_FILE, RELABEL_DUMP_FILE, FAILURE_SNAPSHOT_FILE):
                stale = self.run_dir / name
                if stale.exists():
                    self.logger.warning('Replacing file from an earlier run', extra={'path': str(stale)})
                    stale.unlink()
            with open(self.run_dir / 'config.json', 'w') as f:
                json.dump(config.to_dict(), f, indent=2)
            self.metrics = RunMetrics(self.run_dir / METRICS_FILE)

        self._ed_goal_set = self.env.reset_batch(self.streams.fresh('ed_goals'), config.ed_episodes)
        self._held_out = self._held_out_transitions() if self.model is not None else None

    def _held_out_transitions(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = self.streams.fresh('held_out')
        spec = self.env.spec
        states = self.env.sample_states(rng, HELD_OUT_TRANSITIONS)
        actions = rng.uniform(spec.action_low, spec.action_high, size=(HELD_OUT_TRANSITIONS, spec.action_dim))
        return states, actions, self.env.step_batch(states, actions)

    # -- experience -------------------------------------------------------

    def collect_episode(self, action_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Episode:
        """Play one episode from a fresh start state and goal."""
        env_state = self.env.reset(self.streams['env'])
        states = [env_state.state]
        actions = []
        for _ in range(self.env.spec.horizon):
            action = action_fn(env_state.state, env_state.goal)
            env_state = self.env.step(env_state, action)
            states.append(env_state.state)
            actions.append(action)
        states = np.stack(states)
        return Episode(
            states=states,
            actions=np.stack(actions),
            rewards=np.asarray(self.env.transition_reward(states[1:], env_state.goal), dtype=np.float64),
            goal=env_state.goal,
        )

    def _store(self, episode: Episode) -> None:
        self.buffer.store_episode(episode)
        achieved = self.env.phi(episode.states)
        self.agent.update_normalizers(
            episode.states,
            np.concatenate([episode.goal[None, :], achieved], axis=0),
        )

    def _random_action(self, state: np.ndarray, goal: np.ndarray) -> np.ndarray:
        spec = self.env.spec
        return self.streams['warmup_actions'].uniform(spec.action_low, spec.action_high)

    def _exploring_action(self, state: np.ndarray, goal: np.ndarray) -> np.ndarray:
        return self.agent.select_action(state, goal, explore=True, rng=self.streams['explore'])

    # -- training ---------------------------------------------------------

    def warmup(self) -> None:
        """Fill the buffer with random-action episodes and pre-train the dynamics model.

        Does nothing for runs without a dynamics model. Warmup interaction is
        not counted in ``env_steps``.
        """
        if self.model is None or self.warmed_up:
            return
        for _ in range(self.config.warmup_episodes):
            self._store(self.collect_episode(self._random_action))
        rng = self.streams['warmup_sample']
        loss = float('nan')
        for _ in range(self.config.warmup_updates):
            loss = self.model.train_on_batch(self.buffer.sample_transitions(self.config.warmup_batch_size, rng))
            self.model_updates += 1
        self.warmed_up = True
        self.logger.info('Warmup finished', extra={
            'buffer_size': self.buffer.size,
            'model_loss': loss,
            'held_out_model_mse': self.held_out_model_mse(),
        })

    def held_out_model_mse(self) -> float:
        if self.model is None:
            return float('nan')
        return self.model.one_step_mse(*self._held_out)

    def relabel(self, batch: TransitionBatch) -> RelabeledBatch:
        """Relabel a sampled batch with the configured strategy."""
        agent_config = self.config.agent
        mode = agent_config.relabel_mode
        rng = self.streams['relabel']
        if mode == RelabelMode.HER_FUTURE:
            return relabel_her_future(batch, self.buffer, self.env, agent_config.p_relabel, rng)
        if mode == RelabelMode.MBR:
            return mbr_relabel(batch, self.agent.policy, self.model, self.env,
                               agent_config.n_mbr_steps, agent_config.p_relabel, rng)
        if mode in (RelabelMode.RANDOM, RelabelMode.GOAL_NOISE):
            return relabel_baseline(batch, self.buffer, self.env, mode, agent_config.goal_noise_std,
                                    rng, p_relabel=agent_config.p_relabel)
        return RelabeledBatch.unchanged(batch)

    def train_batch(self) -> Tuple[BatchStats, RelabeledBatch]:
        """Sample, update the model, relabel, then update the agent once."""
        config = self.config
        stats = BatchStats()
        batch = self.buffer.sample_transitions(config.batch_size, self.streams['sample'])
        if self.model is not None:
            for _ in range(config.model_updates_per_batch):
                stats.model_loss = self.model.train_on_batch(batch)
                self.model_updates += 1

        relabeled = self.relabel(batch)
        if config.algo == Algo.GCSL:
            stats.sl_loss = self.agent.gcsl_update(relabeled)
            return stats, relabeled

        targets = None
        if config.algo == Algo.MVE:
            targets = self.agent.mve_target(relabeled.rewards, relabeled.next_states, relabeled.goals,
                                            self.model, self.env)
        stats.critic_loss = self.agent.critic_update(relabeled, targets)
        if config.algo == Algo.DDPG_SL:
            sl_batch = mbr_relabel(batch, self.agent.policy, self.model, self.env,
                                   config.agent.n_mbr_steps, config.agent.p_relabel,
                                   self.streams['relabel_sl'])
            terms = self.agent.actor_update_joint(relabeled, sl_batch=sl_batch)
        else:
            terms = self.agent.actor_update_joint(relabeled)
        stats.actor_q_term = terms['actor_q_term']
        stats.sl_loss = terms['sl_loss']
        self.agent.update_target_networks()
        return stats, relabeled

    def _fail(self, error: Exception, batch_index: int, episode_index: int) -> TrainingError:
        snapshot = {
            'error': str(error),
            'error_type': type(error).__name__,
            'epoch': self.epoch + 1,
            'episode_in_epoch': episode_index,
            'batch_in_episode': batch_index,
            'env_steps': self.env_steps,
            'model_updates': self.model_updates,
            'buffer_size': self.buffer.size,
            'config': self.config.to_dict(),
        }
        if self.run_dir is not None:
            with open(self.run_dir / FAILURE_SNAPSHOT_FILE, 'w') as f:
                json.dump(snapshot, f, indent=2)
        self.logger.error('Training aborted', extra=snapshot)
        return TrainingError(f"Training aborted in epoch {self.epoch + 1}: {error}", snapshot)

    def run_epoch(self) -> EpochMetrics:
        """Collect episodes, train, evaluate and record one metrics row.

        Raises:
            TrainingError: On a numerical failure in any update
        """
        if self.model is not None and not self.warmed_up:
            self.warmup()
        config = self.config
        started = time.perf_counter()
        losses: Dict[str, List[float]] = {name: [] for name in BatchStats.__dataclass_fields__}
        relabel_distance_sum = 0.0
        relabel_rows = 0
        dump_path = self.run_dir / RELABEL_DUMP_FILE if self.run_dir is not None else None

        for episode_index in range(config.episodes_per_epoch):
            self._store(self.collect_episode(self._exploring_action))
            self.env_steps += config.horizon
            for batch_index in range(config.batches_per_episode):
                try:
                    stats, relabeled = self.train_batch()
                except NetworkError as e:
                    raise self._fail(e, batch_index, episode_index) from e
                for name, values in losses.items():
                    value = getattr(stats, name)
                    if not np.isnan(value):
                        values.append(value)
                mask = relabeled.sl_mask
                if np.any(mask):
                    relabel_distance_sum += float(np.sum(relabel_distances(relabeled)[mask]))
                    relabel_rows += int(mask.sum())
                if dump_path is not None:
                    dump_relabel_goals(dump_path, self.epoch + 1, relabeled)

        self.epoch += 1
        policy = self.agent.snapshot().policy
        success_rate, final_distance = evaluate(policy, self.env, config.eval_episodes, self.streams['eval'])
        row = EpochMetrics(
            epoch=self.epoch,
            env_steps=self.env_steps,
            success_rate=success_rate,
            mean_final_distance=final_distance,
            expected_distance=expected_distance(policy, self.env, self._ed_goal_set, config.agent.gamma),
            critic_loss=_mean(losses['critic_loss']),
            actor_q_term=_mean(losses['actor_q_term']),
            sl_loss=_mean(losses['sl_loss']),
            model_loss=_mean(losses['model_loss']),
            mean_relabel_goal_distance=relabel_distance_sum / relabel_rows if relabel_rows else float('nan'),
        )
        if self.metrics is not None:
            self.metrics.record(row)
        self.history.append(row)
        self.logger.info('Epoch finished', extra={
            'env': config.env,
            'algo': config.algo,
            'seed': config.seed,
            **row.__dict__,
            'held_out_model_mse': self.held_out_model_mse(),
            'wall_time': time.perf_counter() - started,
        })
        return row

    def save_checkpoint(self) -> Optional[Path]:
        if self.run_dir is None:
            return None
        directory = self.run_dir / CHECKPOINT_DIR
        self.agent.save(directory)
        if self.model is not None:
            self.model.save(directory)
        return directory

    def train(self, should_stop: Optional[Callable[[], bool]] = None) -> List[EpochMetrics]:
        """Run warmup and all epochs, then write the checkpoint.

        Args:
            should_stop: Polled after every epoch; a true result ends the run early

        Returns:
            Metrics rows of the completed epochs
        """
        self.logger.info('Run started', extra={
            'env': self.config.env, 'algo': self.config.algo, 'seed': self.config.seed,
            'epochs': self.config.epochs,
        })
        self.warmup()
        while self.epoch < self.config.epochs:
            self.run_epoch()
            if should_stop is not None and should_stop():
                self.logger.warning('Stopping early on request', extra={'epoch': self.epoch})
                break
        self.save_checkpoint()
        if self.run_dir is not None and self.config.dump_buffer:
            self.buffer.dump_csv(self.run_dir / BUFFER_DUMP_FILE)
        return self.history


def run_training(settings: Dict, log_level: str = 'WARNING') -> str:
    """Train one configuration into ``output_dir/run_name``; returns the run directory.

    Takes a plain dictionary so campaign workers can receive it.
    """
    if log_level:
        setup_logging(log_level=log_level)
    config = RunConfig(settings)
    run_dir = Path(config.output_dir) / config.run_name
    Trainer(config, run_dir).train()
    return str(run_dir)


@dataclass(frozen=True)
class CampaignCell:
    """One curve of a campaign: an algorithm, optionally at one sweep value."""

    label: str
    settings: Dict

    def run_settings(self, seed: int, output_dir: Path) -> Dict:
        settings = dict(self.settings)
        settings['seed'] = seed
        settings['output_dir'] = str(output_dir / 'cells' / self.label)
        return settings


def campaign_cells(
    base: RunConfig,
    algos: Sequence[str],
    sweep: Optional[str] = None,
    sweep_values: Sequence[float] = (),
    agent_settings: Optional[Dict] = None
) -> List[CampaignCell]:
    """Build the cells of a campaign.

    Agent settings resolved in ``base`` are dropped so that each algorithm
    starts from its own defaults; ``agent_settings`` and the sweep parameter
    are applied to every cell.
    """
    run_settings = {k: v for k, v in base.to_dict().items() if k in RunConfig.FIELDS}
    run_settings.update(agent_settings or {})
    cells = []
    for algo in algos:
        if sweep is None:
            cells.append(CampaignCell(algo, {**run_settings, 'algo': algo}))
            continue
        for value in sweep_values:
            cells.append(CampaignCell(f"{algo}_{sweep}{value:g}", {**run_settings, 'algo': algo, sweep: value}))
    return cells


def run_campaign(
    base: RunConfig,
    algos: Sequence[str],
    seeds: Sequence[int],
    output_dir: Union[str, Path],
    sweep: Optional[str] = None,
    sweep_values: Sequence[float] = (),
    workers: int = 1,
    log_level: str = 'WARNING',
    agent_settings: Optional[Dict] = None
) -> Dict[str, AggregateStats]:
    """Run every cell for every seed, then aggregate and plot each cell.

    Runs are independent; with ``workers > 1`` they execute in a process pool.

    Returns:
        Aggregate success statistics per cell label
    """
    output_dir = Path(output_dir)
    cells = campaign_cells(base, algos, sweep, sweep_values, agent_settings)
    jobs = [cell.run_settings(seed, output_dir) for cell in cells for seed in seeds]
    logger.info('Campaign started', extra={'cells': len(cells), 'runs': len(jobs), 'workers': workers})

    if workers > 1:
        with mp.get_context('spawn').Pool(workers) as pool:
            run_dirs = pool.starmap(run_training, [(job, log_level) for job in jobs])
    else:
        run_dirs = [run_training(job, log_level=None) for job in jobs]

    results: Dict[str, AggregateStats] = {}
    for i, cell in enumerate(cells):
        cell_dirs = run_dirs[i * len(seeds):(i + 1) * len(seeds)]
        stats = aggregate_stats(cell_dirs)
        stats.write_csv(output_dir / 'aggregate' / f'{cell.label}.csv')
        results[cell.label] = stats

    plot_aggregate(results, output_dir / 'campaign.svg')
    summary = output_dir / 'campaign_summary.csv'
    if summary.exists():
        summary.unlink()
    append_csv_rows(summary,
                    ('label', 'n_seeds', 'auc_median', 'final_median'),
                    [[label, s.n_seeds, s.auc_median, float(s.median[-1])] for label, s in results.items()])
    logger.info('Campaign finished', extra={
        'auc_median': {label: s.auc_median for label, s in results.items()},
    })
    return results
