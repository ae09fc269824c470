"""Episodic replay buffer and the model-free goal relabeling strategies.

The buffer keeps whole episodes so that, for any stored transition, the
states that followed it in the same episode stay addressable. Relabeling only
ever replaces the goal and reward of a transition; states and actions are
real experience. Relabeled rewards are computed from the transition's
achieved next state, the same convention the model-based path uses.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from .config import RelabelMode
from .envs import GoalEnv, goal_distance
from .utils import format_float

logger = logging.getLogger(__name__)


class ReplayError(Exception):
    """Base exception for replay buffer operations."""
    pass


@dataclass(frozen=True, eq=False)
class Transition:
    """One step of goal-conditioned experience."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    goal: np.ndarray
    episode_id: int = -1
    t: int = 0


@dataclass(frozen=True, eq=False)
class Episode:
    """A full trajectory: ``horizon + 1`` states, ``horizon`` actions and rewards, one goal."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    goal: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> 'Episode':
        """Assemble an episode from consecutive transitions.

        Raises:
            ReplayError: If the transitions are not a contiguous single-goal trajectory
        """
        if not transitions:
            raise ReplayError("Cannot build an episode from zero transitions")
        goal = np.asarray(transitions[0].goal, dtype=np.float64)
        for i, tr in enumerate(transitions):
            if not np.array_equal(tr.goal, goal):
                raise ReplayError(f"Goal changes within the episode at step {i}")
            if i > 0 and not np.array_equal(tr.state, transitions[i - 1].next_state):
                raise ReplayError(f"Transition {i} does not start where transition {i - 1} ended")
        states = np.stack(
            [tr.state for tr in transitions] + [transitions[-1].next_state]
        ).astype(np.float64)
        return cls(
            states=states,
            actions=np.stack([tr.action for tr in transitions]).astype(np.float64),
            rewards=np.asarray([tr.reward for tr in transitions], dtype=np.float64),
            goal=goal,
        )

    def transitions(self, episode_id: int = -1) -> List[Transition]:
        return [
            Transition(
                state=self.states[t],
                action=self.actions[t],
                reward=float(self.rewards[t]),
                next_state=self.states[t + 1],
                goal=self.goal,
                episode_id=episode_id,
                t=t,
            )
            for t in range(self.horizon)
        ]


@dataclass(frozen=True, eq=False)
class TransitionBatch:
    """Column-wise batch of transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    goals: np.ndarray
    episode_ids: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def row(self, i: int) -> Transition:
        return Transition(
            state=self.states[i],
            action=self.actions[i],
            reward=float(self.rewards[i]),
            next_state=self.next_states[i],
            goal=self.goals[i],
            episode_id=int(self.episode_ids[i]),
            t=int(self.t[i]),
        )

    def with_goals(self, goals: np.ndarray, rewards: np.ndarray) -> 'TransitionBatch':
        """Copy of the batch with new goals and rewards; states and actions are shared."""
        return replace(self, goals=goals, rewards=rewards)


@dataclass(frozen=True, eq=False)
class RelabeledBatch:
    """Transitions after relabeling.

    ``sl_mask`` marks the relabeled rows. ``candidate_index`` is the chosen
    rollout index for model-based rows, the future offset for hindsight rows
    and -1 for untouched rows. ``stale_rows`` flags rows whose episode had
    already been evicted, which are left untouched.
    """

    transitions: TransitionBatch
    sl_mask: np.ndarray
    original_goals: np.ndarray
    candidate_index: np.ndarray
    stale_rows: np.ndarray

    @classmethod
    def unchanged(cls, batch: TransitionBatch) -> 'RelabeledBatch':
        n = len(batch)
        return cls(
            transitions=batch,
            sl_mask=np.zeros(n, dtype=bool),
            original_goals=batch.goals,
            candidate_index=np.full(n, -1, dtype=np.int64),
            stale_rows=np.zeros(n, dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> np.ndarray:
        return self.transitions.states

    @property
    def actions(self) -> np.ndarray:
        return self.transitions.actions

    @property
    def rewards(self) -> np.ndarray:
        return self.transitions.rewards

    @property
    def next_states(self) -> np.ndarray:
        return self.transitions.next_states

    @property
    def goals(self) -> np.ndarray:
        return self.transitions.goals

    def relabeled_fraction(self) -> float:
        return float(self.sl_mask.mean()) if len(self) else 0.0


class EpisodeBuffer:
    """FIFO replay store of whole episodes.

    Capacity is counted in transitions and rounded down to whole episodes;
    when full, the oldest episode is evicted to make room for a new one.
    Episodes get increasing ids, so a transition's ``episode_id`` tells whether
    its episode is still resident.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        goal_dim: int,
        horizon: int,
        capacity: int = 1_000_000
    ):
        if horizon < 1:
            raise ReplayError(f"horizon must be at least 1, got {horizon}")
        if capacity < horizon:
            raise ReplayError(
                f"capacity ({capacity}) must hold at least one episode of {horizon} steps"
            )
        self.horizon = horizon
        self.capacity = capacity
        self.max_episodes = capacity // horizon
        self._state_dim = state_dim
        self._action_dim = action_dim
        self._goal_dim = goal_dim
        self._states: List[np.ndarray] = []
        self._actions: List[np.ndarray] = []
        self._rewards: List[np.ndarray] = []
        self._goals: List[np.ndarray] = []
        self._ids: List[int] = []
        self._next_slot = 0
        self._next_id = 0
        self._slot_of_id: Dict[int, int] = {}

    @classmethod
    def for_env(cls, env: GoalEnv, capacity: int = 1_000_000) -> 'EpisodeBuffer':
        spec = env.spec
        return cls(spec.state_dim, spec.action_dim, spec.goal_dim, spec.horizon, capacity)

    @property
    def n_episodes(self) -> int:
        return len(self._ids)

    @property
    def size(self) -> int:
        """Number of stored transitions."""
        return self.n_episodes * self.horizon

    def __len__(self) -> int:
        return self.size

    def store_episode(self, episode: Union[Episode, Sequence[Transition]]) -> int:
        """Append an episode, evicting the oldest one when full.

        Args:
            episode: Episode or list of its transitions

        Returns:
            Id assigned to the stored episode

        Raises:
            ReplayError: If the trajectory is ragged or has the wrong length or widths
        """
        if not isinstance(episode, Episode):
            episode = Episode.from_transitions(list(episode))
        T = self.horizon
        expected = {
            'states': (T + 1, self._state_dim),
            'actions': (T, self._action_dim),
            'rewards': (T,),
            'goal': (self._goal_dim,),
        }
        for name, shape in expected.items():
            actual = np.shape(getattr(episode, name))
            if actual != shape:
                raise ReplayError(f"Episode {name} has shape {actual}, expected {shape}")

        episode_id = self._next_id
        self._next_id += 1
        arrays = (
            np.array(episode.states, dtype=np.float64),
            np.array(episode.actions, dtype=np.float64),
            np.array(episode.rewards, dtype=np.float64),
            np.array(episode.goal, dtype=np.float64),
        )
        if self.n_episodes < self.max_episodes:
            slot = self.n_episodes
            self._states.append(arrays[0])
            self._actions.append(arrays[1])
            self._rewards.append(arrays[2])
            self._goals.append(arrays[3])
            self._ids.append(episode_id)
        else:
            slot = self._next_slot
            evicted = self._ids[slot]
            del self._slot_of_id[evicted]
            self._states[slot], self._actions[slot], self._rewards[slot], self._goals[slot] = arrays
            self._ids[slot] = episode_id
            logger.debug('Evicted episode', extra={'episode_id': evicted, 'slot': slot})
        self._slot_of_id[episode_id] = slot
        self._next_slot = (slot + 1) % self.max_episodes
        return episode_id

    def contains_episode(self, episode_id: int) -> bool:
        return int(episode_id) in self._slot_of_id

    def episode(self, episode_id: int) -> Episode:
        """Return a resident episode.

        Raises:
            ReplayError: If the episode was evicted or never stored
        """
        slot = self._slot_of_id.get(int(episode_id))
        if slot is None:
            raise ReplayError(f"Episode {episode_id} is not in the buffer")
        return Episode(self._states[slot], self._actions[slot], self._rewards[slot], self._goals[slot])

    def future_states(self, episode_id: int, t: int) -> np.ndarray:
        """States that follow step ``t`` of an episode: indices t+1 .. horizon."""
        return self.episode(episode_id).states[t + 1:]

    def _gather(self, slots: np.ndarray, steps: np.ndarray) -> TransitionBatch:
        states = np.stack([self._states[s][t] for s, t in zip(slots, steps)])
        next_states = np.stack([self._states[s][t + 1] for s, t in zip(slots, steps)])
        actions = np.stack([self._actions[s][t] for s, t in zip(slots, steps)])
        rewards = np.array([self._rewards[s][t] for s, t in zip(slots, steps)], dtype=np.float64)
        goals = np.stack([self._goals[s] for s in slots])
        ids = np.array([self._ids[s] for s in slots], dtype=np.int64)
        return TransitionBatch(states, actions, rewards, next_states, goals, ids,
                               np.asarray(steps, dtype=np.int64))

    def sample_transitions(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Sample n transitions uniformly with replacement.

        Raises:
            ReplayError: If the buffer is empty or n < 1
        """
        if self.size == 0:
            raise ReplayError("Cannot sample from an empty replay buffer")
        if n < 1:
            raise ReplayError(f"Batch size must be at least 1, got {n}")
        index = rng.integers(0, self.size, size=n)
        return self._gather(index // self.horizon, index % self.horizon)

    def all_transitions(self) -> TransitionBatch:
        """Every stored transition, oldest slot first."""
        index = np.arange(self.size)
        return self._gather(index // self.horizon, index % self.horizon)

    def dump_csv(self, path: Union[str, Path]) -> int:
        """Write one CSV row per stored transition.

        Columns: episode_id, t, state_*, action_*, reward, goal_*.

        Returns:
            Number of rows written
        """
        header = (
            ['episode_id', 't']
            + [f'state_{i}' for i in range(self._state_dim)]
            + [f'action_{i}' for i in range(self._action_dim)]
            + ['reward']
            + [f'goal_{i}' for i in range(self._goal_dim)]
        )
        order = sorted(range(self.n_episodes), key=lambda s: self._ids[s])
        rows = 0
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for slot in order:
                for t in range(self.horizon):
                    writer.writerow(
                        [self._ids[slot], t]
                        + [format_float(v) for v in self._states[slot][t]]
                        + [format_float(v) for v in self._actions[slot][t]]
                        + [format_float(self._rewards[slot][t])]
                        + [format_float(v) for v in self._goals[slot]]
                    )
                    rows += 1
        return rows


def _resident(batch: TransitionBatch, buffer: EpisodeBuffer) -> np.ndarray:
    return np.array([buffer.contains_episode(i) for i in batch.episode_ids], dtype=bool)


def relabel_her_future(
    batch: TransitionBatch,
    buffer: EpisodeBuffer,
    env: GoalEnv,
    p_relabel: float,
    rng: np.random.Generator
) -> RelabeledBatch:
    """Hindsight relabeling with future achieved goals of the same episode.

    Each row is relabeled with probability ``p_relabel``. A relabeled row at
    step t gets ``phi(s_{t+k})`` with k uniform in {1, ..., horizon - t}; the
    last step therefore uses its own next state. Rows whose episode has been
    evicted are left as they are and flagged in ``stale_rows``.

    The stream draws one uniform per row for the decision, then one integer
    per row for k, whatever the outcome.
    """
    if not 0.0 <= p_relabel <= 1.0:
        raise ReplayError(f"p_relabel must be in [0, 1], got {p_relabel}")
    n = len(batch)
    T = buffer.horizon
    chosen = rng.random(n) < p_relabel
    offsets = rng.integers(1, T - batch.t + 1)

    resident = _resident(batch, buffer)
    stale = chosen & ~resident
    mask = chosen & resident
    if np.any(stale):
        logger.warning('Skipped relabeling of evicted episodes', extra={'rows': int(stale.sum())})

    goals = batch.goals.copy()
    rewards = batch.rewards.copy()
    if np.any(mask):
        rows = np.flatnonzero(mask)
        future = np.stack([
            buffer.episode(batch.episode_ids[i]).states[batch.t[i] + offsets[i]] for i in rows
        ])
        goals[rows] = env.phi(future)
        rewards[rows] = env.transition_reward(batch.next_states[rows], goals[rows])

    return RelabeledBatch(
        transitions=batch.with_goals(goals, rewards),
        sl_mask=mask,
        original_goals=batch.goals,
        candidate_index=np.where(mask, offsets, -1).astype(np.int64),
        stale_rows=stale,
    )


def relabel_baseline(
    batch: TransitionBatch,
    buffer: EpisodeBuffer,
    env: GoalEnv,
    mode: str,
    noise_std: float,
    rng: np.random.Generator,
    p_relabel: float = 0.8
) -> RelabeledBatch:
    """Random-goal or noisy-hindsight-goal relabeling.

    ``random`` replaces the goal of each selected row with a goal drawn
    uniformly from the environment's goal space. ``goal-noise`` runs
    ``relabel_her_future`` on the same stream and then adds zero-mean Gaussian
    noise with standard deviation ``noise_std`` to the hindsight goals.

    Raises:
        ReplayError: If the mode is not one of the two baselines
    """
    if mode == RelabelMode.GOAL_NOISE:
        relabeled = relabel_her_future(batch, buffer, env, p_relabel, rng)
        noise = rng.normal(0.0, noise_std, size=relabeled.goals.shape)
        mask = relabeled.sl_mask
        goals = relabeled.goals.copy()
        rewards = relabeled.rewards.copy()
        if np.any(mask):
            goals[mask] = goals[mask] + noise[mask]
            rewards[mask] = env.transition_reward(batch.next_states[mask], goals[mask])
        return replace(relabeled, transitions=batch.with_goals(goals, rewards))

    if mode == RelabelMode.RANDOM:
        if not 0.0 <= p_relabel <= 1.0:
            raise ReplayError(f"p_relabel must be in [0, 1], got {p_relabel}")
        n = len(batch)
        mask = rng.random(n) < p_relabel
        space = env.spec.goal_space
        random_goals = rng.uniform(space.low, space.high, size=(n, env.spec.goal_dim))
        goals = batch.goals.copy()
        rewards = batch.rewards.copy()
        if np.any(mask):
            goals[mask] = random_goals[mask]
            rewards[mask] = env.transition_reward(batch.next_states[mask], goals[mask])
        return RelabeledBatch(
            transitions=batch.with_goals(goals, rewards),
            sl_mask=mask,
            original_goals=batch.goals,
            candidate_index=np.full(n, -1, dtype=np.int64),
            stale_rows=np.zeros(n, dtype=bool),
        )

    raise ReplayError(
        f"Unknown baseline relabel mode: {mode}. "
        f"Must be one of: {RelabelMode.RANDOM}, {RelabelMode.GOAL_NOISE}"
    )


def relabel_distances(relabeled: RelabeledBatch) -> np.ndarray:
    """Distance of each relabeled goal to the row's original desired goal."""
    return goal_distance(relabeled.goals, relabeled.original_goals)
