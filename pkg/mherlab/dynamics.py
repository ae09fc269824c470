"""Learned dynamics, virtual rollouts and model-based relabeling.

The dynamics model predicts state deltas: ``next_state = state + m(state, action)``.
Model-based relabeling rolls the current deterministic policy through a
dynamics model from a transition's real next state, under the transition's
original goal, and relabels the transition with the achieved goal of one of
the visited states. Only the goal is virtual; states and actions in the
relabeled batch stay real.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import numpy as np

from .envs import GoalEnv
from .nn import (
    AdamState,
    MeanSquaredError,
    RegressionBatch,
    adam_step,
    backward,
    forward,
    init_mlp,
    load_mlp,
    save_mlp,
)
from .normalizer import Normalizer
from .replay import RelabeledBatch, ReplayError, TransitionBatch

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DynamicsPredictor(Protocol):
    """Anything that maps (states, actions) to next states."""

    def predict_next(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        ...


class DynamicsModel:
    """Delta-state MLP with a running input normalizer.

    The normalizer is updated with each training batch before the step and is
    then held fixed for that step.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden_units: int = 256,
        n_layers: int = 4,
        learning_rate: float = 1e-3,
        rng: Optional[np.random.Generator] = None
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.learning_rate = learning_rate
        self.network = init_mlp(
            [state_dim + action_dim] + [hidden_units] * n_layers + [state_dim], rng=rng
        )
        self.adam = AdamState.for_model(self.network)
        self.normalizer = Normalizer(state_dim + action_dim, eps=1e-2, clip_range=None)
        self.train_steps = 0
        self._loss = MeanSquaredError()

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.normalizer.normalize(np.concatenate([states, actions], axis=-1))

    def predict_delta(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return forward(self.network, self._inputs(states, actions))

    def predict_next(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Predict next states as ``state + m(state, action)``."""
        states = np.asarray(states, dtype=np.float64)
        return states + self.predict_delta(states, np.asarray(actions, dtype=np.float64))

    def train_step(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        next_states: np.ndarray
    ) -> float:
        """One Adam step on the mean squared delta error.

        Args:
            states: Batch of states
            actions: Batch of actions
            next_states: Batch of true next states

        Returns:
            Loss before the step

        Raises:
            NumericalError: If the loss or gradient is not finite
        """
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        self.normalizer.update(np.concatenate([states, actions], axis=-1))
        batch = RegressionBatch(self._inputs(states, actions), np.asarray(next_states) - states)
        loss, grads = backward(self.network, self._loss, batch)
        self.network, self.adam = adam_step(self.network, grads, self.adam, self.learning_rate)
        self.train_steps += 1
        return loss

    def train_on_batch(self, batch: TransitionBatch) -> float:
        """Train on the (state, action, next state) columns of a batch; goals are ignored."""
        return self.train_step(batch.states, batch.actions, batch.next_states)

    def one_step_mse(self, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> float:
        """Mean squared error of one-step predictions."""
        residual = self.predict_next(states, actions) - next_states
        return float(np.mean(np.sum(residual ** 2, axis=-1)))

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.network, directory / 'dynamics.bin')
        with open(directory / 'dynamics.json', 'w') as f:
            json.dump({
                'state_dim': self.state_dim,
                'action_dim': self.action_dim,
                'learning_rate': self.learning_rate,
                'train_steps': self.train_steps,
                'normalizer': self.normalizer.state_dict(),
            }, f, indent=2)

    @classmethod
    def load(cls, directory: Union[str, Path]) -> 'DynamicsModel':
        directory = Path(directory)
        with open(directory / 'dynamics.json') as f:
            meta = json.load(f)
        network = load_mlp(directory / 'dynamics.bin')
        model = cls(meta['state_dim'], meta['action_dim'], hidden_units=1, n_layers=1,
                    learning_rate=meta['learning_rate'], rng=np.random.default_rng(0))
        model.network = network
        model.adam = AdamState.for_model(network)
        model.normalizer = Normalizer.from_state_dict(meta['normalizer'])
        model.train_steps = meta['train_steps']
        return model


class OracleDynamics:
    """The environment's own transition rule, usable wherever a learned model is."""

    def __init__(self, env: GoalEnv):
        self.env = env

    def predict_next(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.env.step_batch(np.asarray(states, dtype=np.float64), actions)


@dataclass(frozen=True, eq=False)
class VirtualTrajectory:
    """Candidate states of a model rollout.

    ``candidates[..., 0, :]`` is the real seeding state; entries 1..n are model
    predictions. ``goals`` are the goals the policy was conditioned on.
    """

    candidates: np.ndarray
    goals: np.ndarray

    def __len__(self) -> int:
        return self.candidates.shape[-2]


def policy_rollout(
    model: DynamicsPredictor,
    policy: Policy,
    seed_states: np.ndarray,
    goals: np.ndarray,
    n: int
) -> VirtualTrajectory:
    """Roll a deterministic policy through a dynamics model.

    Args:
        model: Dynamics model (learned or oracle)
        policy: Maps (states, goals) to actions, without exploration noise
        seed_states: Real states to start from, shape (N, state_dim) or (state_dim,)
        goals: Goals the policy is conditioned on for every step
        n: Number of model steps

    Returns:
        Trajectory with n + 1 candidates per row
    """
    if n < 0:
        raise ValueError(f"Rollout depth must be non-negative, got {n}")
    single = np.ndim(seed_states) == 1
    states = np.atleast_2d(np.asarray(seed_states, dtype=np.float64))
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))

    candidates = [states.copy()]
    for _ in range(n):
        actions = policy(states, goals)
        states = model.predict_next(states, actions)
        candidates.append(states)
    stacked = np.stack(candidates, axis=1)
    if single:
        return VirtualTrajectory(candidates=stacked[0], goals=goals[0])
    return VirtualTrajectory(candidates=stacked, goals=goals)


def mbr_relabel(
    batch: TransitionBatch,
    policy: Policy,
    model: DynamicsPredictor,
    env: GoalEnv,
    n: int,
    p_relabel: float,
    rng: np.random.Generator
) -> RelabeledBatch:
    """Model-based relabeling.

    Each row is selected with probability ``p_relabel``. A selected row is
    rolled out n steps from its next state under its original goal, one of the
    n + 1 candidates is picked uniformly, and the row gets that candidate's
    achieved goal and the reward recomputed from its own achieved next state.
    Unselected rows are returned untouched.

    The stream draws one uniform per row for the decision and one candidate
    index per row, whatever the outcome, so results do not depend on how rows
    are grouped.
    """
    if n < 0:
        raise ReplayError(f"Rollout depth must be non-negative, got {n}")
    if not 0.0 <= p_relabel <= 1.0:
        raise ReplayError(f"p_relabel must be in [0, 1], got {p_relabel}")
    size = len(batch)
    chosen = rng.random(size) < p_relabel
    picks = rng.integers(0, n + 1, size=size)

    goals = batch.goals.copy()
    rewards = batch.rewards.copy()
    rows = np.flatnonzero(chosen)
    if rows.size:
        trajectory = policy_rollout(model, policy, batch.next_states[rows], batch.goals[rows], n)
        picked = trajectory.candidates[np.arange(rows.size), picks[rows]]
        goals[rows] = env.phi(picked)
        rewards[rows] = env.transition_reward(batch.next_states[rows], goals[rows])

    return RelabeledBatch(
        transitions=batch.with_goals(goals, rewards),
        sl_mask=chosen,
        original_goals=batch.goals,
        candidate_index=np.where(chosen, picks, -1).astype(np.int64),
        stale_rows=np.zeros(size, dtype=bool),
    )
