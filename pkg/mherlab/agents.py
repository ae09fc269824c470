"""Goal-conditioned deterministic actor-critic agents.

One agent class covers plain DDPG, DDPG with hindsight relabeling, the joint
policy-gradient plus supervised actor loss, GCSL (actor only) and MVE critic
targets. Which of these a run uses is decided by the harness from the run
configuration.

Network inputs:
  actor:  [norm(state), norm(goal)]
  critic: [norm(state), norm(goal), scaled(action)]
where ``scaled`` maps the action box to [-1, 1].
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np

from .config import AgentConfig
from .dynamics import DynamicsPredictor
from .envs import GoalEnv, GoalEnvSpec
from .nn import (
    AdamState,
    GradientBundle,
    LossDefinition,
    MeanSquaredError,
    MlpModel,
    OutputActivation,
    RegressionBatch,
    adam_step,
    backprop,
    backward,
    forward,
    forward_with_cache,
    init_mlp,
    load_mlp,
    polyak_update,
    save_mlp,
)
from .normalizer import IdentityNormalizer, Normalizer
from .replay import RelabeledBatch

logger = logging.getLogger(__name__)


class AgentError(Exception):
    """Raised when an agent is asked for something its configuration does not support."""
    pass


class ActorBatch(NamedTuple):
    """Inputs of the joint actor loss.

    ``q_inputs`` feed the policy-gradient term; ``sl_inputs``, ``actions`` and
    ``sl_mask`` feed the supervised term. Both input arrays are normalized
    actor inputs.
    """

    q_inputs: np.ndarray
    sl_inputs: np.ndarray
    actions: np.ndarray
    sl_mask: np.ndarray


class ActorJointLoss(LossDefinition):
    """``-mean Q(s, pi(s, g), g) + alpha * mean_masked ||a - pi(s, g)||^2``.

    The critic is held fixed: only the actor is differentiated. With
    ``alpha == 0`` the supervised term is not evaluated at all.
    """

    def __init__(self, critic: MlpModel, alpha: float):
        if alpha < 0:
            raise AgentError(f"alpha must be non-negative, got {alpha}")
        self.critic = critic
        self.alpha = alpha
        self._supervised = MeanSquaredError()
        self.last_terms: Tuple[float, float] = (0.0, 0.0)

    def constant_models(self):
        return (self.critic,)

    def value_and_gradient(self, actor: MlpModel, batch: ActorBatch) -> Tuple[float, GradientBundle]:
        actions, cache = forward_with_cache(actor, batch.q_inputs)
        half = actor.output_half_range
        scaled = (actions - actor.output_center) / half
        q_values, critic_cache = forward_with_cache(
            self.critic, np.concatenate([batch.q_inputs, scaled], axis=1)
        )
        n = q_values.shape[0]
        q_term = -float(np.mean(q_values))
        _, d_critic_input = backprop(self.critic, critic_cache, np.full((n, 1), -1.0 / n))
        d_actions = d_critic_input[:, -actor.output_dim:] / half
        grads, _ = backprop(actor, cache, d_actions)

        sl_term = 0.0
        loss = q_term
        if self.alpha > 0:
            sl_term, sl_grads = self._supervised.value_and_gradient(
                actor, RegressionBatch(batch.sl_inputs, batch.actions, batch.sl_mask)
            )
            loss = q_term + self.alpha * sl_term
            grads = grads + sl_grads.scaled(self.alpha)
        self.last_terms = (q_term, sl_term)
        return loss, grads


def supervised_action_loss(actor: MlpModel, inputs: np.ndarray, actions: np.ndarray,
                           mask: Optional[np.ndarray] = None) -> float:
    """Mean over masked rows of ``||a - pi(s, g)||^2`` (0 when no row is masked)."""
    return MeanSquaredError().value(actor, RegressionBatch(inputs, actions, mask))


@dataclass(eq=False)
class ActorCritic:
    """Networks, target copies, optimizer states and input normalizers of one agent."""

    actor: MlpModel
    actor_adam: AdamState
    state_normalizer: Normalizer
    goal_normalizer: Normalizer
    critic: Optional[MlpModel] = None
    critic_adam: Optional[AdamState] = None
    actor_target: Optional[MlpModel] = None
    critic_target: Optional[MlpModel] = None


class GoalConditionedAgent:
    """Deterministic goal-conditioned actor with an optional critic.

    Updates replace the agent's networks in place; evaluation may use
    ``snapshot()`` copies of the actor concurrently.
    """

    def __init__(
        self,
        spec: GoalEnvSpec,
        config: AgentConfig,
        rng: np.random.Generator,
        actor_only: bool = False
    ):
        """Initialize networks for an environment.

        Args:
            spec: Environment geometry
            config: Agent hyperparameters
            rng: Generator for weight initialization (actor first, then critic)
            actor_only: Build only the policy network (GCSL)
        """
        self.spec = spec
        self.config = config
        self.actor_only = actor_only
        hidden = [config.hidden_units] * config.actor_layers
        obs_dim = spec.state_dim + spec.goal_dim

        actor = init_mlp(
            [obs_dim] + hidden + [spec.action_dim],
            output_activation=OutputActivation.SQUASH,
            rng=rng,
            output_low=spec.action_low,
            output_high=spec.action_high,
        )
        if config.normalize_obs:
            state_normalizer = Normalizer(spec.state_dim, clip_range=config.clip_obs)
            goal_normalizer = Normalizer(spec.goal_dim, clip_range=config.clip_obs)
        else:
            state_normalizer = IdentityNormalizer(spec.state_dim)
            goal_normalizer = IdentityNormalizer(spec.goal_dim)
        self.nets = ActorCritic(
            actor=actor,
            actor_adam=AdamState.for_model(actor),
            state_normalizer=state_normalizer,
            goal_normalizer=goal_normalizer,
        )
        if not actor_only:
            critic = init_mlp([obs_dim + spec.action_dim] + hidden + [1], rng=rng)
            self.nets.critic = critic
            self.nets.critic_adam = AdamState.for_model(critic)
            self.nets.actor_target = actor.copy()
            self.nets.critic_target = critic.copy()

    # -- inputs -----------------------------------------------------------

    def observe(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        """Normalized actor inputs."""
        return np.concatenate([
            self.nets.state_normalizer.normalize(states),
            self.nets.goal_normalizer.normalize(goals),
        ], axis=-1)

    def scale_actions(self, actions: np.ndarray) -> np.ndarray:
        """Map actions from the action box to [-1, 1]."""
        center = (self.spec.action_high + self.spec.action_low) / 2.0
        half = (self.spec.action_high - self.spec.action_low) / 2.0
        return (np.asarray(actions, dtype=np.float64) - center) / half

    def update_normalizers(self, states: np.ndarray, goals: np.ndarray) -> None:
        """Add observed states and goals to the running statistics."""
        self.nets.state_normalizer.update(states)
        self.nets.goal_normalizer.update(goals)

    def _require_critic(self) -> None:
        if self.actor_only:
            raise AgentError("This agent has no critic")

    # -- acting -----------------------------------------------------------

    def policy(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        """Deterministic online actor output."""
        return forward(self.nets.actor, self.observe(states, goals))

    def target_policy(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        """Deterministic target actor output."""
        self._require_critic()
        return forward(self.nets.actor_target, self.observe(states, goals))

    def q_value(self, states: np.ndarray, actions: np.ndarray, goals: np.ndarray,
                target: bool = False) -> np.ndarray:
        """Critic (or target critic) value, one scalar per row."""
        self._require_critic()
        critic = self.nets.critic_target if target else self.nets.critic
        inputs = np.concatenate([self.observe(states, goals), self.scale_actions(actions)], axis=-1)
        return forward(critic, np.atleast_2d(inputs))[:, 0]

    def select_action(
        self,
        states: np.ndarray,
        goals: np.ndarray,
        explore: bool,
        rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        """Choose actions for one state or a batch of states.

        Without exploration this is the actor output. With exploration each row
        is, with probability ``eps_random``, a uniform action from the box, and
        otherwise the actor output plus Gaussian noise of standard deviation
        ``noise_std`` times the action half-range, clipped to the box. The
        stream draws one uniform, one uniform action and one noise vector per
        row, whatever the branch.
        """
        actions = self.policy(states, goals)
        if not explore:
            return actions
        if rng is None:
            raise AgentError("Exploration needs a random generator")
        low, high = self.spec.action_low, self.spec.action_high
        batch = np.atleast_2d(actions)
        n, width = batch.shape
        take_random = rng.random(n) < self.config.eps_random
        uniform = rng.uniform(low, high, size=(n, width))
        noise = rng.normal(0.0, 1.0, size=(n, width)) * self.config.noise_std * (high - low) / 2.0
        noisy = np.clip(batch + noise, low, high)
        chosen = np.where(take_random[:, None], uniform, noisy)
        return chosen[0] if np.ndim(actions) == 1 else chosen

    # -- critic -----------------------------------------------------------

    def _clip_targets(self, targets: np.ndarray) -> np.ndarray:
        if self.config.target_clip:
            return np.clip(targets, -1.0 / (1.0 - self.config.gamma), 0.0)
        return targets

    def critic_target(self, rewards: np.ndarray, next_states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        """One-step TD targets ``r + gamma * Q'(s', pi'(s', g), g)``.

        Episodes have a fixed horizon, so every transition bootstraps.
        """
        next_actions = self.target_policy(next_states, goals)
        q_next = self.q_value(next_states, next_actions, goals, target=True)
        return self._clip_targets(np.asarray(rewards, dtype=np.float64) + self.config.gamma * q_next)

    def mve_target(
        self,
        rewards: np.ndarray,
        next_states: np.ndarray,
        goals: np.ndarray,
        model: DynamicsPredictor,
        env: GoalEnv,
        horizon: Optional[int] = None
    ) -> np.ndarray:
        """H-step value-expansion targets.

        Expands H - 1 steps from the real next state with the target actor and
        the dynamics model, adds the discounted virtual rewards (computed under
        the transition's goal) to the real reward, and bootstraps with the
        target critic at the last state. H = 1 is ``critic_target``.
        """
        horizon = self.config.mve_horizon if horizon is None else horizon
        if horizon < 1:
            raise AgentError(f"MVE horizon must be at least 1, got {horizon}")
        gamma = self.config.gamma
        targets = np.asarray(rewards, dtype=np.float64).copy()
        states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
        goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
        discount = 1.0
        for _ in range(horizon - 1):
            actions = self.target_policy(states, goals)
            states = model.predict_next(states, actions)
            discount *= gamma
            targets = targets + discount * env.transition_reward(states, goals)
        discount *= gamma
        q_last = self.q_value(states, self.target_policy(states, goals), goals, target=True)
        return self._clip_targets(targets + discount * q_last)

    def critic_update(self, batch: RelabeledBatch, targets: Optional[np.ndarray] = None) -> float:
        """One Adam step on the mean squared TD error.

        Args:
            batch: Relabeled batch
            targets: Precomputed targets (MVE); ``critic_target`` of the batch when omitted

        Returns:
            Loss before the step
        """
        self._require_critic()
        if targets is None:
            targets = self.critic_target(batch.rewards, batch.next_states, batch.goals)
        inputs = np.concatenate(
            [self.observe(batch.states, batch.goals), self.scale_actions(batch.actions)], axis=1
        )
        loss, grads = backward(
            self.nets.critic, MeanSquaredError(),
            RegressionBatch(inputs, np.asarray(targets, dtype=np.float64)[:, None])
        )
        self.nets.critic, self.nets.critic_adam = adam_step(
            self.nets.critic, grads, self.nets.critic_adam, self.config.lr_critic
        )
        return loss

    # -- actor ------------------------------------------------------------

    def actor_update_joint(
        self,
        batch: RelabeledBatch,
        sl_mask: Optional[np.ndarray] = None,
        alpha: Optional[float] = None,
        sl_batch: Optional[RelabeledBatch] = None
    ) -> Dict[str, float]:
        """One Adam step on the joint actor loss, with the critic held fixed.

        Args:
            batch: Rows for the policy-gradient term
            sl_mask: Rows of the supervised batch that enter the supervised term;
                the supervised batch's relabel mask when omitted
            alpha: Weight of the supervised term; ``config.sl_weight`` when omitted
            sl_batch: Rows for the supervised term; ``batch`` when omitted

        Returns:
            Dictionary with ``actor_loss``, ``actor_q_term`` and ``sl_loss``
        """
        self._require_critic()
        alpha = self.config.sl_weight if alpha is None else alpha
        sl_batch = batch if sl_batch is None else sl_batch
        sl_mask = sl_batch.sl_mask if sl_mask is None else sl_mask

        q_inputs = self.observe(batch.states, batch.goals)
        sl_inputs = q_inputs if sl_batch is batch else self.observe(sl_batch.states, sl_batch.goals)
        loss_definition = ActorJointLoss(self.nets.critic, alpha)
        # reported on the pre-step actor, like the weighted term
        sl_diagnostic = (
            supervised_action_loss(self.nets.actor, sl_inputs, sl_batch.actions, sl_mask)
            if alpha == 0 else None
        )
        loss, grads = backward(
            self.nets.actor, loss_definition,
            ActorBatch(q_inputs, sl_inputs, sl_batch.actions, np.asarray(sl_mask, dtype=bool))
        )
        self.nets.actor, self.nets.actor_adam = adam_step(
            self.nets.actor, grads, self.nets.actor_adam, self.config.lr_actor
        )
        q_term, sl_term = loss_definition.last_terms
        if sl_diagnostic is not None:
            sl_term = sl_diagnostic
        return {'actor_loss': loss, 'actor_q_term': q_term, 'sl_loss': sl_term}

    def gcsl_update(self, batch: RelabeledBatch) -> float:
        """One Adam step on the supervised action loss over the relabeled rows."""
        inputs = self.observe(batch.states, batch.goals)
        loss, grads = backward(
            self.nets.actor, MeanSquaredError(),
            RegressionBatch(inputs, batch.actions, batch.sl_mask)
        )
        self.nets.actor, self.nets.actor_adam = adam_step(
            self.nets.actor, grads, self.nets.actor_adam, self.config.lr_actor
        )
        return loss

    def update_target_networks(self) -> None:
        """Polyak-average the target networks toward the online networks."""
        self._require_critic()
        self.nets.actor_target = polyak_update(self.nets.actor_target, self.nets.actor, self.config.polyak)
        self.nets.critic_target = polyak_update(self.nets.critic_target, self.nets.critic, self.config.polyak)

    def snapshot(self) -> 'GoalConditionedAgent':
        """Read-only copy sharing no mutable state with this agent."""
        clone = object.__new__(GoalConditionedAgent)
        clone.spec = self.spec
        clone.config = self.config
        clone.actor_only = self.actor_only
        clone.nets = ActorCritic(
            actor=self.nets.actor,
            actor_adam=self.nets.actor_adam,
            state_normalizer=self.nets.state_normalizer.copy(),
            goal_normalizer=self.nets.goal_normalizer.copy(),
            critic=self.nets.critic,
            critic_adam=self.nets.critic_adam,
            actor_target=self.nets.actor_target,
            critic_target=self.nets.critic_target,
        )
        return clone

    # -- checkpoints ------------------------------------------------------

    def save(self, directory: Union[str, Path]) -> None:
        """Write network binaries and the ``agent.json`` sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.nets.actor, directory / 'actor.bin')
        if not self.actor_only:
            save_mlp(self.nets.critic, directory / 'critic.bin')
            save_mlp(self.nets.actor_target, directory / 'actor_target.bin')
            save_mlp(self.nets.critic_target, directory / 'critic_target.bin')
        with open(directory / 'agent.json', 'w') as f:
            json.dump({
                'env': self.spec.name,
                'actor_only': self.actor_only,
                'config': self.config.to_dict(),
                'state_normalizer': self.nets.state_normalizer.state_dict(),
                'goal_normalizer': self.nets.goal_normalizer.state_dict(),
            }, f, indent=2)
        logger.info('Saved agent checkpoint', extra={'path': str(directory)})

    @classmethod
    def load(cls, directory: Union[str, Path], spec: GoalEnvSpec) -> 'GoalConditionedAgent':
        """Restore an agent written by ``save`` (optimizer states start fresh)."""
        directory = Path(directory)
        with open(directory / 'agent.json') as f:
            meta = json.load(f)
        agent = cls(spec, AgentConfig(meta['config']), np.random.default_rng(0),
                    actor_only=meta['actor_only'])
        agent.nets.actor = load_mlp(directory / 'actor.bin')
        agent.nets.actor_adam = AdamState.for_model(agent.nets.actor)
        if not agent.actor_only:
            agent.nets.critic = load_mlp(directory / 'critic.bin')
            agent.nets.critic_adam = AdamState.for_model(agent.nets.critic)
            agent.nets.actor_target = load_mlp(directory / 'actor_target.bin')
            agent.nets.critic_target = load_mlp(directory / 'critic_target.bin')
        agent.nets.state_normalizer = Normalizer.from_state_dict(meta['state_normalizer'])
        agent.nets.goal_normalizer = Normalizer.from_state_dict(meta['goal_normalizer'])
        return agent
