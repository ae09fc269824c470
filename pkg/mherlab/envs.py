"""Goal-conditioned environments with sparse rewards.

Environments are value-semantic: ``reset`` and ``step`` return new
``EnvState`` objects and never mutate their arguments. Every environment also
exposes batch versions (``reset_batch``, ``step_batch``) that operate on arrays
with one row per episode; evaluation and model oracles use those.

Success and reward share one predicate: the achieved goal lies strictly within
``epsilon`` (unsquared Euclidean distance) of the desired goal.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Tuple, Type, Union

import numpy as np
from gymnasium import spaces

from .config import EnvName

DEFAULT_HORIZON = 100


class GoalEnvError(Exception):
    """Raised for invalid environment inputs."""
    pass


@dataclass(frozen=True, eq=False)
class GoalEnvSpec:
    """Geometry and constants of a goal-conditioned task."""

    name: str
    state_dim: int
    action_dim: int
    goal_dim: int
    action_space: spaces.Box
    goal_space: spaces.Box
    epsilon: float
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.epsilon <= 0:
            raise GoalEnvError(f"epsilon must be positive, got {self.epsilon}")
        if self.horizon < 1:
            raise GoalEnvError(f"horizon must be at least 1, got {self.horizon}")
        if self.action_space.shape != (self.action_dim,):
            raise GoalEnvError("action_space does not match action_dim")
        if self.goal_space.shape != (self.goal_dim,):
            raise GoalEnvError("goal_space does not match goal_dim")

    @property
    def action_low(self) -> np.ndarray:
        return self.action_space.low

    @property
    def action_high(self) -> np.ndarray:
        return self.action_space.high


@dataclass(frozen=True, eq=False)
class EnvState:
    """Environment state, desired goal and step counter of one episode."""

    state: np.ndarray
    goal: np.ndarray
    t: int = 0


def _box(low, high) -> spaces.Box:
    return spaces.Box(
        low=np.asarray(low, dtype=np.float64),
        high=np.asarray(high, dtype=np.float64),
        dtype=np.float64,
    )


def goal_distance(achieved_goal: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Euclidean distance along the last axis."""
    achieved_goal = np.asarray(achieved_goal, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if achieved_goal.shape[-1] != goal.shape[-1]:
        raise GoalEnvError(
            f"Goal dimensions differ: {achieved_goal.shape[-1]} vs {goal.shape[-1]}"
        )
    return np.linalg.norm(achieved_goal - goal, axis=-1)


class GoalEnv(ABC):
    """Base class of the goal-conditioned tasks."""

    def __init__(self, spec: GoalEnvSpec):
        self.spec = spec

    @property
    def name(self) -> str:
        return self.spec.name

    @abstractmethod
    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n start states from the legal state space."""

    @abstractmethod
    def sample_goals(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n desired goals from the goal-sampling region."""

    @abstractmethod
    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Apply the transition rule to every row."""

    @abstractmethod
    def phi(self, states: np.ndarray) -> np.ndarray:
        """Project states (any leading shape) onto achieved goals."""

    def reset_batch(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Draw n (start state, desired goal) pairs; states first, then goals."""
        states = self.sample_states(rng, n)
        goals = self.sample_goals(rng, n)
        return states, goals

    def reset(self, rng: np.random.Generator) -> EnvState:
        """Start a new episode."""
        states, goals = self.reset_batch(rng, 1)
        return EnvState(state=states[0], goal=goals[0], t=0)

    def check_actions(self, actions: np.ndarray) -> np.ndarray:
        """Return actions as float64, rejecting any outside the action box."""
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape[-1] != self.spec.action_dim:
            raise GoalEnvError(
                f"Action width {actions.shape[-1]} does not match {self.spec.action_dim}"
            )
        if np.any(actions < self.spec.action_low) or np.any(actions > self.spec.action_high):
            raise GoalEnvError(f"Action outside the action box: {actions}")
        return actions

    def step(self, env_state: EnvState, action: np.ndarray) -> EnvState:
        """Advance one episode by one step.

        Raises:
            GoalEnvError: If the action is outside the action box
        """
        action = self.check_actions(action)
        next_state = self.step_batch(env_state.state[None, :], action[None, :])[0]
        return EnvState(state=next_state, goal=env_state.goal, t=env_state.t + 1)

    def sparse_reward(self, achieved_goal: np.ndarray, goal: np.ndarray) -> Union[float, np.ndarray]:
        """Reward 0 when the achieved goal is strictly within epsilon of the goal, else -1.

        Raises:
            GoalEnvError: If the goal dimensions do not match
        """
        achieved_goal = np.asarray(achieved_goal, dtype=np.float64)
        goal = np.asarray(goal, dtype=np.float64)
        if achieved_goal.shape[-1] != self.spec.goal_dim or goal.shape[-1] != self.spec.goal_dim:
            raise GoalEnvError(
                f"Expected goals of width {self.spec.goal_dim}, "
                f"got {achieved_goal.shape[-1]} and {goal.shape[-1]}"
            )
        reward = -(goal_distance(achieved_goal, goal) >= self.spec.epsilon).astype(np.float64)
        if reward.ndim == 0:
            return float(reward)
        return reward

    def transition_reward(self, next_states: np.ndarray, goals: np.ndarray) -> Union[float, np.ndarray]:
        """Reward of transitions ending in ``next_states`` under ``goals``."""
        return self.sparse_reward(self.phi(next_states), goals)

    def is_success(self, state: np.ndarray, goal: np.ndarray) -> Union[bool, np.ndarray]:
        """Whether the state's achieved goal is within epsilon of the goal."""
        success = self.sparse_reward(self.phi(state), goal) == 0.0
        if np.ndim(success) == 0:
            return bool(success)
        return success


class Point2DLarge(GoalEnv):
    """Point in [-5, 5]^2 moved by bounded displacements; goals are positions."""

    BOUND = 5.0

    def __init__(self, horizon: int = DEFAULT_HORIZON, name: str = EnvName.POINT2D_LARGE):
        super().__init__(GoalEnvSpec(
            name=name,
            state_dim=2,
            action_dim=2,
            goal_dim=2,
            action_space=_box([-1.0, -1.0], [1.0, 1.0]),
            goal_space=_box([-self.BOUND] * 2, [self.BOUND] * 2),
            epsilon=1.0,
            horizon=horizon,
        ))

    def _uniform_positions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-self.BOUND, self.BOUND, size=(n, 2))

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self._uniform_positions(rng, n)

    def sample_goals(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self._uniform_positions(rng, n)

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(states) + actions, -self.BOUND, self.BOUND)

    def phi(self, states: np.ndarray) -> np.ndarray:
        return np.array(states, dtype=np.float64, copy=True)


class Point2DFourRoom(Point2DLarge):
    """Point2DLarge split into four rooms by walls along x=0 and y=0.

    Each half-wall has one door of width 1 centered at +-2.5 along the wall.
    A move whose segment meets a closed wall stops at the first intersection,
    backed off the wall by ``WALL_MARGIN`` on the side it came from.
    """

    WALL_MARGIN = 1e-3
    DOOR_CENTERS = (-2.5, 2.5)
    DOOR_HALF_WIDTH = 0.5

    def __init__(self, horizon: int = DEFAULT_HORIZON):
        super().__init__(horizon=horizon, name=EnvName.POINT2D_FOURROOM)

    def _closed(self, along: np.ndarray) -> np.ndarray:
        """Whether a wall is closed at a coordinate along the wall."""
        along = np.asarray(along)
        open_ = np.zeros(along.shape, dtype=bool)
        for center in self.DOOR_CENTERS:
            open_ |= np.abs(along - center) < self.DOOR_HALF_WIDTH
        return ~open_

    def in_wall(self, states: np.ndarray, tolerance: float = 1e-12) -> np.ndarray:
        """Whether states lie on a closed wall segment."""
        states = np.atleast_2d(states)
        on_vertical = (np.abs(states[:, 0]) <= tolerance) & self._closed(states[:, 1])
        on_horizontal = (np.abs(states[:, 1]) <= tolerance) & self._closed(states[:, 0])
        return on_vertical | on_horizontal

    def _uniform_positions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        positions = super()._uniform_positions(rng, n)
        rejected = self.in_wall(positions, tolerance=self.WALL_MARGIN)
        while np.any(rejected):
            positions[rejected] = super()._uniform_positions(rng, int(rejected.sum()))
            rejected = self.in_wall(positions, tolerance=self.WALL_MARGIN)
        return positions

    def _door_exit(self, along_start: np.ndarray, along_end: np.ndarray,
                   on_plane: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Where a move sliding along a wall plane leaves the door it starts in.

        Returns the fraction of the move at the door edge (``inf`` when the
        move stays in the door) and the stop coordinate, backed off the edge.
        """
        centers = np.asarray(self.DOOR_CENTERS)
        center = centers[np.argmin(np.abs(along_start[:, None] - centers), axis=1)]
        direction = np.sign(along_end - along_start)
        edge = center + direction * self.DOOR_HALF_WIDTH
        leaves = on_plane & (direction != 0.0) & (direction * (along_end - edge) >= 0.0)
        with np.errstate(divide='ignore', invalid='ignore'):
            t = np.where(leaves, (edge - along_start) / (along_end - along_start), np.inf)
        stop = edge - direction * self.WALL_MARGIN
        stop = np.where(direction * (stop - along_start) < 0.0, along_start, stop)
        return t, stop

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        targets = super().step_batch(states, actions)
        delta = targets - states

        crossing_hits, door_exits, exit_stops = [], [], []
        for axis in (0, 1):
            start = states[:, axis]
            end = targets[:, axis]
            crosses = (start != 0.0) & (
                ((start < 0.0) & (end >= 0.0)) | ((start > 0.0) & (end <= 0.0))
            )
            with np.errstate(divide='ignore', invalid='ignore'):
                t = np.where(crosses, -start / (end - start), np.inf)
                along = states[:, 1 - axis] + np.where(crosses, t, 0.0) * delta[:, 1 - axis]
            crossing_hits.append(np.where(crosses & self._closed(along), t, np.inf))

            # a point on the plane that stays on it slides inside its door
            t_exit, stop = self._door_exit(
                states[:, 1 - axis], targets[:, 1 - axis], (start == 0.0) & (end == 0.0)
            )
            door_exits.append(t_exit)
            exit_stops.append(stop)

        t_stop = np.minimum.reduce(crossing_hits + door_exits)
        blocked = np.isfinite(t_stop)
        if not np.any(blocked):
            return targets

        result = targets.copy()
        result[blocked] = states[blocked] + t_stop[blocked, None] * delta[blocked]
        for axis in (0, 1):
            at_wall = blocked & (crossing_hits[axis] == t_stop)
            result[at_wall, axis] = np.sign(states[at_wall, axis]) * self.WALL_MARGIN
            at_edge = blocked & (door_exits[axis] == t_stop)
            result[at_edge, 1 - axis] = exit_stops[axis][at_edge]
        return result


class PlanarReacher(GoalEnv):
    """Two-link planar arm driven by joint torques; goals are fingertip positions.

    State is (theta1, theta2, omega1, omega2, tip_x, tip_y). One step applies
    ``omega' = DAMPING * (omega + DT * TORQUE_GAIN * torque)`` and
    ``theta' = theta + DT * omega'``, then recomputes the tip by forward
    kinematics. ``TORQUE_GAIN`` is the inverse joint inertia: at full torque a
    joint settles near 4.5 rad/s, so one episode can swing the arm around.
    Goals are uniform in the disk of radius 0.95 * (L1 + L2), excluding the
    unreachable center of radius |L1 - L2|; start angles are redrawn until the
    tip lies in that same region.
    """

    LINK_1 = 0.1
    LINK_2 = 0.11
    DT = 0.05
    DAMPING = 0.9
    TORQUE_GAIN = 10.0
    GOAL_RADIUS_SCALE = 0.95

    def __init__(self, horizon: int = DEFAULT_HORIZON):
        reach = self.LINK_1 + self.LINK_2
        super().__init__(GoalEnvSpec(
            name=EnvName.PLANAR_REACHER,
            state_dim=6,
            action_dim=2,
            goal_dim=2,
            action_space=_box([-1.0, -1.0], [1.0, 1.0]),
            goal_space=_box([-reach, -reach], [reach, reach]),
            epsilon=0.02,
            horizon=horizon,
        ))

    @classmethod
    def fingertip(cls, angles: np.ndarray) -> np.ndarray:
        """Forward kinematics of the two-link arm."""
        angles = np.asarray(angles, dtype=np.float64)
        theta1 = angles[..., 0]
        theta12 = angles[..., 0] + angles[..., 1]
        x = cls.LINK_1 * np.cos(theta1) + cls.LINK_2 * np.cos(theta12)
        y = cls.LINK_1 * np.sin(theta1) + cls.LINK_2 * np.sin(theta12)
        return np.stack([x, y], axis=-1)

    @property
    def goal_radii(self) -> Tuple[float, float]:
        """Inner and outer radius of the goal-sampling annulus."""
        outer = self.GOAL_RADIUS_SCALE * (self.LINK_1 + self.LINK_2)
        return abs(self.LINK_1 - self.LINK_2), outer

    def _in_goal_region(self, points: np.ndarray) -> np.ndarray:
        inner, outer = self.goal_radii
        radius = np.linalg.norm(points, axis=-1)
        return (radius >= inner) & (radius <= outer)

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # start tips lie in the goal region
        angles = rng.uniform(-np.pi, np.pi, size=(n, 2))
        rejected = ~self._in_goal_region(self.fingertip(angles))
        while np.any(rejected):
            angles[rejected] = rng.uniform(-np.pi, np.pi, size=(int(rejected.sum()), 2))
            rejected = ~self._in_goal_region(self.fingertip(angles))
        velocities = np.zeros((n, 2))
        return np.concatenate([angles, velocities, self.fingertip(angles)], axis=1)

    def sample_goals(self, rng: np.random.Generator, n: int) -> np.ndarray:
        inner, outer = self.goal_radii
        radius = outer * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        while np.any(radius < inner):
            short = radius < inner
            radius[short] = outer * np.sqrt(rng.uniform(0.0, 1.0, size=int(short.sum())))
        heading = rng.uniform(-np.pi, np.pi, size=n)
        return np.stack([radius * np.cos(heading), radius * np.sin(heading)], axis=1)

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        velocities = self.DAMPING * (states[:, 2:4] + self.DT * self.TORQUE_GAIN * actions)
        angles = states[:, 0:2] + self.DT * velocities
        return np.concatenate([angles, velocities, self.fingertip(angles)], axis=1)

    def phi(self, states: np.ndarray) -> np.ndarray:
        return np.array(np.asarray(states)[..., 4:6], dtype=np.float64, copy=True)


ENVIRONMENTS: Dict[str, Type[GoalEnv]] = {
    EnvName.POINT2D_LARGE: Point2DLarge,
    EnvName.POINT2D_FOURROOM: Point2DFourRoom,
    EnvName.PLANAR_REACHER: PlanarReacher,
}


def make_env(name: str, horizon: int = DEFAULT_HORIZON) -> GoalEnv:
    """Create an environment by its command-line name.

    Raises:
        GoalEnvError: If the name is unknown
    """
    if name not in ENVIRONMENTS:
        raise GoalEnvError(
            f"Unknown environment: {name}. Must be one of: {', '.join(ENVIRONMENTS)}"
        )
    return ENVIRONMENTS[name](horizon=horizon)
