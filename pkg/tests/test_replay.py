import numpy as np
import pytest

from mherlab.config import RelabelMode
from mherlab.envs import Point2DLarge
from mherlab.replay import (
    Episode,
    EpisodeBuffer,
    RelabeledBatch,
    ReplayError,
    relabel_baseline,
    relabel_distances,
    relabel_her_future,
)


def random_episode(env, rng, horizon=None):
    horizon = horizon or env.spec.horizon
    state, goal = env.reset_batch(rng, 1)
    states = [state[0]]
    actions = rng.uniform(-1, 1, size=(horizon, env.spec.action_dim))
    for a in actions:
        states.append(env.step_batch(states[-1][None], a[None])[0])
    states = np.stack(states)
    return Episode(states, actions, env.transition_reward(states[1:], goal[0]), goal[0])


def filled_buffer(env, rng, episodes=5, capacity=1_000_000):
    buffer = EpisodeBuffer.for_env(env, capacity=capacity)
    for _ in range(episodes):
        buffer.store_episode(random_episode(env, rng))
    return buffer


class TestEpisodeBuffer:
    def test_one_episode_has_horizon_transitions(self, point_env, rng):
        buffer = filled_buffer(point_env, rng, episodes=1)
        assert buffer.size == 100

    def test_fifo_eviction_by_episode(self, point_env, rng):
        buffer = EpisodeBuffer.for_env(point_env, capacity=200)
        ids = [buffer.store_episode(random_episode(point_env, rng)) for _ in range(3)]
        assert buffer.size == 200
        assert not buffer.contains_episode(ids[0])
        assert buffer.contains_episode(ids[1]) and buffer.contains_episode(ids[2])
        with pytest.raises(ReplayError):
            buffer.episode(ids[0])

    def test_future_states_are_addressable(self, point_env, rng):
        episode = random_episode(point_env, rng)
        buffer = EpisodeBuffer.for_env(point_env)
        episode_id = buffer.store_episode(episode)
        future = buffer.future_states(episode_id, 37)
        assert np.array_equal(future, episode.states[38:])

    def test_wrong_length_rejected(self, point_env, rng):
        buffer = EpisodeBuffer.for_env(point_env)
        with pytest.raises(ReplayError):
            buffer.store_episode(random_episode(point_env, rng, horizon=50))

    def test_ragged_transitions_rejected(self, point_env, rng):
        transitions = random_episode(point_env, rng).transitions()
        del transitions[10]
        with pytest.raises(ReplayError):
            EpisodeBuffer.for_env(point_env).store_episode(transitions)

    def test_transitions_round_trip(self, point_env, rng):
        episode = random_episode(point_env, rng)
        rebuilt = Episode.from_transitions(episode.transitions())
        assert np.array_equal(rebuilt.states, episode.states)

    def test_dump_csv(self, point_env, rng, tmp_path):
        buffer = filled_buffer(point_env, rng, episodes=2)
        rows = buffer.dump_csv(tmp_path / 'buffer.csv')
        lines = (tmp_path / 'buffer.csv').read_text().splitlines()
        assert rows == 200 and len(lines) == 201
        assert lines[0].startswith('episode_id,t,state_0')


class TestSampling:
    def test_same_seed_same_sample(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        a = buffer.sample_transitions(32, np.random.default_rng(5))
        b = buffer.sample_transitions(32, np.random.default_rng(5))
        assert np.array_equal(a.states, b.states) and np.array_equal(a.t, b.t)

    def test_single_transition_sampled_with_replacement(self, rng):
        env = Point2DLarge(horizon=1)
        buffer = EpisodeBuffer.for_env(env)
        buffer.store_episode(random_episode(env, rng))
        batch = buffer.sample_transitions(3, rng)
        assert len(batch) == 3
        assert np.all(batch.states == batch.states[0])

    def test_uniform_over_transitions(self, rng):
        env = Point2DLarge(horizon=100)
        buffer = filled_buffer(env, rng, episodes=1)
        batch = buffer.sample_transitions(100_000, np.random.default_rng(6))
        counts = np.bincount(batch.t, minlength=100)
        expected = 1000.0
        sigma = np.sqrt(100_000 * 0.01 * 0.99)
        assert np.all(np.abs(counts - expected) < 5 * sigma)

    def test_empty_buffer(self, point_env, rng):
        with pytest.raises(ReplayError):
            EpisodeBuffer.for_env(point_env).sample_transitions(4, rng)

    def test_next_state_follows_state(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(64, rng)
        for i in range(len(batch)):
            episode = buffer.episode(batch.episode_ids[i])
            assert np.array_equal(batch.next_states[i], episode.states[batch.t[i] + 1])


class TestHerFuture:
    def test_zero_probability_leaves_batch_unchanged(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(64, rng)
        relabeled = relabel_her_future(batch, buffer, point_env, 0.0, rng)
        assert not relabeled.sl_mask.any()
        assert np.array_equal(relabeled.goals, batch.goals)
        assert np.array_equal(relabeled.rewards, batch.rewards)

    def test_goals_come_from_the_same_episode_future(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(256, rng)
        relabeled = relabel_her_future(batch, buffer, point_env, 1.0, rng)
        for i in range(len(batch)):
            k = relabeled.candidate_index[i]
            assert 1 <= k <= 100 - batch.t[i]
            future = buffer.episode(batch.episode_ids[i]).states[batch.t[i] + k]
            assert np.array_equal(relabeled.goals[i], point_env.phi(future))

    def test_reward_recomputed_from_next_state(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(256, rng)
        relabeled = relabel_her_future(batch, buffer, point_env, 1.0, rng)
        expected = point_env.transition_reward(batch.next_states, relabeled.goals)
        assert np.array_equal(relabeled.rewards, expected)
        own_goal = relabeled.candidate_index == 1
        assert np.all(relabeled.rewards[own_goal] == 0.0)

    def test_relabeled_fraction(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(10_000, rng)
        relabeled = relabel_her_future(batch, buffer, point_env, 0.8, np.random.default_rng(7))
        assert 0.78 <= relabeled.relabeled_fraction() <= 0.82

    def test_evicted_rows_are_stale(self, point_env, rng):
        buffer = EpisodeBuffer.for_env(point_env, capacity=100)
        buffer.store_episode(random_episode(point_env, rng))
        batch = buffer.sample_transitions(16, rng)
        buffer.store_episode(random_episode(point_env, rng))
        relabeled = relabel_her_future(batch, buffer, point_env, 1.0, rng)
        assert relabeled.stale_rows.all()
        assert not relabeled.sl_mask.any()
        assert np.array_equal(relabeled.goals, batch.goals)


class TestBaselines:
    def test_zero_noise_equals_her_future(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(128, rng)
        her = relabel_her_future(batch, buffer, point_env, 0.8, np.random.default_rng(8))
        noisy = relabel_baseline(batch, buffer, point_env, RelabelMode.GOAL_NOISE, 0.0,
                                 np.random.default_rng(8))
        assert np.array_equal(her.goals, noisy.goals)
        assert np.array_equal(her.rewards, noisy.rewards)
        assert np.array_equal(her.sl_mask, noisy.sl_mask)

    def test_goal_noise_magnitude(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(20_000, rng)
        her = relabel_her_future(batch, buffer, point_env, 0.8, np.random.default_rng(9))
        noisy = relabel_baseline(batch, buffer, point_env, RelabelMode.GOAL_NOISE, 0.01,
                                 np.random.default_rng(9))
        mask = her.sl_mask
        deviation = np.abs(noisy.goals[mask] - her.goals[mask]).mean(axis=0)
        assert deviation == pytest.approx(np.full(2, 0.01 * np.sqrt(2 / np.pi)), rel=0.05)

    def test_random_goals_are_uniform(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(20_000, rng)
        relabeled = relabel_baseline(batch, buffer, point_env, RelabelMode.RANDOM, 0.0,
                                     np.random.default_rng(10), p_relabel=1.0)
        goals = np.sort(relabeled.goals, axis=0)
        n = goals.shape[0]
        cdf = (goals + 5.0) / 10.0
        empirical = np.arange(1, n + 1)[:, None] / n
        ks = np.max(np.abs(empirical - cdf), axis=0)
        # 1% critical value of the one-sample Kolmogorov-Smirnov statistic
        assert np.all(ks < 1.63 / np.sqrt(n))

    def test_unknown_mode(self, point_env, rng):
        buffer = filled_buffer(point_env, rng)
        batch = buffer.sample_transitions(4, rng)
        with pytest.raises(ReplayError):
            relabel_baseline(batch, buffer, point_env, RelabelMode.MBR, 0.0, rng)


def test_relabel_distances_non_negative(point_env, rng):
    buffer = filled_buffer(point_env, rng)
    batch = buffer.sample_transitions(64, rng)
    relabeled = relabel_her_future(batch, buffer, point_env, 0.8, rng)
    assert np.all(relabel_distances(relabeled) >= 0.0)
    unchanged = RelabeledBatch.unchanged(batch)
    assert np.all(relabel_distances(unchanged) == 0.0)
