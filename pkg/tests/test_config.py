import json

import pytest
import yaml

from mherlab.config import (
    ALGO_DEFAULTS,
    AgentConfig,
    Algo,
    Config,
    ConfigurationError,
    RelabelMode,
    RunConfig,
)


@pytest.fixture
def no_env(tmp_path, monkeypatch):
    for name in ('MHER_LOG_LEVEL', 'MHER_LOG_DIR', 'MHER_LOG_FILE', 'MHER_OUTPUT_DIR'):
        monkeypatch.delenv(name, raising=False)
    return tmp_path / 'missing.env'


class TestAgentConfig:
    def test_defaults(self):
        config = AgentConfig()
        assert config.gamma == 0.98
        assert config.alpha == 3.0
        assert config.n_mbr_steps == 5
        assert config.polyak == 0.9
        assert config.eps_random == 0.3
        assert config.relabel_mode == RelabelMode.MBR
        assert config.target_clip is True
        assert config.sl_weight == 3.0

    @pytest.mark.parametrize('settings', [
        {'gamma': 1.0},
        {'gamma': 0.0},
        {'alpha': -1.0},
        {'n_mbr_steps': -1},
        {'p_relabel': 1.5},
        {'eps_random': -0.1},
        {'relabel_mode': 'hindsight'},
        {'use_sl': 'yes'},
        {'hidden_units': 2.5},
        {'lr_actor': 'fast'},
    ])
    def test_invalid(self, settings):
        with pytest.raises(ConfigurationError):
            AgentConfig(settings)

    def test_supervised_weight_needs_flag(self):
        assert AgentConfig({'alpha': 3.0, 'use_sl': False}).sl_weight == 0.0

    def test_replace(self):
        config = AgentConfig().replace(alpha=1.0)
        assert config.alpha == 1.0
        assert config.to_dict()['gamma'] == 0.98


class TestRunConfig:
    def test_algorithm_defaults(self):
        for algo in Algo.ALL:
            agent = RunConfig({'algo': algo}).agent
            for key, value in ALGO_DEFAULTS[algo].items():
                assert getattr(agent, key) == value

    def test_model_usage(self):
        assert RunConfig({'algo': 'mher'}).uses_model
        assert RunConfig({'algo': 'mve'}).uses_model
        assert not RunConfig({'algo': 'her'}).uses_model
        assert RunConfig({'algo': 'ddpg', 'relabel_mode': 'mbr'}).uses_model

    def test_explicit_alpha_switches_supervised_term(self):
        assert RunConfig({'algo': 'her', 'alpha': 3.0}).agent.sl_weight == 3.0
        assert RunConfig({'algo': 'mher', 'alpha': 0.0}).agent.sl_weight == 0.0
        assert RunConfig({'algo': 'her', 'alpha': 3.0, 'use_sl': False}).agent.sl_weight == 0.0

    def test_episodes_per_epoch_follows_environment(self):
        assert RunConfig({'env': 'point2d-large'}).episodes_per_epoch == 1
        assert RunConfig({'env': 'planar-reacher'}).episodes_per_epoch == 15
        assert RunConfig({'env': 'planar-reacher', 'episodes_per_epoch': 4}).episodes_per_epoch == 4

    def test_run_name(self):
        assert RunConfig({'algo': 'ddpg-sl', 'seed': 7}).run_name == 'point2d-large_ddpg-sl_seed7'

    def test_buffer_must_hold_an_episode(self):
        with pytest.raises(ConfigurationError):
            RunConfig({'buffer_size': 50, 'horizon': 100})

    @pytest.mark.parametrize('settings', [
        {'env': 'fetch-reach'},
        {'algo': 'sac'},
        {'seed': -1},
        {'epochs': 0},
    ])
    def test_invalid(self, settings):
        with pytest.raises(ConfigurationError):
            RunConfig(settings)

    @pytest.mark.parametrize('mode', ['none', 'mbr', 'random', 'goal-noise'])
    def test_gcsl_needs_hindsight_relabeling(self, mode):
        with pytest.raises(ConfigurationError):
            RunConfig({'algo': 'gcsl', 'relabel_mode': mode})

    def test_gcsl_with_hindsight_relabeling(self):
        config = RunConfig({'algo': 'gcsl', 'relabel_mode': 'her-future'})
        assert config.agent.relabel_mode == RelabelMode.HER_FUTURE

    def test_replace_algorithm_resets_its_defaults(self):
        config = RunConfig({'algo': 'mher', 'hidden_units': 32}).replace(algo='her')
        assert config.agent.relabel_mode == RelabelMode.HER_FUTURE
        assert config.agent.sl_weight == 0.0
        assert config.agent.hidden_units == 32
        assert not config.uses_model

    def test_to_dict_round_trip(self):
        config = RunConfig({'algo': 'gcsl', 'seed': 2, 'gamma': 0.9})
        assert RunConfig(config.to_dict()).to_dict() == config.to_dict()


class TestConfigFile:
    def test_json_file_with_run_section(self, tmp_path, no_env):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({
            'default_settings': {'log_level': 'DEBUG'},
            'run': {'algo': 'her', 'epochs': 3},
        }))
        config = Config(path, env_file=no_env)
        assert config.run.algo == 'her'
        assert config.run.epochs == 3
        assert config['log_level'] == 'DEBUG'

    def test_flat_yaml_file(self, tmp_path, no_env):
        path = tmp_path / 'config.yaml'
        path.write_text(yaml.safe_dump({'env': 'point2d-fourroom', 'alpha': 1.0}))
        config = Config(path, env_file=no_env)
        assert config.run.env == 'point2d-fourroom'
        assert config.run.agent.alpha == 1.0

    def test_overrides_win(self, tmp_path, no_env):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'run': {'seed': 1, 'epochs': 3}}))
        config = Config(path, env_file=no_env, overrides={'seed': 4, 'epochs': None})
        assert config.run.seed == 4
        assert config.run.epochs == 3

    def test_environment_variables(self, tmp_path, no_env, monkeypatch):
        monkeypatch.setenv('MHER_LOG_LEVEL', 'WARNING')
        monkeypatch.setenv('MHER_OUTPUT_DIR', str(tmp_path / 'elsewhere'))
        config = Config(env_file=no_env)
        assert config['log_level'] == 'WARNING'
        assert config.run.output_dir == str(tmp_path / 'elsewhere')

    def test_dotenv_file(self, tmp_path, no_env, monkeypatch):
        env_file = tmp_path / '.env'
        env_file.write_text('MHER_LOG_DIR=/tmp/mher-logs\n')
        # restored to absent on teardown
        monkeypatch.setenv('MHER_LOG_DIR', 'unset')
        monkeypatch.delenv('MHER_LOG_DIR')
        config = Config(env_file=env_file)
        assert config.get('log_dir') == '/tmp/mher-logs'

    def test_defaults_without_file(self, no_env):
        config = Config(env_file=no_env)
        assert config['log_level'] == 'INFO'
        assert config.get('log_file', 'none') == 'none'
        with pytest.raises(KeyError):
            config['nonexistent']

    def test_unreadable_file(self, tmp_path, no_env):
        path = tmp_path / 'config.json'
        path.write_text('{not json')
        with pytest.raises(ConfigurationError):
            Config(path, env_file=no_env)

    def test_missing_file(self, tmp_path, no_env):
        with pytest.raises(ConfigurationError):
            Config(tmp_path / 'absent.json', env_file=no_env)

    def test_non_object_file(self, tmp_path, no_env):
        path = tmp_path / 'config.json'
        path.write_text('[1, 2]')
        with pytest.raises(ConfigurationError):
            Config(path, env_file=no_env)
