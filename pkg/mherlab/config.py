"""Configuration module for mherlab training runs."""

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv


class ConfigurationError(Exception):
    """Custom exception for configuration errors."""
    pass


class Algo:
    """Enumeration of supported training algorithms."""
    DDPG = "ddpg"
    HER = "her"
    MHER = "mher"
    GCSL = "gcsl"
    MVE = "mve"
    DDPG_SL = "ddpg-sl"

    ALL = (DDPG, HER, MHER, GCSL, MVE, DDPG_SL)

    @classmethod
    def is_valid(cls, algo: str) -> bool:
        """Check if an algorithm name is valid."""
        return algo in cls.ALL

    @classmethod
    def uses_model(cls, algo: str) -> bool:
        """Whether the algorithm trains and queries a dynamics model."""
        return algo in {cls.MHER, cls.MVE, cls.DDPG_SL}


class RelabelMode:
    """Enumeration of goal relabeling strategies."""
    HER_FUTURE = "her-future"
    MBR = "mbr"
    RANDOM = "random"
    GOAL_NOISE = "goal-noise"
    NONE = "none"

    ALL = (HER_FUTURE, MBR, RANDOM, GOAL_NOISE, NONE)

    @classmethod
    def is_valid(cls, mode: str) -> bool:
        """Check if a relabel mode is valid."""
        return mode in cls.ALL


class EnvName:
    """Enumeration of environment names accepted on the command line."""
    POINT2D_LARGE = "point2d-large"
    POINT2D_FOURROOM = "point2d-fourroom"
    PLANAR_REACHER = "planar-reacher"

    ALL = (POINT2D_LARGE, POINT2D_FOURROOM, PLANAR_REACHER)

    @classmethod
    def is_valid(cls, name: str) -> bool:
        """Check if an environment name is valid."""
        return name in cls.ALL


# Per-algorithm defaults; explicit settings always win.
ALGO_DEFAULTS: Dict[str, Dict[str, Any]] = {
    Algo.DDPG: {'relabel_mode': RelabelMode.NONE, 'alpha': 0.0, 'use_sl': False},
    Algo.HER: {'relabel_mode': RelabelMode.HER_FUTURE, 'alpha': 0.0, 'use_sl': False},
    Algo.MHER: {'relabel_mode': RelabelMode.MBR, 'alpha': 3.0, 'use_sl': True},
    Algo.GCSL: {'relabel_mode': RelabelMode.HER_FUTURE, 'alpha': 0.0, 'use_sl': False},
    Algo.MVE: {'relabel_mode': RelabelMode.NONE, 'alpha': 0.0, 'use_sl': False},
    Algo.DDPG_SL: {'relabel_mode': RelabelMode.HER_FUTURE, 'alpha': 3.0, 'use_sl': True},
}

# Episodes collected per epoch when the run config does not say otherwise.
ENV_EPISODES_PER_EPOCH = {
    EnvName.POINT2D_LARGE: 1,
    EnvName.POINT2D_FOURROOM: 1,
    EnvName.PLANAR_REACHER: 15,
}


class _Settings:
    """Shared validation helpers for dictionary-backed settings."""

    def __init__(self, settings: Dict[str, Any]):
        self._settings = settings

    def _float(
        self,
        key: str,
        default: float,
        low: Optional[float] = None,
        high: Optional[float] = None,
        low_open: bool = False,
        high_open: bool = False
    ) -> float:
        """Validate and return a real-valued field."""
        raw = self._settings.get(key, default)
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise ConfigurationError(f"Invalid {key}: {raw!r} is not a number")
        if low is not None and (value < low or (low_open and value == low)):
            raise ConfigurationError(f"Invalid {key}: {value} is below the allowed range")
        if high is not None and (value > high or (high_open and value == high)):
            raise ConfigurationError(f"Invalid {key}: {value} is above the allowed range")
        return value

    def _int(self, key: str, default: Optional[int], minimum: int = 1) -> Optional[int]:
        """Validate and return an integer field."""
        raw = self._settings.get(key, default)
        if raw is None:
            return None
        if isinstance(raw, bool) or not isinstance(raw, (int, float, str)):
            raise ConfigurationError(f"Invalid {key}: {raw!r} is not an integer")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigurationError(f"Invalid {key}: {raw!r} is not an integer")
        if isinstance(raw, float) and raw != value:
            raise ConfigurationError(f"Invalid {key}: {raw!r} is not an integer")
        if value < minimum:
            raise ConfigurationError(f"Invalid {key}: must be at least {minimum}, got {value}")
        return value

    def _bool(self, key: str, default: bool) -> bool:
        """Validate and return a boolean flag."""
        raw = self._settings.get(key, default)
        if not isinstance(raw, bool):
            raise ConfigurationError(f"Invalid {key}: {raw!r} is not a boolean")
        return raw

    def _choice(self, key: str, default: Optional[str], validator) -> str:
        """Validate and return an enumerated string field."""
        value = self._settings.get(key, default)
        if not isinstance(value, str) or not validator(value):
            raise ConfigurationError(f"Invalid {key}: {value!r}")
        return value


class AgentConfig(_Settings):
    """Hyperparameters of a goal-conditioned agent."""

    FIELDS = (
        'gamma', 'alpha', 'n_mbr_steps', 'lr_actor', 'lr_critic', 'lr_model',
        'polyak', 'eps_random', 'noise_std', 'p_relabel', 'relabel_mode',
        'use_sl', 'target_clip', 'normalize_obs', 'clip_obs', 'goal_noise_std',
        'mve_horizon', 'hidden_units', 'actor_layers', 'model_layers',
    )

    def __init__(self, settings: Optional[Dict[str, Any]] = None):
        """Initialize agent settings from a dictionary.

        Args:
            settings: Dictionary of agent settings; missing keys use defaults

        Raises:
            ConfigurationError: If any setting is invalid
        """
        super().__init__(settings or {})
        self.gamma = self._float('gamma', 0.98, 0.0, 1.0, low_open=True, high_open=True)
        self.alpha = self._float('alpha', 3.0, 0.0)
        self.n_mbr_steps = self._int('n_mbr_steps', 5, minimum=0)
        self.lr_actor = self._float('lr_actor', 1e-3, 0.0, low_open=True)
        self.lr_critic = self._float('lr_critic', 1e-3, 0.0, low_open=True)
        self.lr_model = self._float('lr_model', 1e-3, 0.0, low_open=True)
        self.polyak = self._float('polyak', 0.9, 0.0, 1.0)
        self.eps_random = self._float('eps_random', 0.3, 0.0, 1.0)
        self.noise_std = self._float('noise_std', 0.2, 0.0)
        self.p_relabel = self._float('p_relabel', 0.8, 0.0, 1.0)
        self.relabel_mode = self._choice('relabel_mode', RelabelMode.MBR, RelabelMode.is_valid)
        self.use_sl = self._bool('use_sl', True)
        self.target_clip = self._bool('target_clip', True)
        self.normalize_obs = self._bool('normalize_obs', True)
        self.clip_obs = self._float('clip_obs', 5.0, 0.0, low_open=True)
        self.goal_noise_std = self._float('goal_noise_std', 0.01, 0.0)
        self.mve_horizon = self._int('mve_horizon', 3, minimum=1)
        self.hidden_units = self._int('hidden_units', 256)
        self.actor_layers = self._int('actor_layers', 3)
        self.model_layers = self._int('model_layers', 4)

    @property
    def sl_weight(self) -> float:
        """Effective weight of the supervised term in the actor loss."""
        return self.alpha if self.use_sl else 0.0

    def replace(self, **changes: Any) -> 'AgentConfig':
        """Return a copy with some settings changed."""
        settings = self.to_dict()
        settings.update(changes)
        return AgentConfig(settings)

    def to_dict(self) -> Dict[str, Any]:
        """Convert settings to a dictionary."""
        return {key: getattr(self, key) for key in self.FIELDS}


class RunConfig(_Settings):
    """Settings of one training run (one environment, one algorithm, one seed)."""

    FIELDS = (
        'env', 'algo', 'seed', 'epochs', 'episodes_per_epoch', 'batches_per_episode',
        'batch_size', 'model_updates_per_batch', 'warmup_updates', 'warmup_batch_size',
        'warmup_episodes', 'eval_episodes', 'ed_episodes', 'buffer_size', 'horizon',
        'output_dir', 'dump_buffer',
    )

    def __init__(self, settings: Dict[str, Any]):
        """Initialize run settings from a flat dictionary.

        Agent hyperparameters are read from the same dictionary; the algorithm's
        defaults fill in any agent field that is not given explicitly.

        Args:
            settings: Dictionary of run and agent settings

        Raises:
            ConfigurationError: If any setting is invalid
        """
        super().__init__(settings)
        self.env = self._choice('env', EnvName.POINT2D_LARGE, EnvName.is_valid)
        self.algo = self._choice('algo', Algo.MHER, Algo.is_valid)
        self.seed = self._int('seed', 0, minimum=0)
        self.epochs = self._int('epochs', 30)
        self.episodes_per_epoch = self._int(
            'episodes_per_epoch', ENV_EPISODES_PER_EPOCH[self.env]
        )
        self.batches_per_episode = self._int('batches_per_episode', 5)
        self.batch_size = self._int('batch_size', 64)
        self.model_updates_per_batch = self._int('model_updates_per_batch', 2)
        self.warmup_updates = self._int('warmup_updates', 100)
        self.warmup_batch_size = self._int('warmup_batch_size', 512)
        self.warmup_episodes = self._int('warmup_episodes', 10)
        self.eval_episodes = self._int('eval_episodes', 100)
        self.ed_episodes = self._int('ed_episodes', 10)
        self.buffer_size = self._int('buffer_size', 1_000_000)
        self.horizon = self._int('horizon', 100)
        self.output_dir = str(settings.get('output_dir') or 'runs')
        self.dump_buffer = self._bool('dump_buffer', False)

        if self.buffer_size < self.horizon:
            raise ConfigurationError(
                f"buffer_size ({self.buffer_size}) must hold at least one episode "
                f"of {self.horizon} steps"
            )

        agent_settings = dict(ALGO_DEFAULTS[self.algo])
        explicit = {k: v for k, v in settings.items() if k in AgentConfig.FIELDS}
        agent_settings.update(explicit)
        # an explicit alpha switches the supervised term on or off
        if 'alpha' in explicit and 'use_sl' not in explicit:
            agent_settings['use_sl'] = self._float('alpha', 0.0, 0.0) > 0
        self.agent = AgentConfig(agent_settings)

        if self.algo == Algo.GCSL and self.agent.relabel_mode != RelabelMode.HER_FUTURE:
            raise ConfigurationError(
                f"algo {Algo.GCSL} trains on hindsight-relabeled rows and needs "
                f"relabel_mode {RelabelMode.HER_FUTURE}, got {self.agent.relabel_mode}"
            )

    @property
    def uses_model(self) -> bool:
        """Whether this run trains a dynamics model."""
        return Algo.uses_model(self.algo) or self.agent.relabel_mode == RelabelMode.MBR

    @property
    def run_name(self) -> str:
        """Directory name identifying the run inside the output directory."""
        return f"{self.env}_{self.algo}_seed{self.seed}"

    def replace(self, **changes: Any) -> 'RunConfig':
        """Return a copy with some settings changed.

        Changing ``algo`` also resets the agent settings that come from the
        algorithm's defaults, unless they are changed in the same call.
        """
        settings = self.to_dict()
        if changes.get('algo', self.algo) != self.algo:
            for key in ALGO_DEFAULTS[self.algo]:
                settings.pop(key)
        settings.update(changes)
        return RunConfig(settings)

    def to_dict(self) -> Dict[str, Any]:
        """Convert settings to a flat dictionary (run fields then agent fields)."""
        settings = {key: getattr(self, key) for key in self.FIELDS}
        settings.update(self.agent.to_dict())
        return settings


class Config:
    """Configuration handler combining environment variables, a config file and overrides."""

    def __init__(
        self,
        config_file: Optional[Union[str, Path]] = None,
        env_file: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None
    ):
        """Initialize configuration.

        Args:
            config_file: Optional path to a JSON or YAML config file
            env_file: Optional path to .env file
            overrides: Settings given on the command line; they win over the file

        Raises:
            ConfigurationError: If the file or any setting is invalid
        """
        if env_file:
            load_dotenv(env_file)
        else:
            load_dotenv()

        self._env_config = {
            'log_level': os.getenv('MHER_LOG_LEVEL'),
            'log_dir': os.getenv('MHER_LOG_DIR'),
            'log_file': os.getenv('MHER_LOG_FILE'),
            'output_dir': os.getenv('MHER_OUTPUT_DIR'),
        }

        self._config = self._load_config_file(config_file) if config_file else {}
        self._set_default_settings()

        run_settings = dict(self._config.get('run', {}))
        if 'output_dir' not in run_settings and self._env_config['output_dir']:
            run_settings['output_dir'] = self._env_config['output_dir']
        run_settings.update(
            {k: v for k, v in (overrides or {}).items() if v is not None}
        )
        self._run = RunConfig(run_settings)
        self._agent_settings = {k: v for k, v in run_settings.items() if k in AgentConfig.FIELDS}

    def _load_config_file(self, config_file: Union[str, Path]) -> Dict:
        """Load and validate the config file.

        A file whose top level has no ``run`` section is treated as a flat run
        config.

        Args:
            config_file: Path to config.json (or .yaml)

        Returns:
            Configuration dictionary

        Raises:
            ConfigurationError: If config file is invalid or cannot be read
        """
        path = Path(config_file)
        try:
            with open(path) as f:
                if path.suffix in ('.yaml', '.yml'):
                    loaded = yaml.safe_load(f)
                else:
                    loaded = json.load(f)
        except (json.JSONDecodeError, yaml.YAMLError, OSError) as e:
            raise ConfigurationError(f"Failed to load config file: {e}")

        if not isinstance(loaded, dict):
            raise ConfigurationError("Config file must contain an object")
        if 'run' not in loaded:
            settings = {k: v for k, v in loaded.items() if k != 'default_settings'}
            loaded = {'run': settings, 'default_settings': loaded.get('default_settings', {})}
        return loaded

    def _set_default_settings(self):
        """Set logging defaults if not provided in config file."""
        default_settings = self._config.get('default_settings', {})

        self._config['default_settings'] = {
            'log_level': default_settings.get(
                'log_level', self._env_config['log_level'] or 'INFO'
            ),
            'log_file': default_settings.get('log_file', self._env_config['log_file']),
            'log_dir': default_settings.get('log_dir', self._env_config['log_dir']),
        }

    @property
    def run(self) -> RunConfig:
        """Get the validated run configuration."""
        return self._run

    @property
    def agent_settings(self) -> Dict[str, Any]:
        """Agent settings given explicitly in the file or as overrides."""
        return dict(self._agent_settings)

    def __getitem__(self, key: str) -> Any:
        """Get a logging setting."""
        if key in self._config.get('default_settings', {}):
            return self._config['default_settings'][key]
        raise KeyError(f"Configuration key not found: {key}")

    def get(self, key: str, default: Any = None) -> Any:
        """Get a logging setting with a default."""
        try:
            value = self[key]
        except KeyError:
            return default
        return default if value is None else value

    def __str__(self) -> str:
        """String representation of the configuration."""
        return str({
            'default_settings': self._config.get('default_settings', {}),
            'run': self._run.to_dict(),
        })
