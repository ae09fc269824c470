"""Main entry point for a single mherlab training run."""

import os
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Dict, Optional

from .config import Config, ConfigurationError
from .harness import Trainer, TrainingError
from .metrics import MetricsError
from .utils import setup_logging


class TrainingSession:
    """Context manager for one training run: logging, run directory and signals.

    A SIGINT or SIGTERM received while the session is open asks the trainer
    to stop after the current epoch; epochs already recorded stay on disk.
    """

    def __init__(
        self,
        config_file: Optional[str] = None,
        overrides: Optional[Dict[str, Any]] = None,
        handle_signals: bool = False
    ):
        self.config_file = config_file
        self.overrides = overrides
        self.config: Optional[Config] = None
        self.logger = None
        self.trainer: Optional[Trainer] = None
        self.run_dir: Optional[Path] = None
        self._stop_event = threading.Event()
        self._original_sigint = None
        self._original_sigterm = None
        self._handle_signals = handle_signals

    def _validate_run_directory(self) -> Path:
        """Create the run directory and check that it is writable."""
        run = self.config.run
        run_dir = Path(run.output_dir) / run.run_name
        if not run_dir.exists():
            try:
                run_dir.mkdir(parents=True)
                self.logger.info('Created run directory', extra={'path': str(run_dir)})
            except OSError as e:
                raise ConfigurationError(f"Cannot create run directory: {run_dir}\n{e}")
        if not os.access(run_dir, os.W_OK):
            raise ConfigurationError(f"Run directory is not writable: {run_dir}")
        return run_dir

    def _signal_handler(self, signum: int, frame) -> None:
        """Handle termination signals."""
        signal_name = 'SIGTERM' if signum == signal.SIGTERM else 'SIGINT'
        if self.logger:
            self.logger.info(f'Received {signal_name} signal, stopping after this epoch')
        self._stop_event.set()

    @property
    def stop_requested(self) -> bool:
        return self._stop_event.is_set()

    def request_stop(self) -> None:
        self._stop_event.set()

    def __enter__(self):
        """Load configuration, set up logging and build the trainer."""
        try:
            self.config = Config(self.config_file, overrides=self.overrides)
            self.logger = setup_logging(
                log_file=self.config.get('log_file'),
                log_level=self.config['log_level'],
                log_dir=self.config.get('log_dir')
            )
            self.run_dir = self._validate_run_directory()
            self.trainer = Trainer(self.config.run, self.run_dir, logger=self.logger)

            if self._handle_signals:
                self._original_sigint = signal.getsignal(signal.SIGINT)
                self._original_sigterm = signal.getsignal(signal.SIGTERM)
                signal.signal(signal.SIGINT, self._signal_handler)
                signal.signal(signal.SIGTERM, self._signal_handler)

            self.logger.info('Session started', extra={
                'event': 'session_started',
                'run_dir': str(self.run_dir),
                'config': self.config.run.to_dict(),
            })
            return self

        except Exception as e:
            error_msg = f"Failed to start training session: {e}"
            if self.logger:
                self.logger.error(error_msg)
            else:
                print(error_msg, file=sys.stderr)
            raise

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Restore signal handlers and log the outcome."""
        if self._original_sigint:
            signal.signal(signal.SIGINT, self._original_sigint)
        if self._original_sigterm:
            signal.signal(signal.SIGTERM, self._original_sigterm)
        if self.logger:
            if exc_type is None:
                self.logger.info('Session finished', extra={
                    'run_dir': str(self.run_dir),
                    'epochs': self.trainer.epoch if self.trainer else 0,
                })
            else:
                self.logger.error('Session failed', extra={'error': str(exc_val)})
        return False

    def run(self):
        """Train until all epochs are done or a stop is requested."""
        return self.trainer.train(should_stop=lambda: self.stop_requested)


def main():
    """Train with the configuration from ``config.json`` and the environment."""
    config_file = 'config.json' if Path('config.json').exists() else None
    try:
        with TrainingSession(config_file, handle_signals=True) as session:
            session.run()
    except (ConfigurationError, TrainingError, MetricsError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
