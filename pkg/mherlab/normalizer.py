"""Running mean/std normalization for network inputs."""

from typing import Any, Dict, Optional

import numpy as np


class Normalizer:
    """Running mean and standard deviation of a stream of vectors.

    Statistics are kept as running sums, so they only ever accumulate; the
    standard deviation is floored at ``eps``. Normalized values are clipped to
    ``[-clip_range, clip_range]`` when a clip range is given.
    """

    def __init__(self, size: int, eps: float = 1e-2, clip_range: Optional[float] = 5.0):
        self.size = size
        self.eps = eps
        self.clip_range = clip_range
        self.total = np.zeros(size)
        self.total_sq = np.zeros(size)
        self.count = 0
        self.mean = np.zeros(size)
        self.std = np.ones(size)

    def update(self, values: np.ndarray) -> None:
        """Add a batch of vectors to the statistics."""
        values = np.asarray(values, dtype=np.float64).reshape(-1, self.size)
        if values.shape[0] == 0:
            return
        self.total = self.total + values.sum(axis=0)
        self.total_sq = self.total_sq + (values ** 2).sum(axis=0)
        self.count += values.shape[0]
        self.mean = self.total / self.count
        variance = np.maximum(self.eps ** 2, self.total_sq / self.count - self.mean ** 2)
        self.std = np.sqrt(variance)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        """Map values to standardized coordinates."""
        normalized = (np.asarray(values, dtype=np.float64) - self.mean) / self.std
        if self.clip_range is not None:
            normalized = np.clip(normalized, -self.clip_range, self.clip_range)
        return normalized

    def state_dict(self) -> Dict[str, Any]:
        """JSON-serializable statistics."""
        return {
            'size': self.size,
            'eps': self.eps,
            'clip_range': self.clip_range,
            'count': self.count,
            'total': self.total.tolist(),
            'total_sq': self.total_sq.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state: Dict[str, Any]) -> 'Normalizer':
        if state.get('identity'):
            return IdentityNormalizer(state['size'], state['eps'], state['clip_range'])
        normalizer = cls(state['size'], state['eps'], state['clip_range'])
        normalizer.total = np.asarray(state['total'], dtype=np.float64)
        normalizer.total_sq = np.asarray(state['total_sq'], dtype=np.float64)
        normalizer.count = int(state['count'])
        if normalizer.count:
            normalizer.mean = normalizer.total / normalizer.count
            variance = np.maximum(
                normalizer.eps ** 2,
                normalizer.total_sq / normalizer.count - normalizer.mean ** 2
            )
            normalizer.std = np.sqrt(variance)
        return normalizer

    def copy(self) -> 'Normalizer':
        return Normalizer.from_state_dict(self.state_dict())


class IdentityNormalizer(Normalizer):
    """Normalizer that passes values through unchanged (``normalize_obs`` off)."""

    def update(self, values: np.ndarray) -> None:
        return None

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64)

    def state_dict(self) -> Dict[str, Any]:
        state = super().state_dict()
        state['identity'] = True
        return state
