from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / N`` for ``k = 0..N``."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("TimeGrid needs N >= 1")
        if not self.T > 0:
            raise ValueError("TimeGrid needs T > 0")

    @property
    def h(self):
        return self.T / self.N

    @property
    def nodes(self):
        return np.arange(self.N + 1) * (self.T / self.N)

    @property
    def half_nodes(self):
        """Nodes and midpoints, ``t_{k/2}`` for ``k = 0..2N``."""
        return np.arange(2 * self.N + 1) * (self.T / (2 * self.N))

    def node_at_or_before(self, t):
        k = np.floor(np.asarray(t) / self.h + 1e-9).astype(int)
        return np.clip(k, 0, self.N)

    def refines(self, other):
        """True when every node of ``other`` is a node of ``self``."""
        return abs(self.T - other.T) <= 1e-12 * max(1.0, self.T) and self.N % other.N == 0

    def same_as(self, other):
        return self.N == other.N and abs(self.T - other.T) <= 1e-12 * max(1.0, self.T)
