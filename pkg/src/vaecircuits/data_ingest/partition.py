from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..tensor_core import ConfigurationError, SeededRng


@dataclass(frozen=True)
class Partition:
    """Disjoint, covering assignment of feature indices to named groups."""

    groups: tuple[tuple[int, ...], ...]
    names: tuple[str, ...]

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.names) != len(groups):
            raise ConfigurationError("one name per group required")
        if any(len(g) == 0 for g in groups):
            raise ConfigurationError("empty feature group")
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(len(flat))):
            raise ConfigurationError("groups must be disjoint and cover features 0..n-1")

    @classmethod
    def from_labels(cls, labels: Sequence[int], names: Sequence[str]) -> "Partition":
        labels = np.asarray(labels)
        return cls(tuple(tuple(np.flatnonzero(labels == g)) for g in range(len(names))), tuple(names))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_features(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    def labels(self) -> np.ndarray:
        out = np.empty(self.n_features, dtype=int)
        for k, g in enumerate(self.groups):
            out[list(g)] = k
        return out

    def to_dict(self) -> dict:
        return {name: list(g) for name, g in zip(self.names, self.groups)}


def random_partition(partition: Partition, rng: SeededRng) -> Partition:
    """Shuffle which features sit in which group; group sizes and names are kept."""
    labels = partition.labels()
    return Partition.from_labels(labels[rng.permutation(len(labels))], partition.names)
