from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..tensor_core import ConfigurationError
from .partition import Partition


@dataclass(frozen=True)
class DatasetBundle:
    """Preprocessed features plus everything the interventions need to read them.

    ``factors`` holds ground-truth generative factors (synthetic data only)
    and ``factor_names`` their names; both are ``None`` for CSV data.
    """

    X: np.ndarray
    sigma_per_feature: np.ndarray
    partition: Partition
    feature_names: tuple[str, ...]
    labels: Optional[np.ndarray] = None
    protected: Optional[np.ndarray] = None
    factors: Optional[np.ndarray] = None
    factor_names: Optional[tuple[str, ...]] = None
    name: str = "dataset"
    domain: str = "tabular"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        sigma = np.asarray(self.sigma_per_feature, dtype=np.float64)
        object.__setattr__(self, "sigma_per_feature", sigma)
        n, p = X.shape
        if sigma.shape != (p,):
            raise ConfigurationError("sigma_per_feature must have one entry per feature")
        if np.any(sigma <= 0):
            raise ConfigurationError("sigma_per_feature must be positive")
        if self.partition.n_features != p:
            raise ConfigurationError(f"partition covers {self.partition.n_features} features, X has {p}")
        if len(self.feature_names) != p:
            raise ConfigurationError("one feature name per column required")
        for attr in ("labels", "protected", "factors"):
            v = getattr(self, attr)
            if v is not None and len(v) != n:
                raise ConfigurationError(f"{attr} has {len(v)} rows, X has {n}")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def group_count(self) -> int:
        return self.partition.n_groups

    def with_partition(self, partition: Partition) -> "DatasetBundle":
        return replace(self, partition=partition)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(self.sigma_per_feature.tobytes())
        h.update(json.dumps(self.partition.to_dict(), sort_keys=True).encode())
        for v in (self.labels, self.protected, self.factors):
            if v is not None:
                h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()
