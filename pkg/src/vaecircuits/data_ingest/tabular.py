"""CSV ingestion with a declared schema.

Schema files are YAML::

    name: adult
    delimiter: ","            # optional
    columns:
      - {name: age, kind: continuous, group: demographics}
      - {name: workclass, kind: categorical, group: employment}
      - {name: income, kind: label, positive: ">50K"}
      - {name: sex, kind: protected, positive: Male}

``label`` and ``protected`` columns are binarized either by ``positive``
(string equality) or by ``threshold`` (numeric, value >= threshold is 1).
Continuous columns are z-scored; categorical columns become one-hot blocks
that inherit the column's group.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from ..tensor_core import ConfigurationError, SeededRng
from .bundle import DatasetBundle
from .partition import Partition

log = logging.getLogger(__name__)

MISSING = {"", "?", "na", "nan", "null", "none"}
KINDS = ("continuous", "categorical", "label", "protected")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    group: Optional[str] = None
    positive: Optional[str] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in ("continuous", "categorical") and not self.group:
            raise ConfigurationError(f"feature column {self.name!r} needs a group")
        if self.kind in ("label", "protected") and self.positive is None and self.threshold is None:
            raise ConfigurationError(f"{self.kind} column {self.name!r} needs 'positive' or 'threshold'")


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    columns: tuple[ColumnSpec, ...]
    delimiter: str = ","

    def __post_init__(self):
        feats = self.feature_columns
        if not feats:
            raise ConfigurationError("schema declares no feature columns")
        if sum(c.kind == "label" for c in self.columns) > 1:
            raise ConfigurationError("at most one label column")
        if sum(c.kind == "protected" for c in self.columns) > 1:
            raise ConfigurationError("at most one protected column")

    @property
    def feature_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind in ("continuous", "categorical")]

    @property
    def group_names(self) -> list[str]:
        seen: list[str] = []
        for c in self.feature_columns:
            if c.group not in seen:
                seen.append(c.group)
        return seen

    def column(self, kind: str) -> Optional[ColumnSpec]:
        return next((c for c in self.columns if c.kind == kind), None)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        cols = tuple(ColumnSpec(**c) for c in d["columns"])
        return cls(d.get("name", "dataset"), cols, d.get("delimiter", ","))

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def builtin_schema(name: str) -> DatasetSchema:
    """Schemas shipped with the package: adult, credit_default, bank_marketing, wine_quality."""
    path = Path(__file__).with_name("schemas") / f"{name}.yaml"
    if not path.exists():
        raise ConfigurationError(f"no built-in schema named {name!r}")
    return DatasetSchema.load(path)


@dataclass
class TabularTransform:
    """Fitted preprocessing; re-applying it to the fitting rows reproduces X exactly."""

    schema: DatasetSchema
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)
    levels: dict[str, list[str]] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, schema: DatasetSchema, table: dict[str, list[str]]) -> "TabularTransform":
        t = cls(schema)
        for c in schema.feature_columns:
            if c.kind == "continuous":
                v = np.asarray(table[c.name], dtype=np.float64)
                sd = float(v.std())
                if sd == 0.0:
                    log.warning("dropping zero-variance column %s", c.name)
                    t.dropped.append(c.name)
                    continue
                t.means[c.name], t.stds[c.name] = float(v.mean()), sd
            else:
                levels = sorted(set(table[c.name]))
                if len(levels) < 2:
                    log.warning("dropping single-level column %s", c.name)
                    t.dropped.append(c.name)
                    continue
                t.levels[c.name] = levels
        return t

    def feature_layout(self) -> tuple[list[str], list[str], list[bool]]:
        """(feature names, group per feature, is_one_hot per feature)."""
        names, groups, onehot = [], [], []
        for c in self.schema.feature_columns:
            if c.name in self.dropped:
                continue
            if c.kind == "continuous":
                names.append(c.name)
                groups.append(c.group)
                onehot.append(False)
            else:
                for lv in self.levels[c.name]:
                    names.append(f"{c.name}={lv}")
                    groups.append(c.group)
                    onehot.append(True)
        return names, groups, onehot

    def transform(self, table: dict[str, list[str]]) -> np.ndarray:
        blocks = []
        n = len(next(iter(table.values())))
        for c in self.schema.feature_columns:
            if c.name in self.dropped:
                continue
            if c.kind == "continuous":
                v = np.asarray(table[c.name], dtype=np.float64)
                blocks.append(((v - self.means[c.name]) / self.stds[c.name])[:, None])
            else:
                levels = self.levels[c.name]
                index = {lv: k for k, lv in enumerate(levels)}
                block = np.zeros((n, len(levels)))
                unknown = 0
                for r, val in enumerate(table[c.name]):
                    k = index.get(val)
                    if k is None:
                        unknown += 1
                    else:
                        block[r, k] = 1.0
                if unknown:
                    log.warning("%d unknown categories in %s mapped to all-zero blocks", unknown, c.name)
                blocks.append(block)
        return np.hstack(blocks)


def _binarize(values: Sequence[str], spec: ColumnSpec) -> np.ndarray:
    if spec.threshold is not None:
        return (np.asarray(values, dtype=np.float64) >= spec.threshold).astype(np.float64)
    pos = str(spec.positive).strip()
    return np.array([v == pos for v in values], dtype=np.float64)


def read_table(path, schema: DatasetSchema) -> tuple[dict[str, list[str]], int]:
    """Read the schema's columns; rows with any missing value are dropped.

    Returns the column table and the number of dropped rows.
    """
    wanted = [c.name for c in schema.columns]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        header = [h.strip() for h in next(reader)]
        missing_cols = [w for w in wanted if w not in header]
        if missing_cols:
            raise ConfigurationError(f"{path}: columns {missing_cols} not in header")
        pos = [header.index(w) for w in wanted]
        table: dict[str, list[str]] = {w: [] for w in wanted}
        dropped = 0
        for row in reader:
            if not row:
                continue
            vals = [row[i].strip() if i < len(row) else "" for i in pos]
            if any(v.lower() in MISSING for v in vals):
                dropped += 1
                continue
            for w, v in zip(wanted, vals):
                table[w].append(v)
    if dropped:
        log.warning("%s: dropped %d rows with missing values", path, dropped)
    return table, dropped


def load_csv(path, schema: DatasetSchema, subsample: Optional[int] = None, seed: int = 0) -> DatasetBundle:
    table, dropped = read_table(path, schema)
    n = len(next(iter(table.values())))
    if n == 0:
        raise ConfigurationError(f"{path}: no complete rows")
    if subsample is not None and subsample < n:
        keep = np.sort(SeededRng(seed).spawn("csv-subsample").permutation(n)[:subsample])
        table = {k: [v[i] for i in keep] for k, v in table.items()}
    transform = TabularTransform.fit(schema, table)
    X = transform.transform(table)
    names, groups, onehot = transform.feature_layout()
    group_names = [g for g in schema.group_names if g in groups]
    partition = Partition.from_labels([group_names.index(g) for g in groups], group_names)
    # one-hot indicators are perturbed additively with unit scale
    sigma = np.where(onehot, 1.0, X.std(axis=0))
    label = schema.column("label")
    prot = schema.column("protected")
    return DatasetBundle(
        X=X,
        sigma_per_feature=sigma,
        partition=partition,
        feature_names=tuple(names),
        labels=_binarize(table[label.name], label) if label else None,
        protected=_binarize(table[prot.name], prot) if prot else None,
        name=schema.name,
        domain="tabular",
        provenance={
            "source": str(path),
            "rows_dropped_missing": dropped,
            "subsample": subsample,
            "columns_dropped": transform.dropped,
            "means": transform.means,
            "stds": transform.stds,
            "levels": transform.levels,
        },
    )
