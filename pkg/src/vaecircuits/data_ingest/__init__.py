"""Tabular CSV ingestion, synthetic benchmarks, and feature-group partitions."""
from .bundle import DatasetBundle
from .partition import Partition, random_partition
from .synthetic import (
    MiniSpritesSpec,
    SynthTabularSpec,
    factor_pixel_grouping,
    factor_sensitivity,
    gen_minisprites,
    render_sprite,
    synth_tabular,
)
from .tabular import ColumnSpec, DatasetSchema, TabularTransform, builtin_schema, load_csv, read_table
