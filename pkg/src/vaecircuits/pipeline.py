"""Dataset x architecture x seed grid, aggregation, and report files.

Each grid cell trains one model and runs, in order: Level-1 group
perturbations, Level-2 latent sweeps, Level-3 activation patching, Level-4
mediation, the circuit metrics, and the downstream probe. A cell that fails
is recorded with its error; the rest of the grid carries on.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .circuit_metrics import (
    MetricSet,
    dci_completeness,
    factor_targets,
    fgd,
    grouping_ablation,
    mig,
    modularity,
    specificity_from_effects,
)
from .data_ingest import (
    DatasetBundle,
    DatasetSchema,
    MiniSpritesSpec,
    SynthTabularSpec,
    builtin_schema,
    gen_minisprites,
    load_csv,
    synth_tabular,
)
from .downstream_probe import ProbeConfig, evaluate_probe
from .interventions import (
    DEFAULT_SCALES,
    EVAL_CAP,
    SWEEP_POINTS,
    SWEEP_RANGE,
    effect_matrix,
    evaluation_rows,
    level1_scan,
    mediation_scan,
    patching_profile,
    random_pairs,
    stats_from_posterior,
)
from .stats_engine import compare_paired, correct_family, pearson
from .tensor_core import ConfigurationError, SeededRng
from .vae_zoo import ALL_VARIANTS, TrainConfig, VaeArchitectureSpec, Variant, encode, heldout_split, save, train

log = logging.getLogger(__name__)

# encoder widths per modality; the decoder mirrors them
PAPER_WIDTHS = {"tabular": (256, 128, 64), "image": (512, 256, 128)}
METRICS = ("ces_mean", "specificity", "modularity", "fgd", "mig")
DOWNSTREAM = ("accuracy", "auc", "robustness", "dp_gap")
STAGES = ("train", "level1", "level2", "level3", "level4", "metrics", "probe")


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """One dataset of the grid.

    ``kind`` is ``synthetic_tabular``, ``minisprites`` or ``csv``. ``params``
    are passed to the generator spec (or hold ``path``, ``schema``,
    ``subsample`` for CSV files). ``encoder_widths`` overrides the
    modality default.
    """

    name: str
    kind: str
    params: dict = field(default_factory=dict)
    encoder_widths: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in ("synthetic_tabular", "minisprites", "csv"):
            raise ConfigurationError(f"dataset {self.name!r}: unknown kind {self.kind!r}")
        if self.encoder_widths is not None:
            object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "params": dict(self.params)}
        if self.encoder_widths is not None:
            d["encoder_widths"] = list(self.encoder_widths)
        return d


@dataclass(frozen=True)
class InterventionConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    sweep_points: int = SWEEP_POINTS
    sweep_range: float = SWEEP_RANGE
    eval_cap: int = EVAL_CAP
    patch_pairs: int = 200
    mediation_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if len(self.scales) < 2:
            raise ConfigurationError("Level-1 linearity needs at least two scales")


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[DatasetConfig, ...]
    architectures: tuple[str, ...] = tuple(v.value for v in ALL_VARIANTS)
    seeds: tuple[int, ...] = (42, 123, 456)
    hyper: dict = field(default_factory=dict)
    latent_dim: int = 10
    widths: dict = field(default_factory=lambda: {k: list(v) for k, v in PAPER_WIDTHS.items()})
    train: TrainConfig = TrainConfig()
    interventions: InterventionConfig = InterventionConfig()
    probe: ProbeConfig = ProbeConfig()
    ablation: bool = True
    ablation_permutations: int = 10
    correction_scope: str = "global"
    save_checkpoints: bool = True
    output_dir: str = "results"

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "architectures", tuple(Variant(a).value for a in self.architectures))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.datasets or not self.architectures or not self.seeds:
            raise ConfigurationError("the grid must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigurationError("dataset names must be distinct")
        if self.correction_scope not in ("global", "per_metric"):
            raise ConfigurationError("correction_scope must be 'global' or 'per_metric'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "datasets" not in d:
            raise ConfigurationError("config needs a 'datasets' list")
        d["datasets"] = tuple(DatasetConfig(**ds) for ds in d["datasets"])
        for key, sub in (("train", TrainConfig), ("interventions", InterventionConfig), ("probe", ProbeConfig)):
            if key in d:
                d[key] = _typed(sub, d[key])
        for key in ("latent_dim", "ablation_permutations"):
            if key in d:
                d[key] = int(d[key])
        if "widths" in d:
            d["widths"] = {**{k: list(v) for k, v in PAPER_WIDTHS.items()}, **d["widths"]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "datasets": [ds.to_dict() for ds in self.datasets],
            "architectures": list(self.architectures),
            "seeds": list(self.seeds),
            "hyper": dict(self.hyper),
            "latent_dim": self.latent_dim,
            "widths": {k: list(v) for k, v in self.widths.items()},
            "train": self.train.to_dict(),
            "interventions": {**asdict(self.interventions), "scales": list(self.interventions.scales)},
            "probe": asdict(self.probe),
            "ablation": self.ablation,
            "ablation_permutations": self.ablation_permutations,
            "correction_scope": self.correction_scope,
            "save_checkpoints": self.save_checkpoints,
            "output_dir": self.output_dir,
        }

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), "seeds": list(seeds)})

    def cells(self) -> list[tuple[DatasetConfig, str, int]]:
        return list(itertools.product(self.datasets, self.architectures, self.seeds))


def _typed(cls, values: dict):
    """Build a config dataclass, coercing scalars to the type of each field's default.

    YAML 1.1 reads ``1e-3`` (no decimal point) as a string, so numbers are
    cast here rather than trusted.
    """
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        default = known[k].default
        if isinstance(default, bool) or v is None:
            out[k] = v
        elif isinstance(default, (int, float)):
            try:
                num = float(v)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"{cls.__name__}.{k}: expected a number, got {v!r}") from exc
            if isinstance(default, int):
                if not num.is_integer():
                    raise ConfigurationError(f"{cls.__name__}.{k}: expected an integer, got {v!r}")
                num = int(num)
            out[k] = num
        else:
            out[k] = v
    return cls(**out)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def cell_config_hash(config: ExperimentConfig, dataset: DatasetConfig, arch: str, seed: int) -> str:
    """Hash of everything that determines one cell's result."""
    d = config.to_dict()
    for k in ("datasets", "seeds", "architectures", "output_dir", "save_checkpoints", "correction_scope"):
        d.pop(k)
    return _hash({**d, "dataset": dataset.to_dict(), "architecture": arch, "seed": seed})


# -- datasets ----------------------------------------------------------------

_BUNDLES: dict[str, DatasetBundle] = {}


def load_dataset(ds: DatasetConfig) -> DatasetBundle:
    """Build (or fetch from the per-process cache) the bundle for ``ds``."""
    key = json.dumps(ds.to_dict(), sort_keys=True)
    if key in _BUNDLES:
        return _BUNDLES[key]
    p = dict(ds.params)
    if ds.kind == "synthetic_tabular":
        n_rows = int(p.pop("n_rows", 2000))
        seed = int(p.pop("seed", 0))
        for k in ("continuous_per_group", "categorical_per_group", "label_factors", "group_names", "noise"):
            if isinstance(p.get(k), list):
                p[k] = tuple(p[k])
        bundle = synth_tabular(n_rows, SynthTabularSpec(**p), seed=seed, name=ds.name)
    elif ds.kind == "minisprites":
        seed = int(p.pop("seed", 0))
        for k in ("shapes", "scales"):
            if k in p:
                p[k] = tuple(p[k])
        bundle = gen_minisprites(MiniSpritesSpec(**p), SeededRng(seed), name=ds.name)
    else:
        if "path" not in p or "schema" not in p:
            raise ConfigurationError(f"csv dataset {ds.name!r} needs 'path' and 'schema'")
        schema_ref = str(p["schema"])
        schema = DatasetSchema.load(schema_ref) if schema_ref.endswith((".yaml", ".yml")) else builtin_schema(schema_ref)
        bundle = load_csv(p["path"], schema, subsample=p.get("subsample"), seed=int(p.get("seed", 0)))
    _BUNDLES[key] = bundle
    return bundle


def architecture_spec(config: ExperimentConfig, ds: DatasetConfig, bundle: DatasetBundle, arch: str) -> VaeArchitectureSpec:
    widths = ds.encoder_widths or tuple(config.widths[bundle.domain])
    return VaeArchitectureSpec(Variant(arch), tuple(widths), config.latent_dim, **config.hyper)


# -- one cell ----------------------------------------------------------------

def run_id(dataset: str, arch: str, seed: int) -> str:
    return f"{dataset}__{arch}__{seed}"


def _clean(x):
    """JSON-ready copy: numpy to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class RunManifest:
    run_id: str
    dataset: str
    domain: Optional[str]
    architecture: str
    seed: int
    status: str  # "ok" or "failed"
    config_hash: str
    dataset_hash: Optional[str] = None
    final_mse: Optional[float] = None
    epochs_run: Optional[int] = None
    converged: Optional[bool] = None
    metrics: Optional[dict] = None
    probe: Optional[dict] = None
    nis: Optional[float] = None
    linearity: Optional[dict] = None
    level1_R: Optional[list] = None
    ces_per_dim: Optional[list] = None
    effect_matrix_shape: Optional[list] = None
    patching: Optional[dict] = None
    mediation: Optional[dict] = None
    ablation: Optional[dict] = None
    group_names: Optional[list] = None
    stages: list = field(default_factory=list)
    error: Optional[str] = None
    wall_clock_s: float = 0.0
    software_version: str = __version__
    init_scheme: str = "he-uniform fan-in, zero bias"

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock time."""
        d = self.to_dict()
        d.pop("wall_clock_s")
        return d


def run_cell(config: ExperimentConfig, ds: DatasetConfig, arch: str, seed: int, out: Optional[Path] = None) -> RunManifest:
    """Train one model and run the full intervention suite on it."""
    t0 = time.perf_counter()
    man = RunManifest(run_id(ds.name, arch, seed), ds.name, None, arch, seed, "failed",
                      cell_config_hash(config, ds, arch, seed))
    try:
        bundle = load_dataset(ds)
        man.domain = bundle.domain
        man.dataset_hash = bundle.content_hash()[:16]
        man.group_names = list(bundle.partition.names)
        icfg = config.interventions

        spec = architecture_spec(config, ds, bundle, arch)
        tcfg = TrainConfig(**{**config.train.to_dict(), "seed": seed})
        model = train(spec, bundle.X, tcfg)
        man.final_mse, man.epochs_run, man.converged = model.final_mse, model.epochs_run, model.converged
        man.stages.append("train")
        if out is not None and config.save_checkpoints:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            save(model, out / "checkpoints" / f"{man.run_id}.vaez")

        rows = evaluation_rows(bundle.n_rows, seed, icfg.eval_cap, tcfg.heldout_fraction)
        imp = level1_scan(model, bundle, icfg.scales, rows)
        man.level1_R = imp.R.tolist()
        man.linearity = {n: float(r) for n, r in zip(imp.group_names, imp.linearity)}
        man.stages.append("level1")

        X = bundle.X[rows]
        mu, logvar = encode(model, X)
        stats = stats_from_posterior(mu, logvar)
        C = effect_matrix(model, bundle, stats, "calibrated", icfg.sweep_points, icfg.sweep_range, rows=rows)
        ces = C.mean(axis=1)
        man.ces_per_dim = ces.tolist()
        man.effect_matrix_shape = list(C.shape)
        man.stages.append("level2")

        src, tgt = random_pairs(len(rows), icfg.patch_pairs, SeededRng(seed).spawn("patching-pairs"))
        prof = patching_profile(model, X[src], X[tgt])
        man.patching = {"compound": prof.compound.tolist(), "direct": prof.direct.tolist(),
                        "max_telescoping_error": prof.max_telescoping_error, "n_pairs": int(len(src))}
        man.stages.append("level3")

        med = mediation_scan(model, bundle, icfg.mediation_scale, rows)
        man.nis = med.NIS
        man.mediation = {"MR": med.MR.tolist(), "MR_raw": med.MR_raw.tolist(), "TE": med.TE.tolist(),
                         "raw_violations": med.raw_violations, "undefined_groups": med.undefined_groups}
        man.stages.append("level4")

        z_all, _ = encode(model, bundle.X)
        singleton = all(len(g) == 1 for g in bundle.partition.groups)
        metrics = MetricSet(
            ces_mean=float(ces.mean()),
            ces_per_dim=ces.tolist(),
            specificity=specificity_from_effects(C),
            modularity=modularity(imp.R),
            fgd=fgd(imp.R),
            mig=mig(z_all, factor_targets(bundle)),
            dci_completeness=dci_completeness(imp.R, bundle.partition) if singleton else None,
        )
        man.metrics = asdict(metrics)
        man.stages.append("metrics")

        if bundle.labels is not None:
            tr, held = heldout_split(bundle.n_rows, seed, tcfg.heldout_fraction)
            prot = bundle.protected[held] if bundle.protected is not None else None
            res = evaluate_probe(z_all[tr], bundle.labels[tr], z_all[held], bundle.labels[held], prot,
                                 config.probe, SeededRng(seed).spawn("probe-noise"))
            man.probe = res.to_dict()
        man.stages.append("probe")

        if config.ablation and bundle.group_count >= 2:
            ab = grouping_ablation(model, bundle, config.ablation_permutations,
                                   SeededRng(seed).spawn("grouping-ablation"), rows, scales=icfg.scales)
            man.ablation = ablation_dict(ab)
        man.status = "ok"
    except Exception as exc:  # per-cell isolation: record and move on
        log.error("cell %s failed: %s: %s", man.run_id, type(exc).__name__, exc)
        man.error = f"{type(exc).__name__}: {exc}"
    man.wall_clock_s = time.perf_counter() - t0
    return man


def ablation_dict(ab) -> dict:
    return {
        "semantic_modularity": ab.semantic_modularity,
        "semantic_fgd": ab.semantic_fgd,
        "random_modularity": list(ab.random_modularity),
        "random_fgd": list(ab.random_fgd),
        "random_modularity_mean": ab.random_modularity_mean,
        "random_fgd_mean": ab.random_fgd_mean,
        "modularity_gap": ab.modularity_gap,
        "fgd_gap": ab.fgd_gap,
        "ces_invariant": ab.ces_invariant,
        "specificity_invariant": ab.specificity_invariant,
    }


def _cell_worker(args):
    config_dict, ds_dict, arch, seed, out = args
    config = ExperimentConfig.from_dict(config_dict)
    return run_cell(config, DatasetConfig(**ds_dict), arch, seed, Path(out) if out else None).to_dict()


def run_grid(config: ExperimentConfig, jobs: int = 1, out=None) -> list[RunManifest]:
    """Run every cell; manifests come back sorted by run id and, with ``out``, land in ``out/manifests``."""
    out = Path(out) if out is not None else None
    cells = config.cells()
    if jobs > 1:
        args = [(config.to_dict(), ds.to_dict(), a, s, str(out) if out else None) for ds, a, s in cells]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            manifests = [RunManifest.from_dict(d) for d in pool.map(_cell_worker, args)]
    else:
        manifests = [run_cell(config, ds, a, s, out) for ds, a, s in cells]
    manifests.sort(key=lambda m: m.run_id)
    if out is not None:
        write_manifests(manifests, out)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    n_fail = sum(m.status != "ok" for m in manifests)
    if n_fail:
        log.warning("%d of %d cells failed", n_fail, len(manifests))
    return manifests


def write_manifests(manifests: Sequence[RunManifest], out) -> None:
    d = Path(out) / "manifests"
    d.mkdir(parents=True, exist_ok=True)
    for m in manifests:
        (d / f"{m.run_id}.json").write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True))


def read_manifests(out) -> list[RunManifest]:
    d = Path(out) / "manifests"
    if not d.is_dir():
        raise ConfigurationError(f"no manifests directory under {out}")
    return sorted((RunManifest.from_dict(json.loads(p.read_text())) for p in d.glob("*.json")),
                  key=lambda m: m.run_id)


# -- aggregation -------------------------------------------------------------

def _metric(m: RunManifest, key: str) -> Optional[float]:
    if key == "final_mse":
        return m.final_mse
    if key == "nis":
        return m.nis
    if key in DOWNSTREAM:
        return None if m.probe is None else m.probe.get(key)
    return None if m.metrics is None else m.metrics.get(key)


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def aggregate(manifests: Sequence[RunManifest], correction_scope: str = "global", alpha: float = 0.05) -> dict:
    """Summary tables, pairwise architecture tests, and correlation grids from finished runs."""
    ok = [m for m in manifests if m.status == "ok"]
    failed = [m.run_id for m in manifests if m.status != "ok"]
    archs = sorted({m.architecture for m in ok}, key=lambda a: [v.value for v in ALL_VARIANTS].index(a))

    table = []
    for arch in archs:
        for domain in sorted({m.domain for m in ok}):
            runs = [m for m in ok if m.architecture == arch and m.domain == domain]
            if not runs:
                continue
            row = {"architecture": arch, "domain": domain, "n": len(runs)}
            for k in (*METRICS, "final_mse", "nis"):
                row[f"{k}_mean"], row[f"{k}_std"] = _mean_std([_metric(m, k) for m in runs])
            table.append(row)

    by_cell = {(m.architecture, m.dataset, m.seed): m for m in ok}
    comparisons = []
    for a, b in itertools.combinations(archs, 2):
        keys_a = {(d, s) for (x, d, s) in by_cell if x == a}
        keys_b = {(d, s) for (x, d, s) in by_cell if x == b}
        shared = sorted(keys_a & keys_b)
        dropped = len(keys_a ^ keys_b)
        if dropped:
            log.warning("%s vs %s: %d unpaired cells dropped", a, b, dropped)
        for metric in METRICS:
            pairs = [(_metric(by_cell[(a, d, s)], metric), _metric(by_cell[(b, d, s)], metric)) for d, s in shared]
            pairs = [p for p in pairs if p[0] is not None and p[1] is not None]
            if not pairs:
                continue
            xa, xb = zip(*pairs)
            comparisons.append(compare_paired(f"{a} vs {b}", metric, xa, xb))
    correct_family(comparisons, correction_scope, alpha)

    correlations = []
    for metric in (*METRICS, "final_mse"):
        for target in DOWNSTREAM:
            pts = [(_metric(m, metric), _metric(m, target)) for m in ok]
            pts = [p for p in pts if p[0] is not None and p[1] is not None]
            correlations.append(_corr(metric, target, pts))
    ces_mse = _corr("ces_mean", "final_mse", [(_metric(m, "ces_mean"), m.final_mse) for m in ok])

    heatmaps = {"ces": {}, "mediation": {}}
    for dataset in sorted({m.dataset for m in ok}):
        runs = [m for m in ok if m.dataset == dataset]
        heatmaps["ces"][dataset] = {
            "architectures": [a for a in archs if any(m.architecture == a for m in runs)],
            "values": [np.mean([m.ces_per_dim for m in runs if m.architecture == a], axis=0).tolist()
                       for a in archs if any(m.architecture == a for m in runs)],
        }
        for a in archs:
            sel = [m for m in runs if m.architecture == a and m.mediation is not None]
            if sel:
                mr = np.array([[[np.nan if v is None else v for v in row] for row in m.mediation["MR"]] for m in sel])
                heatmaps["mediation"][f"{dataset}__{a}"] = {
                    "groups": sel[0].group_names,
                    "values": np.nanmean(mr, axis=0).tolist() if not np.all(np.isnan(mr)) else mr[0].tolist(),
                }

    ablation = [{"run_id": m.run_id, "dataset": m.dataset, "architecture": m.architecture, "seed": m.seed, **m.ablation}
                for m in ok if m.ablation is not None]
    report = {
        "software_version": __version__,
        "n_runs": len(manifests),
        "n_ok": len(ok),
        "failed_runs": failed,
        "correction_scope": correction_scope,
        "alpha": alpha,
        "table": table,
        "pairwise_tests": [_comparison_row(c) for c in comparisons],
        "correlations": correlations,
        "ces_mse": ces_mse,
        "heatmaps": heatmaps,
        "ablation": ablation,
        "runs": [_metrics_row(m) for m in manifests],
        "downstream": [_downstream_row(m) for m in ok if m.probe is not None],
    }
    return _clean(report)


def _corr(metric: str, target: str, pts) -> dict:
    pts = [p for p in pts if p[0] is not None and p[1] is not None]
    row = {"metric": metric, "target": target, "n": len(pts), "r": None, "p": None, "undefined": True}
    if len(pts) >= 3:
        x, y = zip(*pts)
        res = pearson(x, y)
        row.update(r=res.r, p=res.p, undefined=res.undefined)
    return row


def _comparison_row(c) -> dict:
    return {"comparison": c.label, "metric": c.metric, "n": c.n, "n_zero_diffs": c.n_zero,
            "p_raw": c.p_raw, "p_adj": c.p_adj, "cohens_d": c.cohens_d, "d_degenerate": c.d_degenerate,
            "test_undefined": c.test_undefined, "significant": c.significant, "family": c.family}


def _metrics_row(m: RunManifest) -> dict:
    row = {"run_id": m.run_id, "dataset": m.dataset, "domain": m.domain, "architecture": m.architecture,
           "seed": m.seed, "status": m.status, "final_mse": m.final_mse, "nis": m.nis,
           "min_linearity_r2": min(m.linearity.values()) if m.linearity else None,
           "max_telescoping_error": m.patching["max_telescoping_error"] if m.patching else None}
    for k in ("ces_mean", "specificity", "modularity", "fgd", "mig", "dci_completeness"):
        row[k] = None if m.metrics is None else m.metrics.get(k)
    return row


def _downstream_row(m: RunManifest) -> dict:
    return {"run_id": m.run_id, "dataset": m.dataset, "architecture": m.architecture, "seed": m.seed,
            **{k: m.probe.get(k) for k in DOWNSTREAM}}


# -- reports -----------------------------------------------------------------

METRICS_COLUMNS = ["run_id", "dataset", "domain", "architecture", "seed", "status", "final_mse", "ces_mean",
                   "specificity", "modularity", "fgd", "mig", "dci_completeness", "nis", "min_linearity_r2",
                   "max_telescoping_error"]
PAIRWISE_COLUMNS = ["comparison", "metric", "n", "n_zero_diffs", "p_raw", "p_adj", "cohens_d", "d_degenerate",
                    "test_undefined", "significant", "family"]
CORR_COLUMNS = ["metric", "target", "r", "p", "n", "undefined"]
DOWNSTREAM_COLUMNS = ["run_id", "dataset", "architecture", "seed", *DOWNSTREAM]
ABLATION_COLUMNS = ["run_id", "dataset", "architecture", "seed", "grouping", "permutation", "modularity", "fgd"]


def _write_csv(path: Path, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])


def _write_matrix_csv(path: Path, row_label: str, row_names, col_names, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow([row_label, *col_names])
        for name, vals in zip(row_names, values):
            w.writerow([name, *["" if v is None else v for v in vals]])


def emit_reports(report: dict, outdir, manifests: Sequence[RunManifest] = ()) -> list[Path]:
    """Write the CSV reports, heatmaps, per-run tables and ``summary.json``."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe_file = out / ".write-test"
        probe_file.write_text("")
        probe_file.unlink()
    except OSError as exc:
        raise ConfigurationError(f"cannot write reports to {out}: {exc}") from exc
    written = []

    def put(name, columns, rows):
        _write_csv(out / name, columns, rows)
        written.append(out / name)

    put("metrics.csv", METRICS_COLUMNS, report["runs"])
    put("pairwise_tests.csv", PAIRWISE_COLUMNS, report["pairwise_tests"])
    put("correlations.csv", CORR_COLUMNS, [*report["correlations"], report["ces_mse"]])
    put("downstream.csv", DOWNSTREAM_COLUMNS, report["downstream"])
    ab_rows = []
    for a in report["ablation"]:
        ids = {k: a[k] for k in ("run_id", "dataset", "architecture", "seed")}
        ab_rows.append({**ids, "grouping": "semantic", "permutation": "",
                        "modularity": a["semantic_modularity"], "fgd": a["semantic_fgd"]})
        for i, (mo, fg) in enumerate(zip(a["random_modularity"], a["random_fgd"])):
            ab_rows.append({**ids, "grouping": "random", "permutation": i, "modularity": mo, "fgd": fg})
    put("ablation.csv", ABLATION_COLUMNS, ab_rows)

    for dataset, hm in report["heatmaps"]["ces"].items():
        D = len(hm["values"][0]) if hm["values"] else 0
        p = out / f"heatmap_ces_{dataset}.csv"
        _write_matrix_csv(p, "architecture", hm["architectures"], [f"z{d}" for d in range(D)], hm["values"])
        written.append(p)
    for key, hm in report["heatmaps"]["mediation"].items():
        L = len(hm["values"][0]) if hm["values"] else 0
        p = out / f"heatmap_mediation_{key}.csv"
        _write_matrix_csv(p, "group", hm["groups"], [f"layer{l}" for l in range(L)], hm["values"])
        written.append(p)

    for m in manifests:
        if m.status != "ok":
            continue
        d = out / "runs" / m.run_id
        d.mkdir(parents=True, exist_ok=True)
        D = len(m.ces_per_dim)
        _write_matrix_csv(d / "level1_R.csv", "group", m.group_names, [f"z{i}" for i in range(D)], m.level1_R)
        _write_csv(d / "ces.csv", ["dim", "ces"], [{"dim": i, "ces": v} for i, v in enumerate(m.ces_per_dim)])
        L = len(m.patching["compound"])
        _write_csv(d / "patching.csv", ["layer", "compound", "direct"],
                   [{"layer": l, "compound": m.patching["compound"][l], "direct": m.patching["direct"][l]}
                    for l in range(L)])
        _write_matrix_csv(d / "mediation.csv", "group", [*m.group_names, "NIS"], [f"layer{l}" for l in range(L)],
                          [*m.mediation["MR"], [m.nis]])
        written.extend(d / n for n in ("level1_R.csv", "ces.csv", "patching.csv", "mediation.csv"))

    (out / "summary.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False))
    written.append(out / "summary.json")
    return written
