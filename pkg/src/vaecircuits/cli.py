"""Command-line entry point: ``vaecircuits {run,analyze,ablate,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .circuit_metrics import grouping_ablation
from .pipeline import (
    ExperimentConfig,
    aggregate,
    emit_reports,
    load_dataset,
    read_manifests,
    run_id,
    write_manifests,
    ablation_dict,
    run_grid,
)
from .interventions import evaluation_rows
from .tensor_core import ConfigurationError, SeededRng
from .vae_zoo import load

log = logging.getLogger("vaecircuits")


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else None
    if config is None:
        raise ConfigurationError("--config is required")
    if args.seed_override:
        config = config.with_seeds(args.seed_override)
    return config


def _outdir(args, config=None) -> Path:
    if args.out:
        return Path(args.out)
    if config is not None:
        return Path(config.output_dir)
    raise ConfigurationError("--out is required")


def cmd_run(args) -> int:
    config = _load_config(args)
    out = _outdir(args, config)
    manifests = run_grid(config, jobs=args.jobs, out=out)
    n_ok = sum(m.status == "ok" for m in manifests)
    print(f"{n_ok}/{len(manifests)} cells finished; manifests in {out / 'manifests'}")
    return 0 if n_ok == len(manifests) else 1


def _analysis(out: Path, scope: str) -> dict:
    return aggregate(read_manifests(out), scope)


def cmd_analyze(args) -> int:
    out = _outdir(args)
    report = _analysis(out, args.correction_scope)
    (out / "analysis.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False))
    print(f"{'architecture':<10} {'domain':<8} {'n':>2} " + " ".join(f"{k:>11}" for k in ("CES", "Spec", "Mod", "FGD", "MIG", "MSE")))
    for row in report["table"]:
        vals = [row[f"{k}_mean"] for k in ("ces_mean", "specificity", "modularity", "fgd", "mig", "final_mse")]
        print(f"{row['architecture']:<10} {row['domain']:<8} {row['n']:>2} " +
              " ".join(f"{v:>11.4f}" if v is not None else f"{'-':>11}" for v in vals))
    cm = report["ces_mse"]
    if cm["r"] is not None:
        print(f"CES vs MSE: r = {cm['r']:.3f}, p = {cm['p']:.3g}, n = {cm['n']}")
    n_sig = sum(t["significant"] for t in report["pairwise_tests"])
    print(f"{n_sig}/{len(report['pairwise_tests'])} pairwise tests significant after Holm-Sidak ({report['correction_scope']})")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out = _outdir(args, config)
    manifests = {m.run_id: m for m in read_manifests(out)}
    updated = []
    for ds, arch, seed in config.cells():
        rid = run_id(ds.name, arch, seed)
        m = manifests.get(rid)
        ckpt = out / "checkpoints" / f"{rid}.vaez"
        if m is None or m.status != "ok" or not ckpt.exists():
            log.warning("skipping %s: no finished run with a checkpoint", rid)
            continue
        bundle = load_dataset(ds)
        model = load(ckpt)
        rows = evaluation_rows(bundle.n_rows, seed, config.interventions.eval_cap, config.train.heldout_fraction)
        ab = grouping_ablation(model, bundle, args.permutations or config.ablation_permutations,
                               SeededRng(seed).spawn("grouping-ablation"), rows, scales=config.interventions.scales)
        m.ablation = ablation_dict(ab)
        updated.append(m)
        print(f"{rid}: modularity {ab.semantic_modularity:.4f} vs random {ab.random_modularity_mean:.4f}; "
              f"FGD {ab.semantic_fgd:.4f} vs random {ab.random_fgd_mean:.4f}")
    write_manifests(updated, out)
    return 0


def cmd_report(args) -> int:
    out = _outdir(args)
    manifests = read_manifests(out)
    report = aggregate(manifests, args.correction_scope)
    files = emit_reports(report, args.report_dir or out, manifests)
    print(f"wrote {len(files)} files to {args.report_dir or out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaecircuits", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config):
        sp.add_argument("--config", required=needs_config, help="YAML experiment config")
        sp.add_argument("--out", help="results directory (defaults to the config's output_dir)")
        sp.add_argument("--jobs", type=int, default=1, help="grid cells run concurrently")
        sp.add_argument("--seed-override", type=int, nargs="+", help="replace the config's seeds")

    sp = sub.add_parser("run", help="train and analyze every grid cell, writing manifests")
    common(sp, True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("analyze", help="aggregate manifests and run the statistics")
    common(sp, False)
    sp.add_argument("--correction-scope", choices=("global", "per_metric"), default="global")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ablate", help="grouping ablation against saved checkpoints")
    common(sp, True)
    sp.add_argument("--permutations", type=int, default=None)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="emit CSV reports, heatmaps and summary.json")
    common(sp, False)
    sp.add_argument("--correction-scope", choices=("global", "per_metric"), default="global")
    sp.add_argument("--report-dir", help="where to write reports (defaults to --out)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
