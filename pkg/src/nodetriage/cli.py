"""``nodetriage`` command line: simulate, ingest, analyze, evaluate, schedule, report."""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .embed import kmeans, map_plot_data, standardize_columns
from .evaluation import ComparisonRow, confusion, rank_rows, render_confusion
from .fleet import FeatureMatrix, aggregate, boxplot_groups, ingest_samples, variance_growth
from .imbalance import BoostConfig, MlpModel, SmoteConfig, TrainConfig, mlp_predict_many, mlp_train, quadrant_outliers
from .outliers import (DEFAULT_CUTOFF, composite_screen, fit_regression, mahalanobis_outliers,
                       reports_from_json, reports_to_json, sigma_outliers, subset_outliers)
from .scheduling import (MitigationBands, equivalent_node_loss, mitigation_plan, priority_order,
                         scheduler_weights)
from .sim import FleetConfig, config_from_toml, config_to_toml, simulate_fleet, truth_from_text, truth_to_text

METHODS = ("composite", "sigma", "mahalanobis", "nn", "kmeans-map")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch
            else dt.datetime.now(dt.timezone.utc))
    return when.replace(microsecond=0).isoformat()


class Run:
    """Collects outputs for one command and writes its manifest."""

    def __init__(self, args: argparse.Namespace, inputs: list[Path]):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = [p for p in inputs if p is not None]
        self.outputs: list[Path] = []

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.outputs.append(path)
        return path

    def finish(self) -> None:
        cfg = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        cfg_text = json.dumps(cfg, sort_keys=True, default=str)
        manifest = {
            "command": self.args.command,
            "config": cfg,
            "config_digest": hashlib.sha256(cfg_text.encode()).hexdigest(),
            "inputs": {str(p): _sha256(p) for p in self.inputs},
            "outputs": {p.name: _sha256(p) for p in self.outputs},
            "seed": self.args.seed,
            "version": __version__,
            "timestamp": _timestamp(),
        }
        path = self.out / f"manifest-{self.args.command}.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_samples(args):
    if not getattr(args, "samples", None):
        raise ValueError("--samples is required")
    with open(args.samples, encoding="utf-8", newline="") as fh:
        return ingest_samples(fh, allow_unknown_apps=getattr(args, "allow_unknown_apps", False),
                              allow_missing=getattr(args, "allow_missing", False))


def _load_matrix(args) -> FeatureMatrix:
    if getattr(args, "matrix", None):
        return FeatureMatrix.from_csv(_read(args.matrix))
    return aggregate(_load_samples(args))


def _split(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _inputs(args) -> list[Path]:
    return [Path(p) for p in (getattr(args, "samples", None), getattr(args, "matrix", None)) if p]


# --- commands -------------------------------------------------------------

def cmd_simulate(args) -> None:
    base = config_from_toml(_read(args.config)) if args.config else FleetConfig()
    over = {k: v for k, v in (("node_count", args.nodes), ("outlier_count", args.outliers),
                              ("samples_per_node", args.samples_per_node),
                              ("slow_shift_sigma", args.shift),
                              ("slow_variance_factor", args.variance_factor),
                              ("seed", args.seed)) if v is not None}
    config = FleetConfig(**{**base.__dict__, **over})
    samples, truth = simulate_fleet(config, threads=args.threads)
    run = Run(args, [Path(args.config)] if args.config else [])
    run.write("samples.csv", samples.to_csv())
    run.write("truth.txt", truth_to_text(truth))
    run.write("fleet.toml", config_to_toml(config))
    run.finish()


def cmd_ingest(args) -> None:
    samples = _load_samples(args)
    run = Run(args, _inputs(args))
    run.write("features.csv", aggregate(samples).to_csv())
    run.finish()


def _nn(args, matrix: FeatureMatrix, run: Run) -> None:
    target = matrix.resolve(args.target)
    feats = ([matrix.resolve(f) for f in _split(args.nn_features)] if args.nn_features
             else [f for f in matrix.features if f.app != target.app])
    x, y = matrix.select(feats), matrix.column(target)
    hidden = tuple(int(h) for h in _split(args.hidden))
    seed = args.seed if args.seed is not None else 0
    boost = BoostConfig(SmoteConfig(args.smote_k, args.smote_percent, seed), args.minority_sigma,
                        args.duplicate)
    model = mlp_train(x, y, boost, TrainConfig(args.lr, args.epochs, args.batch_size, seed, hidden),
                      features=[f.label for f in feats])
    pred = mlp_predict_many(model, x)
    report = quadrant_outliers(dict(zip(matrix.nodes, pred.tolist())),
                               dict(zip(matrix.nodes, y.tolist())))
    report.metadata["target"] = target.label
    run.write("model.json", model.to_json())
    run.write("predictions.csv", "node_id,predicted,actual\n" + "".join(
        f"{n},{p!r},{a!r}\n" for n, p, a in zip(matrix.nodes, pred.tolist(), y.tolist())))
    run.write("report-nn.json", report.to_json())


def cmd_analyze(args) -> None:
    matrix = _load_matrix(args)
    run = Run(args, _inputs(args))
    for method in args.method:
        if method == "composite":
            rep = composite_screen(matrix, cutoff=args.cutoff, fast_cutoff=args.fast_cutoff)
            run.write("report-composite.json", rep.to_json())
        elif method == "sigma":
            rep = sigma_outliers(matrix, args.sigma_feature, args.sigma, args.side)
            run.write("report-sigma.json", rep.to_json())
        elif method == "mahalanobis":
            if args.features:
                rep = mahalanobis_outliers(matrix, _split(args.features), args.score_cut, args.primary)
                run.write("report-mahalanobis.json", rep.to_json())
            else:
                whitelist = _split(args.whitelist) or None
                reps = subset_outliers(matrix, args.max_arity, args.score_cut, args.primary,
                                       whitelist, threads=args.threads, allow_large=args.allow_large)
                run.write("report-mahalanobis.json", reports_to_json(list(reps.values())))
        elif method == "nn":
            _nn(args, matrix, run)
        elif method == "kmeans-map":
            seed = args.seed if args.seed is not None else 0
            clusters = kmeans(standardize_columns(matrix.values), args.k, seed)
            clusters.nodes = matrix.nodes
            plot = map_plot_data(matrix, clusters)
            run.write("map.csv", plot.to_csv())
            run.write("map.svg", plot.to_svg(title=f"node map, k={args.k}"))
            run.write("clusters.json", json.dumps({
                "k": args.k, "inertia": clusters.inertia, "iterations": clusters.iterations,
                "assignment": clusters.assignment,
                "centroids": clusters.centroids.tolist(),
                "features": matrix.labels}, sort_keys=True, indent=2) + "\n")
        else:
            raise ValueError(f"unknown method {method!r}")
    run.finish()


def cmd_evaluate(args) -> None:
    if not args.truth or not Path(args.truth).exists():
        raise FileNotFoundError(f"truth file not found: {args.truth}")
    truth = set(truth_from_text(_read(args.truth)))
    universe = set(_load_matrix(args).nodes)
    rows = []
    for path in args.reports:
        reports = reports_from_json(_read(path))
        if not reports:
            rows.append(ComparisonRow(Path(path).stem, (), confusion((), truth, universe)))
        for r in reports:
            rows.append(ComparisonRow(r.method, r.subset, confusion(r.nodes, truth, universe)))
    table = rank_rows(rows)
    run = Run(args, _inputs(args) + [Path(args.truth)] + [Path(p) for p in args.reports])
    run.write("comparison.txt", table.to_text(args.top))
    run.write("comparison.csv", table.to_csv())
    run.finish()


def _scores(args, matrix: FeatureMatrix) -> dict[str, float]:
    if args.by == "nn-prediction":
        if not args.model:
            raise ValueError("--by nn-prediction needs --model")
        model = MlpModel.from_json(_read(args.model))
        pred = mlp_predict_many(model, matrix.select(list(model.features)))
        return dict(zip(matrix.nodes, pred.tolist()))
    if not args.by:
        raise ValueError("missing score source: pass --by <feature> or --by nn-prediction")
    return matrix.as_dict(args.by)


def cmd_schedule(args) -> None:
    matrix = _load_matrix(args)
    scores = _scores(args, matrix)
    values = np.array(list(scores.values()))
    mean, std = float(values.mean()), float(values.std())
    sigmas = {n: ((s - mean) / std if std > 0 else 0.0) for n, s in scores.items()}
    bands = MitigationBands(args.replace_below, args.trim_below, args.interactive_below,
                            args.queue_tail_below)
    if args.reports:
        reports = [r for p in args.reports for r in reports_from_json(_read(p))]
    else:
        from .outliers import Flag, OutlierReport
        reports = [OutlierReport("sigma", (args.by,), -bands.queue_tail,
                                 [Flag(n, s, "below") for n, s in sigmas.items()
                                  if s < bands.queue_tail])]
    plan = mitigation_plan(reports, sigmas, bands)
    run = Run(args, _inputs(args) + [Path(p) for p in (args.reports or [])]
              + ([Path(args.model)] if args.model else []))
    run.write("weights.txt", scheduler_weights(priority_order(scores)))
    run.write("mitigation.json", plan.to_json())
    run.finish()


def cmd_report(args) -> None:
    samples = _load_samples(args)
    matrix = aggregate(samples)
    run = Run(args, _inputs(args) + ([Path(args.truth)] if args.truth else [])
              + [Path(p) for p in args.reports])
    feat = matrix.resolve(args.feature)
    n = len(matrix.nodes)
    col = matrix.column(feat)
    lines = ["# Fleet triage report", "",
             f"- nodes: {n}", f"- applications: {len(samples.apps)}",
             f"- ranking feature: {feat.label}",
             f"- fleet mean {feat.label}: {col.mean():.3f} (stddev {col.std():.3f})", ""]

    slowest = int(np.argmin(col))
    slowdown = max(0.0, 1.0 - col[slowest] / col.mean())
    lines += ["## Slowest node", "",
              f"- {matrix.nodes[slowest]}: {col[slowest]:.3f} ({slowdown:.2%} below the fleet mean)",
              f"- equivalent node loss: {equivalent_node_loss(n, min(slowdown, 0.999999)):.1f} nodes", ""]

    b, m, t = args.groups
    if b + m + t <= n:
        groups = boxplot_groups(matrix, samples, feat, b, m, t)
        run.write("boxplot.csv", groups.to_csv())
        lines += ["## Boxplot groups (median per-node sample variance)", ""]
        for name, boxes in groups.groups().items():
            lines.append(f"- {name} {len(boxes)}: {np.median([x.variance for x in boxes]):.3f}")
        lines.append("")

    counts = samples.frame.groupby("node_id").size()
    per_app = int(counts.min()) // max(len(samples.apps), 1)
    batches = [s for s in range(10, per_app + 1, 10)]
    if batches:
        lines += [f"## Variance growth, {matrix.nodes[slowest]} {feat.app}", ""]
        for size, var in variance_growth(samples, matrix.nodes[slowest], feat.app, batches):
            lines.append(f"- first {size} samples: variance {var:.3f}")
        lines.append("")

    cands = [f for f in matrix.features if f.app != feat.app and f.stat != "StdDev"]
    if cands and n >= len(cands) + 2:
        fit = fit_regression(matrix, feat, cands)
        lines += ["## Minimal regression set", "",
                  f"- residual stddev {fit.residual_std:.4f} with {len(fit.features)} feature(s)"]
        lines += [f"- {name}: {c:.4f}" for name, c in zip(fit.features, fit.coefficients)]
        lines.append("")

    if args.truth:
        truth = set(truth_from_text(_read(args.truth)))
        universe = set(matrix.nodes)
        comp = composite_screen(matrix)
        rows = [ComparisonRow(comp.method, comp.subset, confusion(comp.nodes, truth, universe))]
        for p in args.reports:
            for r in reports_from_json(_read(p)):
                rows.append(ComparisonRow(r.method, r.subset, confusion(r.nodes, truth, universe)))
        table = rank_rows(rows)
        lines += ["## Detector comparison", "", "```", table.to_text(args.top).rstrip(), "```", "",
                  "Best row:", "", "```", render_confusion(table.rows[0].cm).rstrip(), "```", ""]
    run.write("report.md", "\n".join(lines))
    run.finish()


# --- argument parsing -----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand; the copy
    # attached to subcommands suppresses defaults so it cannot clobber them.
    top = argparse.ArgumentParser(add_help=False)
    top.add_argument("--seed", type=int, default=None)
    top.add_argument("--out-dir", default=".")
    top.add_argument("--threads", type=int, default=1)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--threads", type=int)

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--samples", help="sample CSV (node_id,app_id,sample_index,value)")
    inputs.add_argument("--matrix", help="feature CSV written by 'ingest'")
    inputs.add_argument("--allow-missing", action="store_true",
                        help="drop nodes lacking samples for some app instead of failing")
    inputs.add_argument("--allow-unknown-apps", action="store_true")

    p = _Parser(prog="nodetriage", parents=[top],
                                description="Slow-node triage from proxy benchmark samples.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic fleet")
    s.add_argument("--nodes", type=int)
    s.add_argument("--outliers", type=int)
    s.add_argument("--samples", dest="samples_per_node", type=int)
    s.add_argument("--shift", type=float, help="slow-node mean shift in healthy stddevs")
    s.add_argument("--variance-factor", type=float)
    s.add_argument("--config", help="fleet.toml")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", parents=[common, inputs], help="validate samples, write features.csv")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("analyze", parents=[common, inputs], help="run detectors")
    s.add_argument("--method", action="append", choices=METHODS, required=True)
    s.add_argument("--features", help="comma-separated Mahalanobis subset, e.g. 'HPL Mean,MPI DGEMM Mean'")
    s.add_argument("--max-arity", type=int, default=2, choices=range(2, 7))
    s.add_argument("--whitelist", help="comma-separated features for subset enumeration")
    s.add_argument("--allow-large", action="store_true")
    s.add_argument("--score-cut", type=float, default=3.5)
    s.add_argument("--primary", default="HPL Mean")
    s.add_argument("--sigma", type=float, default=3.5)
    s.add_argument("--sigma-feature", default="HPL Mean")
    s.add_argument("--side", choices=("below", "above", "both"), default="below")
    s.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    s.add_argument("--fast-cutoff", type=float)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--target", default="HPL Mean")
    s.add_argument("--nn-features")
    s.add_argument("--hidden", default="300,40")
    s.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    s.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    s.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    s.add_argument("--smote-k", type=int, default=5)
    s.add_argument("--smote-percent", type=int, default=300)
    s.add_argument("--minority-sigma", type=float, default=3.0)
    s.add_argument("--duplicate", type=int, default=1)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("evaluate", parents=[common, inputs], help="score reports against ground truth")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--top", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("schedule", parents=[common, inputs], help="weight file and mitigation plan")
    s.add_argument("--by", help="feature label or 'nn-prediction'")
    s.add_argument("--model")
    s.add_argument("--reports", nargs="*")
    s.add_argument("--replace-below", type=float, default=MitigationBands.replace)
    s.add_argument("--trim-below", type=float, default=MitigationBands.trim)
    s.add_argument("--interactive-below", type=float, default=MitigationBands.interactive)
    s.add_argument("--queue-tail-below", type=float, default=MitigationBands.queue_tail)
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("report", parents=[common, inputs], help="markdown fleet summary")
    s.add_argument("--feature", default="HPL Mean")
    s.add_argument("--truth")
    s.add_argument("--reports", nargs="*", default=[])
    s.add_argument("--groups", type=int, nargs=3, default=(70, 11, 11), metavar=("BOTTOM", "MIDDLE", "TOP"))
    s.add_argument("--top", type=int, default=20)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # single machine-parsable line, non-zero exit
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
