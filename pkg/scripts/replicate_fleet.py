"""Simulate full-size fleets and score every detector against the planted slow nodes.

    python3 scripts/replicate_fleet.py --seeds 0 1 2 --top 10
"""
import argparse
import time

from nodetriage.evaluation import compare_methods, confusion, render_confusion
from nodetriage.fleet import aggregate
from nodetriage.imbalance import TrainConfig, mlp_predict_many, mlp_train, quadrant_outliers
from nodetriage.outliers import composite_screen, sigma_outliers, subset_outliers
from nodetriage.sim import FleetConfig, simulate_fleet


def run_seed(seed: int, top: int, threads: int) -> None:
    t0 = time.perf_counter()
    samples, truth = simulate_fleet(FleetConfig(seed=seed), threads=threads)
    m = aggregate(samples)
    del samples
    print(f"== seed {seed}: {len(m.nodes)} nodes, {len(truth)} planted slow nodes")

    entries = []
    comp = composite_screen(m)
    entries.append(("composite", comp.subset, comp.nodes))
    sig = sigma_outliers(m, "HPL Mean")
    entries.append(("sigma", sig.subset, sig.nodes))
    for rep in subset_outliers(m, max_arity=2).values():
        entries.append(("mahalanobis", rep.subset, rep.nodes))

    feats = [f for f in m.features if f.app != "HPL"]
    x, y = m.select(feats), m.column("HPL Mean")
    pred = mlp_predict_many(mlp_train(x, y, hyper=TrainConfig(seed=seed)), x)
    nn = quadrant_outliers(dict(zip(m.nodes, pred)), dict(zip(m.nodes, y)))
    entries.append(("nn", (), nn.nodes))

    print(render_confusion(confusion(nn.nodes, truth, m.nodes), "neural network quadrant"))
    print(render_confusion(confusion(comp.nodes, truth, m.nodes), "composite screen"))
    print(compare_methods(entries, truth, m.nodes).to_text(limit=top))
    print(f"({time.perf_counter() - t0:.0f}s)\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--top", type=int, default=10, help="comparison rows to print")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    for s in args.seeds:
        run_seed(s, args.top, args.threads)


if __name__ == "__main__":
    main()
