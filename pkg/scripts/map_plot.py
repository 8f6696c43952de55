"""Cluster a simulated fleet and write the 2-D node map as CSV and SVG.

    python3 scripts/map_plot.py --nodes 3000 --k 3 --out map
"""
import argparse
from pathlib import Path

from nodetriage.embed import kmeans, map_plot_data, standardize_columns
from nodetriage.fleet import aggregate
from nodetriage.sim import FleetConfig, simulate_fleet


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=3000)
    ap.add_argument("--outliers", type=int, default=33)
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("map"))
    args = ap.parse_args()

    samples, truth = simulate_fleet(FleetConfig(node_count=args.nodes, outlier_count=args.outliers,
                                                samples_per_node=args.samples, seed=args.seed))
    m = aggregate(samples)
    clusters = kmeans(standardize_columns(m.values), args.k, args.seed)
    plot = map_plot_data(m, clusters)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "map.csv").write_text(plot.to_csv())
    (args.out / "map.svg").write_text(plot.to_svg(title=f"{len(m.nodes)} nodes, k={args.k}"))

    slow = set(truth)
    for c in sorted(set(clusters.labels.tolist())):
        members = [n for n, lab in zip(m.nodes, clusters.labels) if lab == c]
        print(f"cluster {c}: {len(members)} nodes, {sum(n in slow for n in members)} planted slow")
    print(f"wrote {args.out / 'map.csv'} and {args.out / 'map.svg'}")


if __name__ == "__main__":
    main()
