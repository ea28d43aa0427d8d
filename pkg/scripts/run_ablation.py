"""Train and evaluate every cell of an ablation grid, then print the table.

    python3 scripts/run_ablation.py configs/ablation.yaml --out runs/ablation
"""

import argparse
import logging
from pathlib import Path

from dreamfore.ablation import AblationGrid, grid_scenarios, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("grid", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--epochs", type=int, default=None, help="override epochs in every cell")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    grid = AblationGrid.load(args.grid)
    if args.epochs is not None:
        grid.base["epochs"] = args.epochs
    rows = run_ablation(grid, args.out, grid_scenarios(grid, root=args.grid.parent))
    print(f"{'cell':<10} {'dt':>5} {'H':>4} {'minADE':>8} {'minFDE':>8} {'MR':>6}")
    for r in rows:
        print(f"{r['cell']:<10} {r['dt']:>5} {r['H']:>4} {r['minADE']:>8.3f} {r['minFDE']:>8.3f} {r['actorMR']:>6.3f}")
    print(f"table written to {args.out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
