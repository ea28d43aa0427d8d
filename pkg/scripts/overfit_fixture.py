"""Train the 8-scenario overfit fixture and report training-set metrics.

    python3 scripts/overfit_fixture.py --out runs/overfit
"""

import argparse
import logging
import time
from pathlib import Path

from dreamfore import autodiff as ad
from dreamfore.config import dump_config, load_config
from dreamfore.data import save
from dreamfore.evaluation import evaluate
from dreamfore.synthetic import generate_synthetic
from dreamfore.training import fit, prepare

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=ROOT / "configs" / "overfit.yaml")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config)
    scenarios = generate_synthetic(args.seed, args.count)
    save(scenarios, args.out / "corpus.jsonl")
    dump_config(cfg, args.out / "config.yaml")
    samples = prepare(scenarios, cfg)
    t0 = time.perf_counter()
    res = fit(scenarios, cfg, log_path=args.out / "train_log.csv", samples=samples)
    elapsed = time.perf_counter() - t0
    ad.save_params(args.out / "checkpoint.npz", res.params,
                   {"config": cfg.to_dict(), "horizon_len": scenarios[0].horizon_len, "epochs": cfg.epochs})
    rep = evaluate(params=res.params, cfg=cfg, samples=samples)
    (args.out / "metrics.csv").write_text(rep.to_csv())
    dreams = [h["dream"] for h in res.history if h["dream"] == h["dream"]]
    print(f"trained {cfg.epochs} epochs in {elapsed:.0f}s")
    print(f"train-set minADE_1={rep.min_ade:.3f} minFDE_1={rep.min_fde:.3f} actorMR_1={rep.actor_mr:.3f}")
    if dreams:
        print(f"dream loss {dreams[0]:.1f} -> {dreams[-1]:.1f}")


if __name__ == "__main__":
    main()
