"""Command-line entry points: gen-data, train, eval, dream, ablate.

Every command writes its artifacts and a ``manifest.json`` under ``--out``.
Bad flags exit 2 with usage text; runtime failures exit 1 with a single
``error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ablation import AblationGrid, grid_scenarios, run_ablation
from .config import TrainConfig, dump_config, load_config
from .data import load, save
from .evaluation import evaluate, rollout_record
from .metrics import aggregate, scenario_metrics
from .planner import plan_steps_of
from .svg import write_overlay
from .synthetic import ARCHETYPES, generate_synthetic
from .training import dream_rollout, fit, prepare

log = logging.getLogger("dreamfore")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    git_describe: str
    out_dir: str
    started: str
    finished: str = ""
    status: str = "ok"

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                           cwd=Path(__file__).resolve().parent, timeout=10)
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def _existing(text):
    if not Path(text).exists():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return text


def _load_checkpoint(path) -> tuple[ad.Params, TrainConfig, int]:
    params, meta = ad.load_params(path)
    if "config" not in meta:
        raise ValueError(f"{path}: checkpoint has no config snapshot")
    return params, TrainConfig.from_dict(meta["config"]), int(meta.get("horizon_len", 60))


def cmd_gen_data(args) -> dict:
    mix = args.mix.split(",") if args.mix else None
    if mix:
        bad = set(mix) - set(ARCHETYPES)
        if bad:
            raise ValueError(f"unknown archetypes {sorted(bad)}")
    scenarios = generate_synthetic(args.seed, args.count, mix=mix)
    save(scenarios, args.out / "corpus.jsonl")
    print(f"wrote {len(scenarios)} scenarios to {args.out / 'corpus.jsonl'}")
    return {"seed": args.seed, "count": args.count, "mix": mix}


def cmd_train(args) -> dict:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "epochs") if getattr(args, k) is not None}
    cfg = cfg.replace(**overrides) if overrides else cfg
    scenarios = load(args.data)
    if not scenarios:
        raise ValueError(f"{args.data}: no scenarios")
    params = None
    if args.resume:
        params, _, _ = _load_checkpoint(args.resume)
    dump_config(cfg, args.out / "config.yaml")
    res = fit(scenarios, cfg, log_path=args.out / "train_log.csv", params=params)
    meta = {"config": cfg.to_dict(), "horizon_len": scenarios[0].horizon_len, "epochs": cfg.epochs}
    ad.save_params(args.out / "checkpoint.npz", res.params, meta)
    last = res.history[-1] if res.history else {}
    print(f"trained {cfg.epochs} epochs; final total={last.get('total', float('nan')):.4f} "
          f"dream={last.get('dream', float('nan')):.4f}")
    return cfg.to_dict()


def _baseline_report(scenarios, cfg: TrainConfig, predictor: str):
    """Oracle (ground truth) or constant-velocity predictions, scored like the model."""
    samples = prepare(scenarios, cfg)
    T = cfg.H * cfg.substeps
    per = []
    for s in samples:
        m = s.eval_mask
        if not m.any():
            continue
        gt = s.gt_states[m, 1:T + 1, :2]
        if predictor == "oracle":
            pred = gt.copy()
        else:
            st = s.gt_states[m, 0]
            t = np.arange(1, T + 1) * cfg.model.sample_dt
            v = st[:, 3:4]
            pred = np.stack([st[:, 0:1] + v * np.cos(st[:, 2:3]) * t, st[:, 1:2] + v * np.sin(st[:, 2:3]) * t], -1)
        per.append(scenario_metrics(s.id, pred, gt))
    return aggregate(per, k=1)


def cmd_eval(args) -> dict:
    scenarios = load(args.data)
    if not scenarios:
        raise ValueError(f"{args.data}: no scenarios")
    if args.predictor == "model":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required with --predictor model")
        params, cfg, _ = _load_checkpoint(args.checkpoint)
        if args.H is not None:
            cfg = cfg.replace(H=args.H)
        rep = evaluate(scenarios, params, cfg, k=args.k,
                       dump_dir=args.out / "rollouts" if args.dump_rollouts else None)
    else:
        cfg = TrainConfig()
        if args.checkpoint:
            _, cfg, _ = _load_checkpoint(args.checkpoint)
        cfg = cfg.replace(H=args.H if args.H is not None else cfg.plan_steps(scenarios[0].horizon_len))
        rep = _baseline_report(scenarios, cfg, args.predictor)
    (args.out / "metrics.csv").write_text(rep.to_csv())
    (args.out / "metrics.json").write_text(rep.to_json())
    print(f"minADE_{rep.k}={rep.min_ade:.4f} minFDE_{rep.k}={rep.min_fde:.4f} actorMR_{rep.k}={rep.actor_mr:.4f} "
          f"scenarios={rep.n_scenarios} aborted={len(rep.aborted)}")
    return cfg.to_dict()


def cmd_dream(args) -> dict:
    params, cfg, _ = _load_checkpoint(args.checkpoint)
    changes = {"H": args.H}
    if args.dt is not None:
        changes["dt"] = args.dt
    cfg = cfg.replace(**changes)
    scenarios = load(args.data)
    matches = [s for s in scenarios if s.id == args.scenario] if args.scenario else scenarios[:1]
    if not matches:
        raise KeyError(f"scenario {args.scenario!r} not in {args.data}")
    sc = matches[0]
    steps = plan_steps_of(params)
    if cfg.plan_steps(sc.horizon_len) != steps:
        raise ValueError(f"dt={cfg.dt} needs a planner with {cfg.plan_steps(sc.horizon_len)} steps; "
                         f"checkpoint has {steps}")
    sample = prepare([sc], cfg)[0]
    with ad.no_record():
        rollout = dream_rollout([sample], params, cfg)
    rec = rollout_record(sample, rollout, 0)
    (args.out / "rollout.json").write_text(json.dumps(rec))
    write_overlay(rec, args.out / "dream.svg")
    print(f"dreamed {cfg.H} steps at dt={cfg.dt} for {sc.id}")
    return cfg.to_dict()


def cmd_ablate(args) -> dict:
    grid = AblationGrid.load(args.grid)
    scenarios = grid_scenarios(grid, root=Path(args.grid).parent)
    rows = run_ablation(grid, args.out, scenarios)
    for r in rows:
        print(f"{r['cell']}: dt={r['dt']} T={r['T']} H={r['H']} minADE={r['minADE']:.4f} "
              f"minFDE={r['minFDE']:.4f} {r['status']}")
    return asdict(grid)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dreamfore", description="World-model motion forecasting at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=_positive(int), default=8)
    g.add_argument("--mix", default=None, help=f"comma-separated archetypes from {','.join(ARCHETYPES)}")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a scenario corpus")
    t.add_argument("--config", type=_existing, default=None)
    t.add_argument("--data", type=_existing, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=_existing, default=None, help="checkpoint to start from")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score dreamed rollouts against logged futures")
    e.add_argument("--checkpoint", type=_existing, default=None)
    e.add_argument("--data", type=_existing, required=True)
    e.add_argument("--k", type=_positive(int), default=1)
    e.add_argument("--H", type=_positive(int), default=None)
    e.add_argument("--predictor", choices=("model", "oracle", "constant-velocity"), default="model")
    e.add_argument("--dump-rollouts", action="store_true")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("dream", help="dream one scenario and draw it")
    d.add_argument("--checkpoint", type=_existing, required=True)
    d.add_argument("--data", type=_existing, required=True)
    d.add_argument("--scenario", default=None)
    d.add_argument("--H", type=_positive(int), required=True)
    d.add_argument("--dt", type=float, choices=(0.1, 0.2, 0.5), default=None)
    d.add_argument("--out", type=Path, required=True)
    d.set_defaults(fn=cmd_dream)

    a = sub.add_parser("ablate", help="train and evaluate a grid of step-size / sequence-length cells")
    a.add_argument("--grid", type=_existing, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv, {}, getattr(args, "seed", None), git_describe(),
                           str(args.out), _now())
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        manifest.config = args.fn(args)
        if manifest.seed is None and isinstance(manifest.config, dict):
            manifest.seed = manifest.config.get("seed")
    except Exception as exc:  # noqa: BLE001
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        manifest.status = f"error: {type(exc).__name__}: {msg}"
        code = 1
    else:
        code = 0
    manifest.finished = _now()
    if args.out.is_dir():
        manifest.write(args.out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
