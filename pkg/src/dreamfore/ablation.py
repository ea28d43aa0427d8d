"""Grid runs over recurrent step and sequence length, one trained model per cell."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import autodiff as ad
from .config import TrainConfig
from .data import load
from .evaluation import evaluate
from .synthetic import generate_synthetic
from .training import fit, prepare

log = logging.getLogger(__name__)

CSV_FIELDS = ("cell", "dt", "T", "H", "epochs", "minADE", "minFDE", "actorMR", "n_scenarios", "aborted", "status")


@dataclass
class AblationGrid:
    """``base`` holds TrainConfig overrides shared by every cell; each cell adds its own."""

    cells: list[dict]
    base: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"synthetic": {"seed": 0, "count": 8}})
    k: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "AblationGrid":
        unknown = set(d) - {"cells", "base", "data", "k"}
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        if not d.get("cells"):
            raise ValueError("grid needs at least one cell")
        return cls(cells=list(d["cells"]), base=dict(d.get("base", {})),
                   data=dict(d.get("data", {"synthetic": {"seed": 0, "count": 8}})), k=int(d.get("k", 1)))

    @classmethod
    def load(cls, path) -> "AblationGrid":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def grid_scenarios(grid: AblationGrid, root=None):
    if "path" in grid.data:
        p = Path(grid.data["path"])
        if not p.is_absolute() and root is not None:
            p = Path(root) / p
        return load(p)
    syn = grid.data.get("synthetic", {})
    return generate_synthetic(int(syn.get("seed", 0)), int(syn.get("count", 8)), mix=syn.get("mix"))


def cell_config(grid: AblationGrid, cell: dict, horizon_len: int) -> tuple[str, TrainConfig]:
    cell = dict(cell)
    name = str(cell.pop("name", "-".join(f"{k}{v}" for k, v in sorted(cell.items()))))
    cfg = TrainConfig().replace(**grid.base).replace(**cell)
    if "H" not in cell and "H" not in grid.base:
        # full horizon at the cell's step size
        cfg = cfg.replace(H=cfg.plan_steps(horizon_len))
    return name, cfg


def run_ablation(grid: AblationGrid, out_dir, scenarios=None) -> list[dict]:
    """Train and evaluate each cell on the same corpus; writes ``ablation.csv`` plus per-cell artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = scenarios if scenarios is not None else grid_scenarios(grid)
    horizon = scenarios[0].horizon_len
    rows = []
    for cell in grid.cells:
        name, cfg = cell_config(grid, cell, horizon)
        log.info("ablation cell %s: dt=%s T=%s H=%d", name, cfg.dt, cfg.T, cfg.H)
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        row = {"cell": name, "dt": cfg.dt, "T": cfg.T, "H": cfg.H, "epochs": cfg.epochs}
        try:
            samples = prepare(scenarios, cfg)
            res = fit(scenarios, cfg, log_path=cdir / "train_log.csv", samples=samples)
            ad.save_params(cdir / "checkpoint.npz", res.params, {"config": cfg.to_dict(), "horizon_len": horizon})
            rep = evaluate(params=res.params, cfg=cfg, samples=samples, k=grid.k)
        except Exception as exc:  # noqa: BLE001
            # one bad cell must not sink the grid; the row carries the failure
            log.error("ablation cell %s failed: %s", name, exc)
            row.update(minADE=float("nan"), minFDE=float("nan"), actorMR=float("nan"), n_scenarios=0, aborted=0,
                       status=f"failed: {type(exc).__name__}: {' '.join(str(exc).split())}")
            rows.append(row)
            continue
        (cdir / "metrics.csv").write_text(rep.to_csv())
        (cdir / "metrics.json").write_text(rep.to_json())
        row.update(minADE=rep.min_ade, minFDE=rep.min_fde, actorMR=rep.actor_mr, n_scenarios=rep.n_scenarios,
                   aborted=len(rep.aborted), status="ok")
        rows.append(row)
    write_table(rows, out / "ablation.csv")
    return rows


def write_table(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
