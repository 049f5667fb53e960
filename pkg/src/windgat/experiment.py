"""The desk-scale comparison of all seven models and its ordering checks."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gnn import GraphNetwork
from .graphs import build_graph
from .train import (
    GRAPH_KINDS,
    MODEL_KINDS,
    TABLE_NAMES,
    EvalReport,
    SplitData,
    TrainConfig,
    build_model,
    evaluate,
    make_learner,
    prepare,
    timed,
    train,
)
from .wakesim import FarmScenario, NormStats, SimConfig, desk_config, normalize_and_split, simulate_dataset

log = logging.getLogger(__name__)


def neighbor_capacity(cfg: SimConfig) -> int:
    """Padded-MLP capacity: a turbine can have at most every other turbine upstream."""
    return cfg.turbine_count_range[1] - 1


@dataclass
class PreparedDataset:
    cfg: SimConfig
    stats: NormStats
    train: SplitData
    val: SplitData
    test: SplitData

    @classmethod
    def from_config(cls, cfg: SimConfig, split_seed: int | None = None) -> "PreparedDataset":
        records = simulate_dataset(cfg)
        tr, va, te, stats = normalize_and_split(records, cfg.seed if split_seed is None else split_seed)
        return cls(cfg, stats, prepare(tr, stats), prepare(va, stats), prepare(te, stats))


@dataclass
class ModelRun:
    kind: str
    learner: object
    history: list[dict]
    best_epoch: int
    seconds: float


@dataclass
class Comparison:
    report: EvalReport
    runs: dict[str, ModelRun] = field(default_factory=dict)


def run_comparison(
    data: PreparedDataset,
    train_cfg: TrainConfig,
    kinds: Sequence[str] = MODEL_KINDS,
    seed: int = 0,
) -> Comparison:
    out = Comparison(EvalReport())
    for kind in kinds:
        model = build_model(kind, seed=seed, max_neighbors=neighbor_capacity(data.cfg))
        learner = make_learner(kind, model, data.stats)
        result, secs = timed(train, learner, data.train, data.val, train_cfg)
        row = evaluate(learner, data.test)
        row.epochs, row.wall_seconds = result.state.epoch, secs
        out.report.rows.append(row)
        out.runs[kind] = ModelRun(kind, learner, result.state.history, result.state.best_epoch, secs)
        log.info("%s: %d epochs in %.0f s, test %s", kind, result.state.epoch, secs, row)
    return out


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def ordering_checks(report: EvalReport, floor_ratio: float = 3.0, spread: float = 0.25) -> list[Check]:
    """Turbine-MAE ordering: graphs < BLSTM <= MLP < BS_Turb, graphs far below BS_Turb and close together."""
    t = {r.model: r.mae_turbine for r in report.rows}
    graphs = [TABLE_NAMES[k] for k in GRAPH_KINDS]
    g = {k: t[k] for k in graphs}
    checks = [
        Check(f"{k} < BLSTM", g[k] < t["BLSTM"], f"{g[k]:.6f} vs {t['BLSTM']:.6f}") for k in graphs
    ]
    checks.append(Check("BLSTM <= MLP", t["BLSTM"] <= t["MLP"], f"{t['BLSTM']:.6f} vs {t['MLP']:.6f}"))
    checks.append(Check("MLP < BS_Turb", t["MLP"] < t["BS_Turb"], f"{t['MLP']:.6f} vs {t['BS_Turb']:.6f}"))
    for k in graphs:
        ratio = t["BS_Turb"] / g[k]
        checks.append(Check(f"{k} at least {floor_ratio:g}x below BS_Turb", ratio >= floor_ratio, f"ratio {ratio:.1f}"))
    rel = max(g.values()) / min(g.values()) - 1.0
    checks.append(Check(f"graph models within {spread:.0%}", rel <= spread, f"spread {rel:.1%}"))
    return checks


def inline_scenario(stats: NormStats, spacing_diameters: float = 5.0, ws: float | None = None) -> FarmScenario:
    from .wakesim import Turbine

    t = Turbine(0.0, 0.0)
    d = spacing_diameters * t.rotor_diameter
    lo, hi = stats.bounds["ws"]
    return FarmScenario([t, t.at(d, 0.0), t.at(2 * d, 0.0)], (lo + hi) / 2 if ws is None else ws, 270.0)


def inline_attention_check(model: GraphNetwork, stats: NormStats) -> dict:
    """E2V weights of the last of three in-line turbines over its two upstream senders."""
    g = build_graph(inline_scenario(stats), stats=stats)
    rec = model.attention(g)
    if "e2v" not in rec.weights:
        raise ValueError("model has no edge-to-node attention")
    rows = np.flatnonzero(rec.receivers["e2v"] == 2)
    senders = g.senders[rec.senders["e2v"][rows]].tolist()
    heads = [rec.weights["e2v"][h][rows].tolist() for h in range(len(rec.weights["e2v"]))]
    nearest = senders.index(1)
    dominant = [int(np.argmax(w)) == nearest for w in heads]
    mean = np.mean(heads, axis=0)
    return {
        "senders": senders,
        "weights_per_head": heads,
        "mean_weights": mean.tolist(),
        "heads_favouring_nearest": int(sum(dominant)),
        "n_heads": len(heads),
        "nearest_dominant_on_average": bool(int(np.argmax(mean)) == nearest),
    }


def write_outputs(out_dir: str | Path, comp: Comparison, checks: list[Check], extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(comp.report.to_csv())
    (out / "table.txt").write_text(comp.report.table() + "\n")
    hist = {k: {"best_epoch": r.best_epoch, "history": r.history} for k, r in comp.runs.items()}
    (out / "history.json").write_text(json.dumps(hist, indent=1))
    summary = {"checks": [c.__dict__ for c in checks], **(extra or {})}
    (out / "checks.json").write_text(json.dumps(summary, indent=1))


def source_digest() -> str:
    """sha256 over the package sources, used to tell whether saved results are stale."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def desk_experiment(seed: int = 0, max_epochs: int = 500, out_dir: str | Path | None = None) -> tuple[Comparison, list[Check], dict]:
    data = PreparedDataset.from_config(desk_config(seed))
    comp = run_comparison(data, TrainConfig(max_epochs=max_epochs, seed=seed), seed=seed)
    checks = ordering_checks(comp.report)
    inline = inline_attention_check(comp.runs["f-graph"].learner.model, data.stats)
    if out_dir is not None:
        write_outputs(out_dir, comp, checks, {"inline_attention": inline, "seed": seed, "max_epochs": max_epochs, "source": source_digest()})
    return comp, checks, inline
