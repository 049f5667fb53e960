"""Training, evaluation and checkpoints for all seven model kinds.

Every model is wrapped in a small learner that knows how to turn a
prepared split into training items, how to compute a batch loss and how to
produce normalized turbine and farm predictions.  MAE is always reported in
normalized units.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Module, Tape, Tensor, ops
from .autodiff.io import load_arrays, save_arrays
from .baselines import BaselineModel, BLSTMModel, PaddedMLPModel, ScenarioSample, TurbineSample
from .gnn import SITES, AttentionWeights, GraphNetwork, NoAttentionError, graph_model
from .graphs import GraphBatch, WindGraph, build_graph, build_upstream_sequences
from .wakesim import FarmScenario, NormStats, PowerRecord

log = logging.getLogger(__name__)

MODEL_KINDS = ("bs-farm", "bs-turb", "mlp", "blstm", "o-graph", "n-graph", "f-graph")
GRAPH_KINDS = ("o-graph", "n-graph", "f-graph")
TABLE_NAMES = {
    "bs-farm": "BS_Farm",
    "bs-turb": "BS_Turb",
    "mlp": "MLP",
    "blstm": "BLSTM",
    "o-graph": "O-Graph",
    "n-graph": "N-Graph",
    "f-graph": "F-Graph",
}


class NumericError(RuntimeError):
    """Training produced a non-finite gradient or diverged."""


class DivergenceError(NumericError):
    pass


# -- metrics -----------------------------------------------------------------------------

def mae(y_hat, y) -> float:
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"mae shape mismatch: {y_hat.shape} vs {y.shape}")
    if y.size == 0:
        raise ValueError("mae of an empty vector")
    return float(np.mean(np.abs(y_hat - y)))


# -- data ------------------------------------------------------------------------------------

@dataclass
class SplitData:
    """One split in every representation the model families need.

    ``turbines`` follows scenario order then turbine index, the same order
    as the nodes of ``graphs``.
    """

    graphs: list[WindGraph]
    turbines: list[TurbineSample]
    scenarios: list[ScenarioSample]

    @property
    def turbine_targets(self) -> np.ndarray:
        return np.array([t.target for t in self.turbines])

    @property
    def farm_targets(self) -> np.ndarray:
        return np.array([s.target for s in self.scenarios])

    @property
    def turbine_scenario(self) -> np.ndarray:
        """Row of ``scenarios`` that each turbine belongs to."""
        return np.repeat(np.arange(len(self.graphs)), [g.n_nodes for g in self.graphs])

    def subset(self, scenario_rows: Sequence[int]) -> "SplitData":
        rows = list(scenario_rows)
        keep = set(self.scenarios[r].scenario_id for r in rows)
        return SplitData(
            [self.graphs[r] for r in rows],
            [t for t in self.turbines if t.scenario_id in keep],
            [self.scenarios[r] for r in rows],
        )


def prepare(records: Sequence[tuple[FarmScenario, PowerRecord]], stats: NormStats) -> SplitData:
    graphs, turbines, scenarios = [], [], []
    for sc, rec in records:
        graphs.append(build_graph(sc, rec, stats))
        n_scaled = float(stats.scale("n_turbines", sc.n_turbines))
        ws = float(stats.scale("ws", sc.ws))
        targets = stats.scale("turbine_power", rec.powers)
        for seq in build_upstream_sequences(sc, stats):
            turbines.append(TurbineSample.from_sequence(sc.id, seq, n_scaled, float(targets[seq.target])))
        scenarios.append(ScenarioSample(sc.id, ws, n_scaled, float(stats.scale("farm_power", rec.farm_power))))
    return SplitData(graphs, turbines, scenarios)


def max_neighbors(data: SplitData) -> int:
    return max((len(t.triples) for t in data.turbines), default=0)


# -- learners --------------------------------------------------------------------------------

@dataclass
class Predictions:
    turbine: np.ndarray | None
    farm: np.ndarray | None


def _loss(kind: str, pred: Tensor, target: np.ndarray) -> Tensor:
    t = Tensor(np.asarray(target, dtype=np.float64).reshape(-1, 1))
    return ops.mse(pred, t) if kind == "mse" else ops.mae(pred, t)


class GraphLearner:
    level = "graph"

    def __init__(self, kind: str, model: GraphNetwork, stats: NormStats):
        self.kind, self.model, self.stats = kind, model, stats

    def items(self, data: SplitData) -> list:
        return list(data.graphs)

    def batch_loss(self, items, loss_kind: str = "mse") -> Tensor:
        b = GraphBatch.from_graphs(items)
        node, glob, _ = self.model(b)
        return ops.add(_loss(loss_kind, node, b.node_targets), _loss(loss_kind, glob, b.global_targets))

    def predict(self, data: SplitData, chunk: int = 64) -> Predictions:
        node, glob = [], []
        for k in range(0, len(data.graphs), chunk):
            p = self.model.predict(data.graphs[k : k + chunk])
            node.append(p.node)
            glob.append(p.glob)
        return Predictions(np.concatenate(node), np.concatenate(glob))


class TurbineLearner:
    level = "turbine"

    def __init__(self, kind: str, model: Module, stats: NormStats):
        self.kind, self.model, self.stats = kind, model, stats

    def items(self, data: SplitData) -> list:
        return list(data.turbines)

    def batch_loss(self, items, loss_kind: str = "mse") -> Tensor:
        return _loss(loss_kind, self.model(items), [t.target for t in items])

    def predict(self, data: SplitData, chunk: int = 512) -> Predictions:
        out = [self.model(data.turbines[k : k + chunk]).data[:, 0] for k in range(0, len(data.turbines), chunk)]
        turbine = np.concatenate(out) if out else np.zeros(0)
        if self.kind == "bs-turb":
            return Predictions(turbine, None)
        return Predictions(turbine, farm_from_turbines(turbine, data, self.stats))


class FarmLearner:
    level = "scenario"

    def __init__(self, kind: str, model: Module, stats: NormStats):
        self.kind, self.model, self.stats = kind, model, stats

    def items(self, data: SplitData) -> list:
        return list(data.scenarios)

    def batch_loss(self, items, loss_kind: str = "mse") -> Tensor:
        return _loss(loss_kind, self.model(items), [s.target for s in items])

    def predict(self, data: SplitData, chunk: int = 512) -> Predictions:
        out = [self.model(data.scenarios[k : k + chunk]).data[:, 0] for k in range(0, len(data.scenarios), chunk)]
        return Predictions(None, np.concatenate(out))


def farm_from_turbines(turbine_pred: np.ndarray, data: SplitData, stats: NormStats) -> np.ndarray:
    """Sum de-normalized turbine predictions per scenario, then rescale as farm power."""
    watts = stats.unscale("turbine_power", turbine_pred)
    totals = np.zeros(len(data.scenarios))
    np.add.at(totals, data.turbine_scenario, watts)
    return stats.scale("farm_power", totals)


def build_model(kind: str, seed: int = 0, max_neighbors: int | None = None, config: dict | None = None) -> Module:
    """Default architecture for ``kind``, or the one described by ``config``."""
    if kind not in MODEL_KINDS:
        raise KeyError(f"unknown model kind {kind!r}; valid kinds: {', '.join(MODEL_KINDS)}")
    if config is not None:
        if kind in GRAPH_KINDS:
            return GraphNetwork.from_config(config)
        if kind == "mlp":
            return PaddedMLPModel(**config)
        if kind == "blstm":
            return BLSTMModel(**config)
        return BaselineModel(**config)
    if kind in GRAPH_KINDS:
        return graph_model(kind, seed=seed)
    if kind == "mlp":
        if max_neighbors is None:
            raise ValueError("the padded MLP needs max_neighbors")
        return PaddedMLPModel(max_neighbors, seed=seed)
    if kind == "blstm":
        return BLSTMModel(seed=seed)
    return BaselineModel("farm" if kind == "bs-farm" else "turbine", seed=seed)


def make_learner(kind: str, model: Module, stats: NormStats):
    if kind in GRAPH_KINDS:
        return GraphLearner(kind, model, stats)
    if kind == "bs-farm":
        return FarmLearner(kind, model, stats)
    return TurbineLearner(kind, model, stats)


# -- evaluation ------------------------------------------------------------------------------

@dataclass
class EvalRow:
    model: str
    mae_turbine: float | None
    mae_farm: float | None
    n_turbines: int
    n_scenarios: int
    epochs: int | None = None
    wall_seconds: float | None = None


def evaluate(learner, data: SplitData) -> EvalRow:
    p = learner.predict(data)
    return EvalRow(
        model=TABLE_NAMES[learner.kind],
        mae_turbine=None if p.turbine is None else mae(p.turbine, data.turbine_targets),
        mae_farm=None if p.farm is None else mae(p.farm, data.farm_targets),
        n_turbines=len(data.turbines),
        n_scenarios=len(data.scenarios),
    )


def validation_score(row: EvalRow) -> float:
    """Early-stopping metric: the sum of the MAEs a model is trained on."""
    parts = [v for v in (row.mae_turbine, row.mae_farm) if v is not None]
    return float(sum(parts))


def _validation_row(learner, data: SplitData) -> EvalRow:
    row = evaluate(learner, data)
    # turbine models are trained on turbines only; their summed farm MAE is reported, not optimized
    if isinstance(learner, TurbineLearner):
        row.mae_farm = None
    return row


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    COLUMNS = ("model", "mae_turbine", "mae_farm", "epochs", "wall_seconds")

    def row(self, name: str) -> EvalRow | None:
        return next((r for r in self.rows if r.model == name), None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in self.COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = []
        for d in csv.DictReader(io.StringIO(text)):
            num = lambda k, f=float: None if d[k] == "" else f(d[k])  # noqa: E731
            rows.append(EvalRow(d["model"], num("mae_turbine"), num("mae_farm"), 0, 0, num("epochs", int), num("wall_seconds")))
        return cls(rows)

    def table(self) -> str:
        fmt = lambda v: "-" if v is None else f"{v:.6f}"  # noqa: E731
        lines = [f"{'Model':<10} {'MAE Turbine':>12} {'MAE Farm':>12}"]
        lines += [f"{r.model:<10} {fmt(r.mae_turbine):>12} {fmt(r.mae_farm):>12}" for r in self.rows]
        return "\n".join(lines)


# -- optimizer -------------------------------------------------------------------------------

class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        grads = {}
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for n, _ in self.params:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()


# -- training --------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_graphs: int = 16
    batch_turbines: int = 128
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    loss: str = "mse"
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_graphs < 1 or self.batch_turbines < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"loss must be 'mse' or 'mae', got {self.loss!r}")

    def batch_size(self, learner) -> int:
        return self.batch_turbines if learner.level == "turbine" else self.batch_graphs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int = 0
    steps: int = 0
    initial_val: float | None = None
    best_val: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    history: list[dict] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None
    stopped: str = ""

    def meta(self) -> dict:
        d = asdict(self)
        d.pop("best_params")
        return d


def param_arrays(model: Module) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def load_params(model: Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    for n, p in model.named_parameters():
        a = arrays[prefix + n]
        if a.shape != p.data.shape:
            raise ValueError(f"parameter {n}: checkpoint shape {a.shape} != model shape {p.data.shape}")
        p.data[...] = a


def run_epoch(learner, items: list, cfg: TrainConfig, opt: Adam, epoch: int) -> float:
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(items))
    bs = cfg.batch_size(learner)
    total, count = 0.0, 0
    for k in range(0, len(order), bs):
        batch = [items[i] for i in order[k : k + bs]]
        learner.model.zero_grad()
        with Tape() as tape:
            loss = learner.batch_loss(batch, cfg.loss)
        tape.backward(loss)
        opt.step()
        total += loss.item() * len(batch)
        count += len(batch)
    return total / max(count, 1)


@dataclass
class TrainResult:
    state: TrainState
    optimizer: Adam
    last_params: dict[str, np.ndarray]


def train(
    learner,
    train_data: SplitData,
    val_data: SplitData,
    cfg: TrainConfig,
    state: TrainState | None = None,
    optimizer: Adam | None = None,
    epochs: int | None = None,
) -> TrainResult:
    """Adam on the training loss with early stopping on validation MAE.

    On return the model holds the best-validation parameters; the last-epoch
    parameters and optimizer state are kept in the result for resuming.
    ``epochs`` caps how many further epochs this call may run.
    """
    state = state or TrainState()
    opt = optimizer or Adam(list(learner.model.named_parameters()), cfg.lr)
    items = learner.items(train_data)
    if not items:
        raise ValueError("empty training split")
    if state.initial_val is None:
        state.initial_val = validation_score(_validation_row(learner, val_data))
        state.best_val = state.initial_val
        state.best_params = param_arrays(learner.model)
    budget = cfg.max_epochs if epochs is None else min(cfg.max_epochs, state.epoch + epochs)
    while state.epoch < budget and not state.stopped:
        state.epoch += 1
        train_loss = run_epoch(learner, items, cfg, opt, state.epoch)
        state.steps = opt.t
        row = _validation_row(learner, val_data)
        val = validation_score(row)
        state.history.append(
            {"epoch": state.epoch, "train_loss": train_loss, "val": val, "val_mae_turbine": row.mae_turbine, "val_mae_farm": row.mae_farm}
        )
        if not math.isfinite(val) or val > cfg.divergence_factor * state.initial_val:
            raise DivergenceError(
                f"{learner.kind}: validation MAE {val:.4g} at epoch {state.epoch} exceeds "
                f"{cfg.divergence_factor}x the initial {state.initial_val:.4g}"
            )
        if val < state.best_val:
            state.best_val, state.best_epoch, state.bad_epochs = val, state.epoch, 0
            state.best_params = param_arrays(learner.model)
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= cfg.patience:
                state.stopped = "early-stop"
        log.info("%s epoch %d loss %.6g val %.6g", learner.kind, state.epoch, train_loss, val)
    if not state.stopped and state.epoch >= cfg.max_epochs:
        state.stopped = "max-epochs"
    last = param_arrays(learner.model)
    load_params(learner.model, state.best_params)
    return TrainResult(state, opt, last)


def overfit(learner, data: SplitData, lr: float = 1e-3, steps: int = 2000, tol: float = 1e-3) -> tuple[float, int]:
    """Full-batch Adam on a tiny split; returns (best train MAE, steps used)."""
    items = learner.items(data)
    opt = Adam(list(learner.model.named_parameters()), lr)
    targets = _item_targets(learner, items)
    best = math.inf
    for step in range(1, steps + 1):
        learner.model.zero_grad()
        with Tape() as tape:
            loss = learner.batch_loss(items)
        tape.backward(loss)
        opt.step()
        if step % 25 == 0 or step == steps:
            best = min(best, _train_mae(learner, items, targets))
            if best < tol:
                return best, step
    return best, steps


def _item_targets(learner, items) -> np.ndarray:
    if isinstance(learner, GraphLearner):
        return np.concatenate([np.concatenate([g.node_targets for g in items]), [g.global_target for g in items]])
    return np.array([i.target for i in items])


def _train_mae(learner, items, targets) -> float:
    if isinstance(learner, GraphLearner):
        p = learner.model.predict(items)
        return mae(np.concatenate([p.node, p.glob]), targets)
    return mae(learner.model(items).data[:, 0], targets)


# -- checkpoints -----------------------------------------------------------------------------

CHECKPOINT_NAME = "model"


def model_meta(kind: str, model: Module) -> dict:
    cfg = model.config()
    meta = {"kind": kind, "model_config": cfg, "seed": cfg.get("seed", 0)}
    if kind in GRAPH_KINDS:
        meta["flags"] = [{s: b["{}_attn".format(s)] for s in SITES} for b in cfg["blocks"]]
        meta["widths"] = [b["node_widths"] for b in cfg["blocks"]]
    else:
        meta["widths"] = cfg.get("widths", cfg.get("head_widths"))
    meta["max_neighbors"] = cfg.get("max_neighbors")
    return meta


def save_checkpoint(
    out_dir: str | Path,
    learner,
    result: TrainResult | None = None,
    train_cfg: TrainConfig | None = None,
    extra: dict | None = None,
) -> Path:
    """Best parameters under ``param.``; last-epoch parameters and Adam moments under ``resume.``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"param.{n}": a for n, a in param_arrays(learner.model).items()}
    meta = model_meta(learner.kind, learner.model)
    meta["stats"] = learner.stats.to_dict()
    if result is not None:
        arrays.update({f"resume.param.{n}": a for n, a in result.last_params.items()})
        arrays.update({f"resume.{k}": a for k, a in result.optimizer.state_arrays().items()})
        meta["train_state"] = result.state.meta()
        meta["adam_t"] = result.optimizer.t
    if train_cfg is not None:
        meta["train_config"] = train_cfg.to_dict()
    meta.update(extra or {})
    save_arrays(out / CHECKPOINT_NAME, arrays, meta)
    return out


@dataclass
class Checkpoint:
    learner: object
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    def resume(self) -> tuple[TrainState, Adam, TrainConfig]:
        """Rewind the model to its last-epoch parameters and rebuild the optimizer."""
        if "train_state" not in self.meta:
            raise ValueError("checkpoint has no training state to resume from")
        cfg = TrainConfig.from_dict(self.meta["train_config"])
        st = TrainState(**self.meta["train_state"])
        st.best_params = {k[len("param."):]: a for k, a in self.arrays.items() if k.startswith("param.")}
        st.stopped = ""
        load_params(self.learner.model, self.arrays, "resume.param.")
        opt = Adam(list(self.learner.model.named_parameters()), cfg.lr)
        opt.load_state_arrays({k[len("resume."):]: a for k, a in self.arrays.items() if k.startswith("resume.adam.")}, self.meta["adam_t"])
        return st, opt, cfg


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    prefix = path / CHECKPOINT_NAME if path.is_dir() else path.with_suffix("")
    arrays, meta = load_arrays(prefix)
    model = build_model(meta["kind"], config=meta["model_config"])
    load_params(model, arrays, "param.")
    learner = make_learner(meta["kind"], model, NormStats.from_dict(meta["stats"]))
    return Checkpoint(learner, meta, arrays)


# -- attention ---------------------------------------------------------------------------------

@dataclass
class AttentionOverlay:
    """Attention weights with the geometry needed to draw them."""

    weights: AttentionWeights
    positions: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    theta: float | None
    scenario_id: int | None

    def arrows(self, site: str, head: int) -> list[dict]:
        """One entry per weight: the attended element drawn as an arrow or a node."""
        w = self.weights.weights[site][head]
        s_idx, r_idx = self.weights.senders[site], self.weights.receivers[site]
        out = []
        for s, r, a in zip(s_idx.tolist(), r_idx.tolist(), w.tolist()):
            if site == "edge":
                item = {
                    "source_edge": [int(self.senders[s]), int(self.receivers[s])],
                    "target_edge": [int(self.senders[r]), int(self.receivers[r])],
                }
            elif site == "e2v":
                item = {"source_edge": [int(self.senders[s]), int(self.receivers[s])], "target": r}
            elif site == "node":
                item = {"source": s, "target": r}
            elif site == "e2u":
                item = {"source_edge": [int(self.senders[s]), int(self.receivers[s])]}
            else:
                item = {"source": s}
            item["weight"] = a
            out.append(item)
        return out

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "theta": self.theta,
            "positions": self.positions.tolist(),
            "edges": [[int(s), int(r)] for s, r in zip(self.senders, self.receivers)],
            "weights": self.weights.to_dict(),
            "overlay": {
                site: {f"head{h}": self.arrows(site, h) for h in range(len(self.weights.weights[site]))}
                for site in self.weights.sites
            },
        }


def extract_attention(model: Module, graph: WindGraph) -> AttentionOverlay:
    if not isinstance(model, GraphNetwork) or not model.has_attention:
        raise NoAttentionError("model has no attention sites enabled")
    rec = model.attention(graph)
    pos = graph.positions if graph.positions is not None else np.zeros((graph.n_nodes, 2))
    return AttentionOverlay(rec, pos, graph.senders, graph.receivers, graph.theta, graph.scenario_id)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
