"""Command line: simulate data, train models, compare them, export attention.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click

from . import __version__
from .experiment import inline_attention_check, neighbor_capacity
from .gnn import NoAttentionError
from .graphs import build_graph
from .svg import attention_svg, pick_target
from .train import (
    GRAPH_KINDS,
    MODEL_KINDS,
    TABLE_NAMES,
    EvalReport,
    EvalRow,
    NumericError,
    TrainConfig,
    build_model,
    evaluate,
    extract_attention,
    load_checkpoint,
    make_learner,
    prepare,
    save_checkpoint,
    timed,
    train,
)
from .wakesim import NormStats, SimConfig, normalize_and_split, read_jsonl, select_splits, simulate_dataset, write_jsonl

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
DATASET_FILE, STATS_FILE, SPLITS_FILE, MANIFEST_FILE = "dataset.jsonl", "normstats.json", "splits.json", "manifest.json"


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class NumericFailure(click.ClickException):
    exit_code = EXIT_NUMERIC


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunManifest:
    """What produced an artifact.  ``hash`` covers the inputs, not where outputs went."""

    command: str
    config: dict
    seed: int
    dataset: str | None = None
    dataset_sha256: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    version: str = __version__

    @property
    def hash(self) -> str:
        return canonical_hash({"command": self.command, "config": self.config, "seed": self.seed,
                               "dataset_sha256": self.dataset_sha256, "version": self.version})

    def to_dict(self) -> dict:
        return {**asdict(self), "hash": self.hash}

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def write_json(path: Path, obj, manifest: RunManifest) -> None:
    path.write_text(json.dumps({**obj, "manifest_hash": manifest.hash}, indent=1, sort_keys=True) + "\n")


def read_config(path: str | None, section: str) -> dict:
    """A TOML file (JSON if it does not parse as TOML); keys may sit under ``[section]``."""
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise click.UsageError(f"config {path} is neither TOML nor JSON: {exc}")
    if section in data:
        return dict(data[section])
    # a flat file is a simulation config
    return {k: v for k, v in data.items() if k != "training"} if section == "simulation" else {}


# -- dataset directory -------------------------------------------------------------------------

@dataclass
class DatasetDir:
    root: Path
    cfg: SimConfig
    records: list
    splits: dict[str, list[int]]
    stats: NormStats

    @classmethod
    def load(cls, root: str | Path) -> "DatasetDir":
        root = Path(root)
        try:
            manifest = json.loads((root / MANIFEST_FILE).read_text())
            cfg = SimConfig.from_dict(manifest["config"])
            records = read_jsonl(root / DATASET_FILE, cfg.turbine)
            splits = json.loads((root / SPLITS_FILE).read_text())
            stats = NormStats.from_dict(json.loads((root / STATS_FILE).read_text())["stats"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read dataset in {root}: {exc}")
        return cls(root, cfg, records, splits, stats)

    def split(self, name: str):
        return getattr(select_splits(self.records, self.splits), name)

    def prepared(self, name: str):
        return prepare(self.split(name), self.stats)

    def scenario(self, scenario_id: int):
        for sc, rec in self.records:
            if sc.id == scenario_id:
                return sc, rec
        raise DataError(f"scenario {scenario_id} not in dataset {self.root}")


# -- commands ---------------------------------------------------------------------------------

@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Attention graph networks for wind-farm power prediction."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML or JSON simulation config.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def simulate(config_path, seed, out):
    """Simulate a dataset, split it and fit scaling statistics on the train split."""
    raw = read_config(config_path, "simulation")
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = SimConfig.from_dict(raw)
    except KeyError as exc:
        raise click.UsageError(str(exc.args[0]))
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid simulation config: {exc}")
    records = simulate_dataset(cfg)
    train_r, val_r, test_r, stats = normalize_and_split(records, cfg.seed)
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, root / DATASET_FILE)
    manifest = RunManifest("simulate", cfg.to_dict(), cfg.seed, str(root / DATASET_FILE), sha256_file(root / DATASET_FILE))
    ids = {k: [rec.scenario_id for _, rec in part] for k, part in (("train", train_r), ("val", val_r), ("test", test_r))}
    write_json(root / SPLITS_FILE, ids, manifest)
    write_json(root / STATS_FILE, {"stats": stats.to_dict()}, manifest)
    manifest.write(root / MANIFEST_FILE)
    n_values = sum(len(rec.powers) for _, rec in records)
    click.echo(f"{len(records)} scenarios, {n_values} turbine power values")
    click.echo(f"split train/val/test = {len(train_r)}/{len(val_r)}/{len(test_r)}; wrote {root}")


@main.command("train")
@click.argument("kind", type=click.Choice(MODEL_KINDS))
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML/JSON with a [training] table.")
@click.option("--seed", type=int, default=0)
@click.option("--epochs", type=int, default=None, help="Maximum epochs (default 500).")
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in --out.")
def train_cmd(kind, dataset, out, config_path, seed, epochs, resume):
    """Train one model and write its checkpoint, history and timing."""
    ds = DatasetDir.load(dataset)
    out = Path(out)
    tr, va = ds.prepared("train"), ds.prepared("val")
    if resume:
        ck = load_checkpoint(out)
        if ck.kind != kind:
            raise click.UsageError(f"checkpoint in {out} is {ck.kind}, not {kind}")
        state, opt, tcfg = ck.resume()
        learner = ck.learner
        if epochs is not None:
            tcfg.max_epochs = epochs
    else:
        raw = {"seed": seed, **read_config(config_path, "training")}
        if epochs is not None:
            raw["max_epochs"] = epochs
        try:
            tcfg = TrainConfig.from_dict(raw)
        except KeyError as exc:
            raise click.UsageError(str(exc.args[0]))
        except (TypeError, ValueError) as exc:
            raise click.UsageError(f"invalid training config: {exc}")
        model = build_model(kind, seed=tcfg.seed, max_neighbors=neighbor_capacity(ds.cfg))
        learner, state, opt = make_learner(kind, model, ds.stats), None, None
    manifest = RunManifest(
        "train", {"kind": kind, "train": tcfg.to_dict()}, tcfg.seed, str(ds.root / DATASET_FILE), sha256_file(ds.root / DATASET_FILE)
    )
    try:
        result, secs = timed(train, learner, tr, va, tcfg, state, opt)
    except NumericError as exc:
        raise NumericFailure(str(exc))
    save_checkpoint(out, learner, result, tcfg, {"manifest_hash": manifest.hash})
    s = result.state
    write_json(out / "history.json", {"kind": kind, "best_epoch": s.best_epoch, "stopped": s.stopped, "history": s.history}, manifest)
    (out / "timing.json").write_text(json.dumps({"wall_seconds": secs, "epochs": s.epoch}) + "\n")
    manifest.checkpoints = [str(out)]
    manifest.write(out / MANIFEST_FILE)
    if kind in GRAPH_KINDS:
        flags = [k for k, v in learner.model.block_configs[0].flags.items() if v]
        click.echo(f"{TABLE_NAMES[kind]} first-block attention: {', '.join(flags) or 'none'}")
    click.echo(f"{TABLE_NAMES[kind]}: {s.epoch} epochs ({s.stopped}), best epoch {s.best_epoch}, val {s.best_val:.6f}")


@main.command()
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for metrics.csv and the report.")
@click.argument("checkpoints", nargs=-1, required=True)
def compare(dataset, out, checkpoints):
    """Evaluate checkpoints on the test split and print the comparison table."""
    ds = DatasetDir.load(dataset)
    test = ds.prepared("test")
    report, absent, inline = EvalReport(), [], {}
    rows: dict[str, EvalRow] = {}
    for path in checkpoints:
        try:
            ck = load_checkpoint(path)
        except (OSError, KeyError, ValueError):
            absent.append(path)
            continue
        row = evaluate(ck.learner, test)
        timing = Path(path) / "timing.json"
        if timing.exists():
            t = json.loads(timing.read_text())
            row.epochs, row.wall_seconds = t.get("epochs"), t.get("wall_seconds")
        rows[ck.kind] = row
        model = ck.learner.model
        if ck.kind in GRAPH_KINDS and model.block_configs[0].e2v_attn:
            inline[TABLE_NAMES[ck.kind]] = inline_attention_check(model, ds.stats)
    report.rows = [rows[k] for k in MODEL_KINDS if k in rows]
    click.echo(report.table())
    for path in absent:
        click.echo(f"absent: {path} (no readable checkpoint)")
    for name, res in inline.items():
        click.echo(
            f"{name} in-line check: nearest upstream sender dominant in {res['heads_favouring_nearest']}/{res['n_heads']} "
            f"E2V heads, mean weights {', '.join(f'{w:.3f}' for w in res['mean_weights'])} over senders {res['senders']}"
        )
    if out is not None:
        root = Path(out)
        root.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("compare", {"checkpoints": [str(c) for c in checkpoints]}, 0,
                               str(ds.root / DATASET_FILE), sha256_file(ds.root / DATASET_FILE), list(map(str, checkpoints)))
        (root / "metrics.csv").write_text(report.to_csv())
        write_json(root / "report.json", {"table": report.table(), "absent": absent, "inline_attention": inline}, manifest)
        manifest.write(root / MANIFEST_FILE)


@main.command("attn-export")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--scenario", type=int, required=True, help="Scenario id in the dataset.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--target", type=int, default=None, help="Target turbine (default: most upstream senders).")
def attn_export(checkpoint, dataset, scenario, out, target):
    """Write attention weights as JSON and per-head SVG panels."""
    ds = DatasetDir.load(dataset)
    try:
        ck = load_checkpoint(checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc}")
    sc, rec = ds.scenario(scenario)
    graph = build_graph(sc, rec, ck.learner.stats)
    try:
        overlay = extract_attention(ck.learner.model, graph)
    except NoAttentionError as exc:
        raise DataError(f"{TABLE_NAMES[ck.kind]} checkpoint: {exc}")
    manifest = RunManifest("attn-export", {"scenario": scenario, "target": target}, ck.meta.get("seed", 0),
                           str(ds.root / DATASET_FILE), sha256_file(ds.root / DATASET_FILE), [str(checkpoint)])
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    tgt = pick_target(overlay) if target is None else target
    svg, panels = attention_svg(overlay, tgt, note=f"manifest {manifest.hash}")
    (root / "attention.svg").write_text(svg)
    write_json(root / "attention.json", {"target": tgt, **overlay.to_dict()}, manifest)
    manifest.write(root / MANIFEST_FILE)
    click.echo(f"{panels} panels for scenario {scenario}, target turbine {tgt}; wrote {root}")


if __name__ == "__main__":
    main()
