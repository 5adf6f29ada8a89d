"""Experiment configs, cell expansion, idempotent execution and sweeps.

A config names a backbone, a task registry, partitions, methods and the
upstream/downstream settings.  It expands into *cells*, one per
(method, partition, sweep value); each cell is hashed over its canonical
content and written to its own directory, so re-runs skip finished cells.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

from .backbone import FrozenBackbone, init_backbone
from .evaluation import METRIC_BY_FAMILY
from .metalearn import METHODS, MetaConfig
from .fileio import atomic_write
from .pipeline import DOWNSTREAM_ONLY, EvalReport, PipelineConfig, canonical_hash, run_pipeline
from .prompting import PromptEmbeddings, PTConfig, init_prompt_from_vocab, prompt_tune
from .taskgen import FAMILIES, MIN_POOL, Partition, generate_task, load_tasks, make_partition, sample_fewshot

ALL_METHODS = METHODS + DOWNSTREAM_ONLY
SWEEP_AXES = ("source_shots", "target_shots", "source_count", "hyperparams")
DEFAULT_SHOTS = (16, 32, 64, 128, "all")
# upstream search grids of the hyperparameter axis, by method
HYPER_GRIDS = {
    "maml": {"inner_lr": [2e-5, 3e-5, 5e-5], "outer_lr": [2e-1, 3e-1, 5e-1],
             "total_steps": [2500, 5000, 10000]},
    "fomaml": {"inner_lr": [2e-5, 3e-5, 5e-5], "outer_lr": [2e-1, 3e-1, 5e-1],
               "total_steps": [2500, 5000, 10000]},
    "reptile": {"inner_lr": [2e-5, 3e-5, 5e-5], "outer_lr": [2e-1, 3e-1, 5e-1],
                "total_steps": [2500, 5000, 10000], "inner_steps": [2, 4, 6, 8, 10]},
    "mtl": {"mtl_lr": [2e-1, 3e-1, 5e-1], "mtl_batch_size": [2, 4, 6, 8],
            "mtl_epochs": [5, 10, 20]},
}
OUT_ENV = "METAPROMPT_OUT"


class ConfigError(ValueError):
    """The experiment config is malformed or refers to missing things."""


def _take(rec: dict, allowed, where: str) -> dict:
    unknown = set(rec) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return rec


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


@dataclass
class ExperimentConfig:
    name: str
    backbone: dict
    tasks: dict
    partitions: list
    methods: list
    meta: dict = field(default_factory=dict)
    meta_by_method: dict = field(default_factory=dict)
    pt: dict = field(default_factory=dict)
    ft: dict = field(default_factory=dict)
    prompt_len: int = 16
    prompt_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    source_shots: int | str = 16
    target_shots: int | str = 16
    split_seed: int = 0
    sweep: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    output_dir: str = "runs"
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_dict(cls, rec: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(rec, dict):
            raise ConfigError("config must be a JSON object")
        _take(rec, [n for n in _names(cls) if n != "base_dir"], "config")
        for key in ("name", "backbone", "tasks", "partitions", "methods"):
            if key not in rec:
                raise ConfigError(f"config: missing required key {key!r}")
        cfg = cls(**rec, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            rec = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(rec, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())

    def validate(self) -> None:
        _take(self.backbone, ["d", "L", "V", "seed", "max_len", "style", "head_scale",
                              "sharpness", "pool_focus", "noise", "n_heads"], "backbone")
        for key in ("d", "L", "V", "seed"):
            if key not in self.backbone:
                raise ConfigError(f"backbone: missing {key!r}")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {ALL_METHODS}, got {bad}")
        _take(self.meta, [n for n in _names(MetaConfig) if n != "method"], "meta")
        for m, over in self.meta_by_method.items():
            if m not in METHODS:
                raise ConfigError(f"meta_by_method: unknown method {m!r}")
            _take(over, [n for n in _names(MetaConfig) if n != "method"], f"meta_by_method.{m}")
        _take(self.pt, _names(PTConfig), "pt")
        _take(self.ft, _names(PTConfig), "ft")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        _take(self.sweep, SWEEP_AXES, "sweep")
        if not self.partitions:
            raise ConfigError("at least one partition is required")
        try:
            for m in self.methods:
                self.pipeline_config(m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid settings: {exc}") from None

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def meta_config(self, method: str, overrides: dict | None = None) -> MetaConfig | None:
        if method in DOWNSTREAM_ONLY:
            return None
        kw = dict(self.meta, **self.meta_by_method.get(method, {}), **(overrides or {}))
        return MetaConfig(method=method, **kw)

    def pt_config(self, rec: dict) -> PTConfig:
        rec = dict(rec)
        if "lr_search_grid" in rec:
            rec["lr_search_grid"] = tuple(rec["lr_search_grid"])
        return PTConfig(**rec)

    def pipeline_config(self, method: str, overrides: dict | None = None, **changes) -> PipelineConfig:
        return PipelineConfig(method, self.meta_config(method, overrides), self.pt_config(self.pt),
                              self.pt_config(self.ft) if self.ft else None,
                              changes.get("prompt_len", self.prompt_len),
                              changes.get("prompt_seed", self.prompt_seed),
                              changes.get("source_shots", self.source_shots),
                              changes.get("target_shots", self.target_shots),
                              self.split_seed)


def build_backbone(spec: dict) -> FrozenBackbone:
    spec = dict(spec)
    return init_backbone(spec.pop("d"), spec.pop("L"), spec.pop("V"), spec.pop("seed"), **spec)


def build_registry(cfg: ExperimentConfig, vocab=None) -> dict:
    """Tasks from generator groups and/or a JSONL file; ids must be unique."""
    spec = _take(dict(cfg.tasks), ["family_seed", "groups", "file"], "tasks")
    registry = {}

    def add(task):
        if task.id in registry:
            raise ConfigError(f"tasks: duplicate task id {task.id!r}")
        registry[task.id] = task

    if "file" in spec:
        path = cfg.resolve(spec["file"])
        if not path.is_file():
            raise ConfigError(f"tasks file not found: {path}")
        for task in load_tasks(path):
            add(task)
    family_seed = int(spec.get("family_seed", 0))
    for i, group in enumerate(spec.get("groups", [])):
        _take(group, ["family", "seeds", "params", "family_seed", "pool_size"], f"tasks.groups[{i}]")
        if group.get("family") not in FAMILIES:
            raise ConfigError(f"tasks.groups[{i}]: family must be one of {FAMILIES}")
        for s in group.get("seeds", []):
            try:
                add(generate_task(group["family"], group.get("params"), seed=int(s),
                                  family_seed=int(group.get("family_seed", family_seed)),
                                  vocab=vocab, pool_size=int(group.get("pool_size", MIN_POOL))))
            except ValueError as exc:
                raise ConfigError(f"tasks.groups[{i}]: {exc}") from None
    if not registry:
        raise ConfigError("tasks: the registry is empty")
    return registry


def build_partitions(cfg: ExperimentConfig, registry: dict) -> list[Partition]:
    parts = []
    for spec in cfg.partitions:
        try:
            parts.append(make_partition(spec, registry))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    names = [p.name for p in parts]
    if len(set(names)) != len(names):
        raise ConfigError(f"partition names must be unique: {names}")
    return parts


@dataclass
class Cell:
    label: str
    method: str
    partition: Partition
    pipeline: PipelineConfig
    seeds: list
    axis: str = ""
    value: object = None

    def key(self, cfg: ExperimentConfig, registry: dict) -> str:
        """Hash of everything the cell's results depend on."""
        involved = sorted(set(self.partition.source) | set(self.partition.target))
        return canonical_hash({
            "backbone": cfg.backbone,
            "tasks": {t: registry[t].pool_hash() for t in involved},
            "partition": self.partition.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "seeds": list(self.seeds),
        })


def _slug(value) -> str:
    if isinstance(value, dict):
        return "-".join(f"{k}={value[k]}" for k in sorted(value))
    return str(value)


def expand_cells(cfg: ExperimentConfig, registry: dict, seeds=None, axis: str | None = None) -> list[Cell]:
    """Base cells (``axis=None``) or one cell per value of a sweep axis."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    parts = build_partitions(cfg, registry)
    cells = []
    for part, method in itertools.product(parts, cfg.methods):
        if axis is None:
            cells.append(Cell(f"{part.name}__{method}", method, part,
                              cfg.pipeline_config(method), seeds))
            continue
        for value, (p, pc) in _axis_values(cfg, axis, part, method):
            cells.append(Cell(f"{part.name}__{method}__{axis}={_slug(value)}", method, p, pc,
                              seeds, axis, value))
    return cells


def _axis_values(cfg: ExperimentConfig, axis: str, part: Partition, method: str):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = cfg.sweep.get(axis)
    if axis in ("source_shots", "target_shots"):
        for v in values or DEFAULT_SHOTS:
            if v != "all" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"sweep.{axis}: shots must be positive ints or 'all'")
            yield v, (part, cfg.pipeline_config(method, **{axis: v}))
    elif axis == "source_count":
        if not values:
            raise ConfigError("sweep.source_count needs a list of counts")
        for n in values:
            if not 1 <= int(n) <= len(part.source):
                raise ConfigError(f"sweep.source_count: {n} exceeds the {len(part.source)} "
                                  f"sources of partition {part.name!r}")
            # nested prefixes, so larger counts strictly add tasks
            sub = Partition(part.name, part.source[:int(n)], part.target)
            yield int(n), (sub, cfg.pipeline_config(method))
    else:
        if method in DOWNSTREAM_ONLY:
            yield "default", (part, cfg.pipeline_config(method))
            return
        grid = (values or {}).get(method, HYPER_GRIDS[method])
        keys = sorted(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            over = dict(zip(keys, combo))
            try:
                pc = cfg.pipeline_config(method, over)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"sweep.hyperparams.{method}: {exc}") from None
            yield over, (part, pc)


def output_root(cfg: ExperimentConfig | None, out: str | None = None) -> Path:
    """``--out`` beats ``$METAPROMPT_OUT``, which beats the config's output_dir."""
    if out:
        return Path(out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg is not None:
        return cfg.resolve(cfg.output_dir)
    return Path("runs")


def cell_dir(root: Path, cfg: ExperimentConfig, cell: Cell, key: str) -> Path:
    return root / cfg.name / "cells" / f"{cell.label}-{key}"


def is_complete(path: Path) -> bool:
    report = path / "report.json"
    if not report.is_file():
        return False
    try:
        return json.loads(report.read_text()).get("status") == "complete"
    except json.JSONDecodeError:
        return False


class ProgressLog:
    """Append-only progress log shared by all cells of an experiment."""

    def __init__(self, path: Path, echo=None):
        self.path = path
        self.echo = echo
        path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, message: str) -> None:
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        with open(self.path, "a") as fh:
            fh.write(f"{stamp} {message}\n")
        if self.echo:
            self.echo(message)


_WORKER_STATE = {}


def _worker_context(cfg_dict, base_dir):
    key = canonical_hash(cfg_dict)
    if key not in _WORKER_STATE:
        cfg = ExperimentConfig.from_dict(cfg_dict, base_dir)
        backbone = build_backbone(cfg.backbone)
        _WORKER_STATE.clear()
        _WORKER_STATE[key] = (cfg, backbone, build_registry(cfg, backbone.vocab), {})
    return _WORKER_STATE[key]


def _run_cell(cfg_dict, base_dir, label, seeds, axis, out_path, log_path):
    cfg, backbone, registry, cache = _worker_context(cfg_dict, base_dir)
    cells = {c.label: c for c in expand_cells(cfg, registry, seeds, axis)}
    cell = cells[label]
    key = cell.key(cfg, registry)
    report = run_pipeline(backbone, registry, cell.partition, cell.pipeline, cell.seeds,
                          config_hash=key, baseline_cache=cache, out_dir=out_path,
                          log=ProgressLog(Path(log_path)))
    return report.to_dict()


@dataclass
class RunSummary:
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    root: Path | None = None


def run_cells(cfg: ExperimentConfig, root: Path, seeds=None, axis=None, force=False, jobs=1,
              echo=print) -> RunSummary:
    """Execute every cell not already complete; failures keep their partial reports."""
    backbone = build_backbone(cfg.backbone)
    registry = build_registry(cfg, backbone.vocab)
    cells = expand_cells(cfg, registry, seeds, axis)
    exp_root = root / cfg.name
    log = ProgressLog(exp_root / "progress.log", echo)
    summary = RunSummary(root=exp_root)
    todo = []
    for cell in cells:
        key = cell.key(cfg, registry)
        path = cell_dir(root, cfg, cell, key)
        if is_complete(path) and not force:
            summary.skipped.append(cell.label)
        else:
            todo.append((cell, key, path))
    if summary.skipped:
        log(f"skipped {len(summary.skipped)} completed cells")
    args = [(cfg.to_dict(), cfg.base_dir, c.label, list(c.seeds), axis, str(p),
             str(exp_root / "progress.log")) for c, _, p in todo]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, *a) for a in args]
            outcomes = [_outcome(f.result) for f in futures]
    else:
        outcomes = [_outcome(lambda a=a: _run_cell(*a)) for a in args]
    for (cell, key, path), (ok, detail) in zip(todo, outcomes):
        if ok:
            summary.ran.append(cell.label)
            log(f"{cell.label}: ARG={_fmt(detail.get('arg'))} ({detail.get('status')})")
        else:
            summary.failed.append(cell.label)
            log(f"{cell.label}: FAILED {detail}")
    for cell in cells:
        key = cell.key(cfg, registry)
        path = cell_dir(root, cfg, cell, key)
        if (path / "report.json").is_file():
            rep = EvalReport.load(path / "report.json")
            summary.rows.append({"cell": cell.label, "partition": cell.partition.name,
                                 "method": cell.method, "axis": cell.axis or "",
                                 "value": _slug(cell.value) if cell.axis else "",
                                 "arg": rep.arg, "status": rep.status, "config_hash": key,
                                 "report": str(path / "report.json")})
    return summary


def _outcome(call):
    try:
        return True, call()
    except Exception as exc:
        return False, f"{type(exc).__name__}: {exc}"


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:+.2f}%"


def write_summary_csv(rows: list, path: Path) -> None:
    header = ["cell", "partition", "method", "axis", "value", "arg", "status", "config_hash"]
    lines = [",".join(header)]
    for r in rows:
        arg = "" if r["arg"] is None else repr(float(r["arg"]))
        lines.append(",".join([r["cell"], r["partition"], r["method"], r["axis"],
                               f'"{r["value"]}"' if "," in str(r["value"]) else str(r["value"]),
                               arg, r["status"], r["config_hash"]]))
    atomic_write(path, "\n".join(lines) + "\n")


SIMILARITY_KEYS = ("tasks", "steps", "learning_rate", "energy_threshold", "seed", "shots")


def similarity_settings(cfg: ExperimentConfig) -> dict:
    spec = _take(dict(cfg.similarity), SIMILARITY_KEYS, "similarity")
    return {"tasks": spec.get("tasks"), "steps": int(spec.get("steps", 300)),
            "learning_rate": float(spec.get("learning_rate", 0.5)),
            "energy_threshold": float(spec.get("energy_threshold", 0.95)),
            "seed": int(spec.get("seed", 0)), "shots": spec.get("shots", cfg.target_shots)}


def tune_task_prompts(backbone, registry: dict, task_ids, prompt_len: int, prompt_seed: int,
                      steps: int, learning_rate: float, seed: int = 0, shots=16,
                      config_hash: str = "") -> dict:
    """One prompt per task, all tuned from the same vocab init so they are comparable."""
    init = init_prompt_from_vocab(backbone, prompt_len, prompt_seed)
    pt = PTConfig(learning_rate, 8, steps, max(1, steps // 4), (learning_rate,))
    prompts = {}
    for tid in task_ids:
        task = registry[tid]
        splits = sample_fewshot(task, "downstream", seed, shots)
        tuned, _ = prompt_tune(backbone, init, splits, pt, seed, METRIC_BY_FAMILY[task.family])
        prompts[tid] = PromptEmbeddings(tuned.matrix, tuned.origin,
                                        dict(tuned.meta, task_id=tid, family=task.family,
                                             producing_config_hash=config_hash))
    return prompts


def family_summary(rows, family_of: dict) -> dict:
    """Mean correlation over distinct same-family and cross-family pairs."""
    same, cross = [], []
    for a, b, s in rows:
        if a < b:
            (same if family_of[a] == family_of[b] else cross).append(s)
    return {"same_mean": math.fsum(same) / len(same) if same else None, "same_pairs": len(same),
            "cross_mean": math.fsum(cross) / len(cross) if cross else None,
            "cross_pairs": len(cross)}
