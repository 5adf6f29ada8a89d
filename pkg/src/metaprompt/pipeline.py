"""Two-stage evaluation: upstream learning on sources, prompt tuning on targets.

Scores are averaged over seeds per task first; the relative gain of each
task is then taken between the two means.  The report records that order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .fileio import atomic_write
from .evaluation import METRIC_BY_FAMILY, RG_BASELINE_FLOOR, average_relative_gain, relative_gain, score_task
from .metalearn import MetaConfig, MetaResult, meta_train
from .prompting import FT_LR_GRID, PTConfig, fine_tune, init_prompt_from_vocab, prompt_tune_search
from .taskgen import Partition, sample_fewshot

AGGREGATION = "mean score over seeds per task, then relative gain of the means"
DOWNSTREAM_ONLY = ("pt", "ft")
VOLATILE_FIELDS = ("created_at", "wall_time")


def canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class TaskResult:
    task_id: str
    family: str
    metric: str
    method_scores: list
    baseline_scores: list
    method_mean: float
    baseline_mean: float
    relative_gain: float | None


@dataclass
class EvalReport:
    partition: str
    method: str
    seeds: list
    tasks: list = field(default_factory=list)
    arg: float | None = None
    excluded: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    status: str = "complete"
    config_hash: str = ""
    meta_config_hash: str = ""
    pt_config_hash: str = ""
    backbone_checksum: str = ""
    aggregation: str = AGGREGATION
    config: dict = field(default_factory=dict)
    created_at: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, rec: dict) -> "EvalReport":
        rec = dict(rec)
        rec["tasks"] = [TaskResult(**t) for t in rec.get("tasks", [])]
        return cls(**rec)

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def stable_dict(self) -> dict:
        """Report content without the fields that legitimately vary between runs."""
        rec = self.to_dict()
        for key in VOLATILE_FIELDS:
            rec.pop(key, None)
        return rec

    def save(self, json_path, csv_path=None) -> None:
        atomic_write(json_path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            atomic_write(csv_path, self.scores_csv())

    def scores_csv(self) -> str:
        """Flat per-seed scores: one row per (task, seed, method)."""
        lines = ["task_id,seed,method,score,config_hash"]
        for t in self.tasks:
            t = t if isinstance(t, TaskResult) else TaskResult(**t)
            groups = [(self.method, t.method_scores)]
            if self.method != "pt":
                groups.append(("pt", t.baseline_scores))
            for name, scores in groups:
                for seed, score in zip(self.seeds, scores):
                    lines.append(f"{t.task_id},{seed},{name},{score!r},{self.config_hash}")
        return "\n".join(lines) + "\n"


def mean(values) -> float:
    return math.fsum(values) / len(values)


def summarize(tasks: list, method: str) -> tuple[float | None, list]:
    """Fill per-task relative gains; return ``(arg, excluded_task_ids)``."""
    gains, excluded = [], []
    for t in tasks:
        rg = relative_gain(t.method_mean, t.baseline_mean)
        t.relative_gain = None if math.isnan(rg) else rg
        if t.relative_gain is None:
            excluded.append(t.task_id)
        gains.append(rg)
    if not gains or len(excluded) == len(gains):
        return None, excluded
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return average_relative_gain(gains), excluded


def arg_from_csv(path, method: str | None = None) -> float:
    """Recompute ARG from a persisted per-seed score CSV."""
    per = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per.setdefault(row["task_id"], {}).setdefault(row["method"], []).append(float(row["score"]))
    gains = []
    for task_id in per:
        methods = per[task_id]
        name = method or next((m for m in methods if m != "pt"), "pt")
        base = mean(methods["pt"])
        gains.append(relative_gain(mean(methods[name]), base))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return average_relative_gain(gains)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one (method, partition) evaluation depends on."""

    method: str
    meta: MetaConfig | None
    pt: PTConfig
    ft: PTConfig | None = None
    prompt_len: int = 16
    prompt_seed: int = 0
    source_shots: int | str = 16
    target_shots: int | str = 16
    split_seed: int = 0

    def to_dict(self) -> dict:
        rec = asdict(self)
        rec["pt"]["lr_search_grid"] = list(self.pt.lr_search_grid)
        if self.ft is not None:
            rec["ft"]["lr_search_grid"] = list(self.ft.lr_search_grid)
        return rec

    def ft_config(self) -> PTConfig:
        """Fine-tuning settings; without explicit ones, the PT schedule over the FT rate grid."""
        if self.ft is not None:
            return self.ft
        pt = self.pt
        return PTConfig(FT_LR_GRID[0], pt.batch_size, pt.total_steps, pt.eval_interval,
                        FT_LR_GRID, pt.momentum)

    def pt_hash(self) -> str:
        return canonical_hash({"pt": self.to_dict()["pt"], "prompt_len": self.prompt_len,
                               "prompt_seed": self.prompt_seed, "target_shots": self.target_shots})


def baseline_scores(backbone, registry, partition: Partition, cfg: PipelineConfig, seeds,
                    cache: dict | None = None) -> dict:
    """Vocab-initialized prompt tuning on each target; ``{task_id: [score per seed]}``."""
    key = (backbone.checksum, cfg.pt_hash(), tuple(partition.target), tuple(seeds))
    if cache is not None and key in cache:
        return cache[key]
    init = init_prompt_from_vocab(backbone, cfg.prompt_len, cfg.prompt_seed)
    out = {tid: _downstream(backbone, registry[tid], init, cfg, seeds) for tid in partition.target}
    if cache is not None:
        cache[key] = out
    return out


def _downstream(backbone, task, init, cfg: PipelineConfig, seeds, finetune=False) -> list:
    metric = METRIC_BY_FAMILY[task.family]
    scores = []
    for seed in seeds:
        splits = sample_fewshot(task, "downstream", seed, cfg.target_shots)
        if finetune:
            tuned, _ = _fine_tune_search(backbone, splits, cfg.ft_config(), seed, metric)
            value = score_task(tuned, None, splits["test"], metric).value
        else:
            prompt, _ = prompt_tune_search(backbone, init, splits, cfg.pt, seed, metric)
            value = score_task(backbone, prompt.matrix, splits["test"], metric).value
        scores.append(value)
    return scores


def _fine_tune_search(backbone, splits, cfg: PTConfig, seed, metric):
    best = None
    for lr in cfg.lr_search_grid:
        model, trace = fine_tune(backbone, splits, cfg.with_lr(lr), seed, metric)
        val = max(r[2] for r in trace.records)
        if best is None or val > best[0]:
            best = (val, model, trace)
    return best[1], best[2]


def upstream(backbone, registry, partition: Partition, cfg: PipelineConfig) -> MetaResult:
    if cfg.meta is None:
        raise ValueError(f"method {cfg.method!r} has no upstream stage")
    init = init_prompt_from_vocab(backbone, cfg.prompt_len, cfg.prompt_seed)
    sources = [registry[t] for t in partition.source]
    return meta_train(backbone, init, sources, cfg.meta, shots=cfg.source_shots,
                      split_seed=cfg.split_seed)


def run_pipeline(backbone, registry, partition: Partition, cfg: PipelineConfig, seeds,
                 config_hash: str = "", baseline_cache: dict | None = None,
                 out_dir=None, log=None) -> EvalReport:
    """Upstream learning then per-target, per-seed prompt tuning against the PT baseline.

    With ``out_dir`` the report (JSON + CSV) and the learned prompt are
    written there; a failure still writes a partial report marked
    ``status="failed"`` before the exception propagates.
    """
    start = time.perf_counter()
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    checksum_before = backbone.checksum
    report = EvalReport(partition.name, cfg.method, seeds, config_hash=config_hash,
                        meta_config_hash=cfg.meta.config_hash() if cfg.meta else "", pt_config_hash=cfg.pt_hash(),
                        backbone_checksum=checksum_before,
                        config={"pipeline": cfg.to_dict(), "partition": partition.to_dict()},
                        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    out = Path(out_dir) if out_dir is not None else None

    def persist():
        report.wall_time = round(time.perf_counter() - start, 3)
        if out is not None:
            report.save(out / "report.json", out / "scores.csv")

    try:
        base = baseline_scores(backbone, registry, partition, cfg, seeds, baseline_cache)
        init = init_prompt_from_vocab(backbone, cfg.prompt_len, cfg.prompt_seed)
        if cfg.method in DOWNSTREAM_ONLY:
            start_prompt = init
        else:
            result = upstream(backbone, registry, partition, cfg)
            start_prompt = result.phi_star
            start_prompt.meta["producing_config_hash"] = config_hash
            if out is not None:
                result.config["producing_config_hash"] = config_hash
                result.save(out / "prompt.json", out / "upstream.json")
            if log:
                log(f"{partition.name}/{cfg.method}: upstream done, final loss "
                    f"{result.loss_curve[-1][1] if result.loss_curve else float('nan'):.4f}")
        for tid in partition.target:
            task = registry[tid]
            try:
                if cfg.method == "pt":
                    scores = list(base[tid])
                else:
                    scores = _downstream(backbone, task, start_prompt, cfg, seeds,
                                         finetune=cfg.method == "ft")
            except Exception as exc:  # one target failing keeps the others
                report.failures.append({"task_id": tid, "error": f"{type(exc).__name__}: {exc}"})
                report.status = "partial"
                continue
            report.tasks.append(TaskResult(tid, task.family, METRIC_BY_FAMILY[task.family],
                                           scores, list(base[tid]), mean(scores),
                                           mean(base[tid]), None))
        report.arg, report.excluded = summarize(report.tasks, cfg.method)
        if report.excluded:
            warnings.warn(f"{len(report.excluded)} task(s) excluded from ARG: baseline below "
                          f"{RG_BASELINE_FLOOR}")
        if report.arg is None and report.status == "complete":
            report.status = "partial"
    except BaseException as exc:
        report.status = "failed"
        report.failures.append({"task_id": None, "error": f"{type(exc).__name__}: {exc}"})
        persist()
        raise
    if backbone.checksum != checksum_before or backbone.compute_checksum() != checksum_before:
        raise RuntimeError("backbone parameters changed during the pipeline")
    persist()
    return report
