"""Soft prompts and the downstream learners: prompt tuning and full fine-tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError, Tape, Tensor, grad
from .backbone import FrozenBackbone, encode_batch, nll_loss
from .evaluation import score_task
from .fileio import atomic_write

log = logging.getLogger(__name__)

PT_LR_GRID = (5e-1, 4e-1, 3e-1, 2e-1)
FT_LR_GRID = (5e-4, 3e-4, 2e-4, 1e-4)
ORIGINS = ("vocab_init", "meta_learned", "loaded")


@dataclass
class PromptEmbeddings:
    matrix: np.ndarray
    origin: str = "vocab_init"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError("prompt matrix must be (prompt_len >= 1, d)")
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteError("prompt contains non-finite entries")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")

    @property
    def prompt_len(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def to_dict(self) -> dict:
        return {"prompt_len": self.prompt_len, "d": self.d, "origin": self.origin,
                "meta": self.meta, "rows": self.matrix.tolist()}

    def save(self, path) -> None:
        atomic_write(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PromptEmbeddings":
        rec = json.loads(Path(path).read_text())
        matrix = np.array(rec["rows"], dtype=np.float64).reshape(rec["prompt_len"], rec["d"])
        return cls(matrix, "loaded", dict(rec.get("meta", {}), source_origin=rec["origin"]))


@dataclass(frozen=True)
class PTConfig:
    learning_rate: float = 0.3
    batch_size: int = 8
    total_steps: int = 3000
    eval_interval: int = 50
    lr_search_grid: tuple = PT_LR_GRID
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("PTConfig values must be positive")
        if self.eval_interval < 1 or (self.total_steps and self.eval_interval > self.total_steps):
            raise ValueError("eval_interval must be in [1, total_steps]")
        if not self.lr_search_grid or min(self.lr_search_grid) <= 0:
            raise ValueError("lr_search_grid must hold positive rates")

    def with_lr(self, lr: float) -> "PTConfig":
        return PTConfig(lr, self.batch_size, self.total_steps, self.eval_interval,
                        self.lr_search_grid, self.momentum)


@dataclass
class TuneTrace:
    """Evaluation-point records ``(step, train_loss, val_score, snapshot_id)``."""

    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    learning_rate: float = 0.0

    @property
    def best_step(self) -> int:
        return select_best(self.records)[0]

    def best_snapshot(self):
        return self.snapshots[select_best(self.records)[3]]


def select_best(records) -> tuple:
    """Record with the highest val score; the earliest one wins ties."""
    if not records:
        raise ValueError("empty trace")
    best = records[0]
    for rec in records[1:]:
        if rec[2] > best[2]:
            best = rec
    return best


def init_prompt_from_vocab(backbone: FrozenBackbone, prompt_len: int, seed: int) -> PromptEmbeddings:
    """Rows copied from distinct token embeddings chosen uniformly at random."""
    V = backbone.V
    if prompt_len < 1 or prompt_len > V:
        raise ValueError(f"prompt_len must be in [1, V={V}], got {prompt_len}")
    rows = np.random.default_rng(seed).choice(V, size=prompt_len, replace=False)
    return PromptEmbeddings(np.array(backbone.token_embeddings[rows]), "vocab_init",
                            {"vocab_rows": rows.tolist()})


class _BatchStream:
    """Epoch-shuffled mini-batches over a fixed list of indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("empty split")
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order, self._pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order, self._pos = self.rng.permutation(self.n), 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def _require_downstream(splits):
    for name in ("train", "val"):
        if name not in splits.pairs or not splits.pairs[name]:
            raise ValueError(f"split {name!r} is missing or empty")


def prompt_tune(backbone: FrozenBackbone, init: PromptEmbeddings, splits, cfg: PTConfig,
                seed: int, metric: str = "accuracy"):
    """SGD on the prompt only; returns the best-on-validation snapshot and its trace."""
    _require_downstream(splits)
    train = encode_batch(backbone, splits["train"])
    val_pairs = splits["val"]
    rng = np.random.default_rng(seed)
    stream = _BatchStream(len(train), cfg.batch_size, rng)
    phi = np.array(init.matrix)
    velocity = np.zeros_like(phi)
    trace = TuneTrace(learning_rate=cfg.learning_rate)

    def checkpoint(step):
        loss = nll_loss(backbone, phi, train).item()
        val = score_task(backbone, phi, val_pairs, metric).value
        sid = len(trace.snapshots)
        trace.snapshots[sid] = phi.copy()
        trace.records.append((step, loss, val, sid))

    checkpoint(0)
    for step in range(1, cfg.total_steps + 1):
        tape = Tape()
        p = tape.watch(phi)
        loss = nll_loss(backbone, p, train.rows(stream.next()))
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"non-finite prompt-tuning loss at step {step}")
        (g,) = grad(loss, [p])
        if cfg.momentum:
            velocity = cfg.momentum * velocity + g.data
            phi = phi - cfg.learning_rate * velocity
        else:
            phi = phi - cfg.learning_rate * g.data
        if step % cfg.eval_interval == 0:
            checkpoint(step)
    best = trace.best_snapshot()
    meta = dict(init.meta, tuned_lr=cfg.learning_rate, best_step=trace.best_step)
    return PromptEmbeddings(best, init.origin, meta), trace


def prompt_tune_search(backbone, init, splits, cfg: PTConfig, seed: int, metric="accuracy"):
    """Run :func:`prompt_tune` for each grid rate and keep the best on validation."""
    best = None
    for lr in cfg.lr_search_grid:
        prompt, trace = prompt_tune(backbone, init, splits, cfg.with_lr(lr), seed, metric)
        val = select_best(trace.records)[2]
        if best is None or val > best[0]:
            best = (val, prompt, trace)
    return best[1], best[2]


def fine_tune(backbone: FrozenBackbone, splits, cfg: PTConfig, seed: int,
              metric: str = "accuracy"):
    """Tune every backbone parameter (no prompt) on a copy; the original is untouched."""
    _require_downstream(splits)
    train = encode_batch(backbone, splits["train"])
    val_pairs = splits["val"]
    rng = np.random.default_rng(seed)
    stream = _BatchStream(len(train), cfg.batch_size, rng)
    names = sorted(backbone.params)
    theta = {k: np.array(backbone.params[k]) for k in names}
    trace = TuneTrace(learning_rate=cfg.learning_rate)

    def checkpoint(step):
        consts = {k: Tensor(v) for k, v in theta.items()}
        loss = nll_loss(backbone, None, train, params=consts).item()
        val = score_task(backbone, None, val_pairs, metric, params=consts).value
        sid = len(trace.snapshots)
        trace.snapshots[sid] = {k: v.copy() for k, v in theta.items()}
        trace.records.append((step, loss, val, sid))

    checkpoint(0)
    for step in range(1, cfg.total_steps + 1):
        tape = Tape()
        tracked = {k: tape.watch(theta[k]) for k in names}
        loss = nll_loss(backbone, None, train.rows(stream.next()), params=tracked)
        grads = grad(loss, [tracked[k] for k in names])
        for k, g in zip(names, grads):
            theta[k] = theta[k] - cfg.learning_rate * g.data
        if step % cfg.eval_interval == 0:
            checkpoint(step)
    return backbone.with_params(trace.best_snapshot()), trace


def train_loss(backbone, prompt, pairs, params=None) -> float:
    """Mean per-token NLL over ``pairs`` (no gradient)."""
    matrix = None if prompt is None else getattr(prompt, "matrix", prompt)
    return nll_loss(backbone, matrix, encode_batch(backbone, pairs), params=params).item()
