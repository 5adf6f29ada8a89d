"""Upstream learners for the prompt initialization: MAML, FoMAML, Reptile and MTL.

All inner loops are plain SGD without state, so the MAML unroll is a pure
function of the prompt and the episode batches.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import NonFiniteError, Tape, grad
from .backbone import FrozenBackbone, TokenBatch, encode_batch, nll_loss
from .fileio import atomic_write
from .prompting import PromptEmbeddings
from .taskgen import sample_fewshot

METHODS = ("maml", "fomaml", "reptile", "mtl")
DEFAULT_INNER_STEPS = {"maml": 1, "fomaml": 1, "reptile": 10, "mtl": 1}
DEFAULT_INNER_BATCH = {"maml": 2, "fomaml": 4, "reptile": 4, "mtl": 4}


@dataclass(frozen=True)
class MetaConfig:
    method: str = "maml"
    inner_lr: float = 3e-5
    outer_lr: float = 5e-1
    total_steps: int = 5000
    inner_batch_size: int | None = None
    inner_steps: int | None = None
    reptile_interp: float | None = None
    mtl_epochs: int = 20
    mtl_batch_size: int = 4
    mtl_lr: float = 5e-1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.inner_batch_size is None:
            object.__setattr__(self, "inner_batch_size", DEFAULT_INNER_BATCH[self.method])
        if self.inner_steps is None:
            object.__setattr__(self, "inner_steps", DEFAULT_INNER_STEPS[self.method])
        if self.reptile_interp is None:
            # the interpolation rate reuses the outer learning-rate slot
            object.__setattr__(self, "reptile_interp", self.outer_lr)
        if self.inner_lr < 0 or self.outer_lr <= 0 or self.reptile_interp <= 0:
            raise ValueError("learning rates must be positive (inner_lr may be 0)")
        if self.inner_steps < 1 or self.inner_batch_size < 1 or self.total_steps < 0:
            raise ValueError("inner_steps and inner_batch_size must be >= 1")
        if self.mtl_epochs < 0 or self.mtl_batch_size < 1 or self.mtl_lr < 0:
            raise ValueError("invalid multi-task settings")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetaResult:
    phi_star: PromptEmbeddings
    loss_curve: list
    config_hash: str
    wall_time: float = 0.0
    backbone_checksum: str = ""
    config: dict = field(default_factory=dict)

    def save(self, prompt_path, sidecar_path) -> None:
        self.phi_star.save(prompt_path)
        atomic_write(sidecar_path, json.dumps({
            "config": self.config, "config_hash": self.config_hash, "loss_curve": self.loss_curve,
            "wall_time": self.wall_time, "backbone_checksum": self.backbone_checksum}))


def _check(value, what):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {what}: {value}")


def maml_step(phi: np.ndarray, backbone: FrozenBackbone, episode, alpha: float, beta: float,
              return_loss: bool = False, loss_fn=nll_loss):
    """One exact second-order MAML update of the prompt from ``(support, query)`` batches.

    ``episode[0]`` may be a single support batch or a list of them (one per
    inner step).  ``loss_fn(backbone, prompt, batch)`` defaults to the
    backbone NLL; any differentiable scalar loss can stand in.
    """
    support, query = episode
    supports = support if isinstance(support, (list, tuple)) else [support]
    tape = Tape(retain_for_higher_order=True)
    p = tape.watch(phi)
    adapted = p
    for batch in supports:
        inner = loss_fn(backbone, adapted, batch)
        _check(inner.item(), "inner loss")
        (g,) = grad(inner, [adapted], create_graph=True)
        adapted = adapted - alpha * g
    outer = loss_fn(backbone, adapted, query)
    _check(outer.item(), "outer loss")
    (meta_grad,) = grad(outer, [p], create_graph=False)
    new = phi - beta * meta_grad.data
    return (new, outer.item()) if return_loss else new


def fomaml_step(phi: np.ndarray, backbone: FrozenBackbone, episode, alpha: float, beta: float,
                return_loss: bool = False, loss_fn=nll_loss):
    """First-order MAML: the inner update is a constant w.r.t. the prompt."""
    support, query = episode
    supports = support if isinstance(support, (list, tuple)) else [support]
    adapted = np.array(phi, dtype=np.float64)
    for batch in supports:
        tape = Tape()
        a = tape.watch(adapted)
        inner = loss_fn(backbone, a, batch)
        _check(inner.item(), "inner loss")
        (g,) = grad(inner, [a])
        adapted = adapted - alpha * g.data
    tape = Tape()
    a = tape.watch(adapted)
    outer = loss_fn(backbone, a, query)
    _check(outer.item(), "outer loss")
    (g,) = grad(outer, [a])
    new = phi - beta * g.data
    return (new, outer.item()) if return_loss else new


def reptile_step(phi: np.ndarray, backbone: FrozenBackbone, batches, alpha: float,
                 interp: float, k: int | None = None, return_loss: bool = False,
                 loss_fn=nll_loss):
    """k SGD steps on ``batches`` then move a fraction ``interp`` toward the result."""
    if k is None:
        k = len(batches)
    if k < 1 or len(batches) < k:
        raise ValueError("reptile needs k >= 1 batches")
    adapted = np.array(phi, dtype=np.float64)
    losses = []
    for batch in batches[:k]:
        tape = Tape()
        a = tape.watch(adapted)
        loss = loss_fn(backbone, a, batch)
        _check(loss.item(), "inner loss")
        (g,) = grad(loss, [a])
        adapted = adapted - alpha * g.data
        losses.append(loss.item())
    new = phi + interp * (adapted - phi)
    return (new, float(np.mean(losses))) if return_loss else new


def draw_task(rng: np.random.Generator, n_tasks: int) -> int:
    """Index of the source task for one meta-step, uniform over tasks."""
    return int(rng.integers(n_tasks))


class _SourceData:
    """Encoded support/query/pool batches per source task with seeded streams."""

    def __init__(self, backbone, tasks, seed, shots=16, split_seed=None):
        self.task_ids = [t.id for t in tasks]
        self.support, self.query, self.pool = [], [], []
        rng = np.random.default_rng(seed)
        self.rng = rng
        for task in tasks:
            sp = sample_fewshot(task, "upstream", seed if split_seed is None else split_seed, shots)
            s = encode_batch(backbone, sp["support"])
            q = encode_batch(backbone, sp["query"])
            self.support.append(s)
            self.query.append(q)
            self.pool.append(encode_batch(backbone, sp["support"] + sp["query"]))

    def __len__(self):
        return len(self.task_ids)


def _rows(batch: TokenBatch, rng, size) -> TokenBatch:
    size = min(size, len(batch))
    return batch.rows(np.sort(rng.choice(len(batch), size=size, replace=False)))


def meta_train(backbone: FrozenBackbone, init: PromptEmbeddings, source_tasks, cfg: MetaConfig,
               shots=16, split_seed=None) -> MetaResult:
    """Upstream learning: one uniformly sampled source task per step."""
    if cfg.method == "mtl":
        return mtl_train(backbone, init, source_tasks, cfg, shots=shots, split_seed=split_seed)
    if not source_tasks:
        raise ValueError("no source tasks")
    start = time.perf_counter()
    data = _SourceData(backbone, source_tasks, cfg.seed, shots, split_seed)
    rng = data.rng
    phi = np.array(init.matrix)
    curve = []
    for step in range(1, cfg.total_steps + 1):
        t = draw_task(rng, len(data))
        if cfg.method in ("maml", "fomaml"):
            supports = [_rows(data.support[t], rng, cfg.inner_batch_size) for _ in range(cfg.inner_steps)]
            query = _rows(data.query[t], rng, cfg.inner_batch_size)
            step_fn = maml_step if cfg.method == "maml" else fomaml_step
            phi, loss = step_fn(phi, backbone, (supports, query), cfg.inner_lr, cfg.outer_lr,
                                return_loss=True)
        else:
            batches = [_rows(data.pool[t], rng, cfg.inner_batch_size) for _ in range(cfg.inner_steps)]
            phi, loss = reptile_step(phi, backbone, batches, cfg.inner_lr, cfg.reptile_interp,
                                     cfg.inner_steps, return_loss=True)
        curve.append((step, loss))
    return _result(phi, init, curve, cfg, backbone, start, data.task_ids)


def mtl_train(backbone: FrozenBackbone, init: PromptEmbeddings, source_tasks, cfg: MetaConfig,
              shots=16, split_seed=None) -> MetaResult:
    """One shared prompt trained by SGD over the union of support and query examples."""
    if not source_tasks:
        raise ValueError("no source tasks")
    start = time.perf_counter()
    seed = cfg.seed
    pairs = []
    for task in source_tasks:
        sp = sample_fewshot(task, "upstream", seed if split_seed is None else split_seed, shots)
        pairs.extend(sp["support"] + sp["query"])
    everything = encode_batch(backbone, pairs)
    rng = np.random.default_rng(seed)
    phi = np.array(init.matrix)
    curve = []
    step = 0
    bs = cfg.mtl_batch_size
    for _ in range(cfg.mtl_epochs):
        order = rng.permutation(len(everything))
        for lo in range(0, len(order), bs):
            step += 1
            tape = Tape()
            p = tape.watch(phi)
            loss = nll_loss(backbone, p, everything.rows(np.sort(order[lo:lo + bs])))
            _check(loss.item(), "multi-task loss")
            (g,) = grad(loss, [p])
            phi = phi - cfg.mtl_lr * g.data
            curve.append((step, loss.item()))
    return _result(phi, init, curve, cfg, backbone, start, [t.id for t in source_tasks])


def _result(phi, init, curve, cfg, backbone, start, task_ids) -> MetaResult:
    prompt = PromptEmbeddings(phi, "meta_learned",
                              {"method": cfg.method, "config_hash": cfg.config_hash(),
                               "source_tasks": list(task_ids)})
    return MetaResult(prompt, curve, cfg.config_hash(), time.perf_counter() - start,
                      backbone.checksum, cfg.to_dict())
