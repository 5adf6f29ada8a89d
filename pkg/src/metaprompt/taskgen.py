"""Synthetic few-shot text-to-text task families, few-shot sampling and partitions.

Three families mirror the classification / question answering / generation
split of the real benchmark collections:

Every family hides one keyword among filler words:

* ``classification``: the keyword (a cue) decides the label.
* ``qa_span``: after a question marker, the answer is the entity phrase
  mentioned in the context, copied verbatim.
* ``transformation``: the output is the keyword rewritten through a word
  substitution.

Keyword tables (cue-to-label, entity list, substitution) are drawn per
*family seed*; each task uses a random subset, so tasks of one family share
most of their rules and a source set covers more of a target's rules the
more tasks it holds.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backbone import N_LABELS, make_vocab

FAMILIES = ("classification", "qa_span", "transformation")
TEST_SIZE = 200
MIN_POOL = 600


@dataclass
class Task:
    id: str
    family: str
    examples: list  # list of (input_text, output_text)
    family_params: dict = field(default_factory=dict)

    @property
    def is_classification(self) -> bool:
        return self.family == "classification"

    def labels(self) -> list[str]:
        return [y for _, y in self.examples]

    def pool_hash(self) -> str:
        h = hashlib.sha256(f"{self.id}\x00{self.family}\x00".encode())
        for x, y in self.examples:
            h.update(f"{x}\x01{y}\x02".encode())
        return h.hexdigest()


@dataclass
class TaskSplits:
    """Disjoint index splits into ``task.examples`` for one sampling seed.

    Upstream splits are named ``support``/``query``; downstream ones
    ``train``/``val``/``test``.
    """

    task_id: str
    role: str
    seed: int
    indices: dict
    pairs: dict

    def __getitem__(self, name: str) -> list:
        return self.pairs[name]

    @property
    def names(self) -> list[str]:
        return list(self.indices)


def _vocab_groups(vocab: Sequence[str]) -> dict:
    labels = [t for t in vocab if t.startswith("L") and t[1:].isdigit()]
    markers = [t for t in vocab if t.startswith("Q") and t[1:].isdigit()]
    content = [t for t in vocab if t.startswith("w") and t[1:].isdigit()]
    return {"labels": labels, "markers": markers, "content": content}


def _family_rng(family: str, family_seed: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(family.encode()), family_seed])


def _dedup_fill(make, rng, pool_size, max_tries=200_000, distinct=True):
    if not distinct:
        return [make(rng, i) for i in range(pool_size)]
    seen, pool = set(), []
    tries = 0
    while len(pool) < pool_size:
        x, y = make(rng, len(pool))
        tries += 1
        if tries > max_tries:
            raise ValueError("vocabulary too small to build a distinct example pool")
        if x in seen:
            continue
        seen.add(x)
        pool.append((x, y))
    return pool


def generate_task(family: str, difficulty_params: Mapping | None = None, seed: int = 0,
                  family_seed: int = 0, task_id: str | None = None,
                  vocab: Sequence[str] | None = None, pool_size: int = MIN_POOL) -> Task:
    """Deterministically generate a task of ``family``.

    ``family_seed`` fixes the rules shared across the family; ``seed`` picks
    the task-specific subset of them and the example pool.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if pool_size < MIN_POOL:
        raise ValueError(f"pool_size must be >= {MIN_POOL}")
    params = dict(difficulty_params or {})
    vocab = list(vocab) if vocab is not None else make_vocab(64)
    groups = _vocab_groups(vocab)
    frng = _family_rng(family, family_seed)
    rng = np.random.default_rng([zlib.crc32(family.encode()), family_seed, seed, 1])
    content = groups["content"]
    task_id = task_id or f"{family[:3]}-f{family_seed}-s{seed}"

    def pick_keywords(table, count):
        return [str(w) for w in rng.choice(table, size=count, replace=False)]

    def with_fillers(r, keyword, fillers, length):
        words = [str(w) for w in r.choice(fillers, size=length - 1)]
        words.insert(int(r.integers(length)), keyword)
        return words

    if family == "classification":
        C = int(params.get("n_classes", 3))
        cues_per_label = int(params.get("cues_per_label", 1))
        family_cues = int(params.get("family_cues_per_label", 8))
        length = int(params.get("input_len", 3))
        if not 2 <= C <= N_LABELS or C > len(groups["labels"]):
            raise ValueError("n_classes must be in [2, 5] and fit the label vocabulary")
        if C * family_cues + 4 > len(content) or not 1 <= cues_per_label <= family_cues:
            raise ValueError("vocabulary overflow: not enough content words for the cue table")
        order = frng.permutation(len(content))
        cue_table = [[content[j] for j in order[c * family_cues:(c + 1) * family_cues]]
                     for c in range(C)]
        fillers = [content[j] for j in order[C * family_cues:]]
        label_words = groups["labels"][:C]
        cues = [pick_keywords(row, cues_per_label) for row in cue_table]

        def make(r, i):
            c = i % C  # cycling keeps the pool exactly balanced
            words = with_fillers(r, str(r.choice(cues[c])), fillers, length)
            return " ".join(words), label_words[c]

        fp = {"n_classes": C, "cues": cues, "labels": label_words, "input_len": length}

    elif family == "qa_span":
        length = int(params.get("input_len", 3))
        span = int(params.get("span_len", 1))
        family_entities = int(params.get("family_entities", 12))
        per_task = int(params.get("entities_per_task", 3))
        if not groups["markers"] or family_entities * span + 4 > len(content) \
                or not 1 <= per_task <= family_entities:
            raise ValueError("vocabulary overflow: qa_span needs markers and content words")
        order = frng.permutation(len(content))
        phrases = [" ".join(content[j] for j in order[e * span:(e + 1) * span])
                   for e in range(family_entities)]
        fillers = [content[j] for j in order[family_entities * span:]]
        marker = str(frng.choice(groups["markers"]))
        entities = pick_keywords(phrases, per_task)

        def make(r, i):
            answer = str(r.choice(entities))
            words = with_fillers(r, answer, fillers, length)
            return " ".join([marker] + words), answer

        fp = {"marker": marker, "entities": entities, "span_len": span, "input_len": length}

    else:  # transformation
        length = int(params.get("input_len", 3))
        family_words = int(params.get("family_words", 12))
        per_task = int(params.get("words_per_task", 3))
        if 2 * family_words + 4 > len(content) or not 1 <= per_task <= family_words:
            raise ValueError("vocabulary overflow: transformation needs more content words")
        order = frng.permutation(len(content))
        domain = [content[j] for j in order[:family_words]]
        image = [content[j] for j in order[family_words:2 * family_words]]
        mapping = dict(zip(domain, image))
        fillers = [content[j] for j in order[2 * family_words:]]
        sources = pick_keywords(domain, per_task)

        def make(r, i):
            word = str(r.choice(sources))
            return " ".join(with_fillers(r, word, fillers, length)), mapping[word]

        fp = {"rewrites": {w: mapping[w] for w in sources}, "input_len": length}

    fp["family_seed"] = family_seed
    fp["seed"] = seed
    examples = _dedup_fill(make, rng, pool_size, distinct=bool(params.get("distinct", True)))
    return Task(task_id, family, examples, fp)


def _split_rng(task_id: str, seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(task_id.encode()), seed, salt])


def _take_stratified(task: Task, available: np.ndarray, per_class: int,
                     rng: np.random.Generator, n_sets: int) -> list[np.ndarray]:
    labels = np.array(task.labels())
    sets = [[] for _ in range(n_sets)]
    for lab in sorted(set(labels[available])):
        idx = available[labels[available] == lab]
        idx = rng.permutation(idx)
        if per_class is None:
            chunks = np.array_split(idx, n_sets)
        else:
            if len(idx) < per_class * n_sets:
                raise ValueError(f"insufficient pool in task {task.id} for label {lab}")
            chunks = [idx[k * per_class:(k + 1) * per_class] for k in range(n_sets)]
        for k in range(n_sets):
            sets[k].extend(chunks[k].tolist())
    return [np.sort(np.array(s, dtype=np.int64)) for s in sets]


def _take_flat(available: np.ndarray, size: int | None, rng, n_sets: int, task_id: str):
    idx = rng.permutation(available)
    if size is None:
        return [np.sort(c) for c in np.array_split(idx, n_sets)]
    if len(idx) < size * n_sets:
        raise ValueError(f"insufficient pool in task {task_id}")
    return [np.sort(idx[k * size:(k + 1) * size]) for k in range(n_sets)]


def sample_fewshot(task: Task, role: str = "downstream", seed: int = 0,
                   shots: int | str = 16, test_size: int = TEST_SIZE) -> TaskSplits:
    """Few-shot splits: ``shots`` per class (classification) or ``2*shots`` per set.

    ``shots="all"`` splits the whole non-test pool evenly.  The downstream test
    set depends only on the task, never on ``seed``.
    """
    if role not in ("upstream", "downstream"):
        raise ValueError(f"role must be 'upstream' or 'downstream', got {role!r}")
    n = len(task.examples)
    everything = np.arange(n)
    indices = {}
    if role == "downstream":
        if n <= test_size:
            raise ValueError(f"insufficient pool in task {task.id} for a {test_size}-example test set")
        test = np.sort(_split_rng(task.id, 0, 99).permutation(n)[:test_size])
        available = np.setdiff1d(everything, test)
        names = ("train", "val")
    else:
        test = None
        available = everything
        names = ("support", "query")
    rng = _split_rng(task.id, seed, 1 if role == "downstream" else 2)
    per = None if shots == "all" else int(shots)
    if task.is_classification:
        first, second = _take_stratified(task, available, per, rng, 2)
    else:
        first, second = _take_flat(available, None if per is None else 2 * per, rng, 2, task.id)
    indices[names[0]] = first
    indices[names[1]] = second
    if test is not None:
        indices["test"] = test
    pairs = {k: [task.examples[i] for i in v] for k, v in indices.items()}
    return TaskSplits(task.id, role, seed, indices, pairs)


@dataclass(frozen=True)
class Partition:
    name: str
    source: tuple
    target: tuple

    def __post_init__(self):
        overlap = set(self.source) & set(self.target)
        if overlap:
            raise ValueError(f"partition {self.name!r}: source and target overlap on {sorted(overlap)}")
        if len(set(self.source)) != len(self.source) or len(set(self.target)) != len(self.target):
            raise ValueError(f"partition {self.name!r}: duplicate task ids")

    def to_dict(self) -> dict:
        return {"name": self.name, "source": list(self.source), "target": list(self.target)}


def make_partition(spec: Mapping, task_registry: Mapping[str, Task]) -> Partition:
    """Build a disjoint source/target partition.

    ``spec`` is either explicit ``{name, source: [...], target: [...]}`` or a
    generator ``{name, source_families, source_count, target_families,
    target_count, seed}`` drawing ids from the registry.
    """
    name = spec.get("name", "partition")
    if "source" in spec and "target" in spec:
        missing = [t for t in list(spec["source"]) + list(spec["target"]) if t not in task_registry]
        if missing:
            raise ValueError(f"unknown task ids in partition {name!r}: {missing}")
        return Partition(name, tuple(spec["source"]), tuple(spec["target"]))

    rng = np.random.default_rng(int(spec.get("seed", 0)))
    exclude = set(spec.get("exclude", ()))

    def draw(families, count, taken):
        pool = sorted(t for t, task in task_registry.items()
                      if task.family in families and t not in taken and t not in exclude)
        if len(pool) < count:
            raise ValueError(f"partition {name!r} unsatisfiable: need {count} tasks from "
                             f"{list(families)}, registry has {len(pool)}")
        return [pool[i] for i in sorted(rng.choice(len(pool), size=count, replace=False))]

    if "target" in spec:
        target = list(spec["target"])
    else:
        target = draw(tuple(spec["target_families"]), int(spec["target_count"]), set())
    if "source" in spec:
        source = list(spec["source"])
    else:
        source = draw(tuple(spec["source_families"]), int(spec["source_count"]), set(target))
    return Partition(name, tuple(source), tuple(target))


def save_tasks(tasks: Iterable[Task], path) -> None:
    with open(path, "w") as fh:
        for task in tasks:
            for x, y in task.examples:
                fh.write(json.dumps({"task_id": task.id, "family": task.family,
                                     "input": x, "output": y}) + "\n")


def load_tasks(path) -> list[Task]:
    """Read JSONL ``{task_id, family, input, output}`` lines, grouped by task."""
    tasks: dict[str, Task] = {}
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tid, fam, x, y = rec["task_id"], rec["family"], rec["input"], rec["output"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed task line ({exc})") from None
            task = tasks.get(tid)
            if task is None:
                task = tasks[tid] = Task(tid, fam, [])
            elif task.family != fam:
                raise ValueError(f"{path}:{lineno}: task {tid} changes family")
            task.examples.append((x, y))
    return list(tasks.values())


def default_registry(n_per_family: Mapping[str, int], family_seed: int = 0, vocab=None,
                     seed_offset: int = 0, params: Mapping | None = None) -> dict[str, Task]:
    """Registry of ``n`` tasks per family, all drawn from one family seed."""
    registry = {}
    for family, n in n_per_family.items():
        for s in range(n):
            task = generate_task(family, (params or {}).get(family), seed=seed_offset + s,
                                 family_seed=family_seed, vocab=vocab)
            registry[task.id] = task
    return registry
