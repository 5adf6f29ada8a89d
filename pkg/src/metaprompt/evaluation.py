"""Task metrics, relative gain and average relative gain."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import encode_batch, greedy_decode

METRIC_BY_FAMILY = {
    "classification": "accuracy",
    "qa_span": "token_f1",
    "transformation": "exact_match",
}
RG_BASELINE_FLOOR = 1e-6
# published ARG (%) of MAML on classification-to-classification transfer; context only
REFERENCE_MAML_CLS_ARG = 20.16


@dataclass(frozen=True)
class Score:
    value: float
    metric_name: str
    task_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"score {self.value} outside [0, 1]")


def token_f1(prediction: str, reference: str) -> float:
    pred, ref = prediction.split(), reference.split()
    if not pred and not ref:
        return 1.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, reference: str) -> float:
    return float(prediction.split() == reference.split())


_METRICS = {"accuracy": exact_match, "exact_match": exact_match, "token_f1": token_f1}


def metric_score(predictions: Sequence[str], references: Sequence[str], metric: str) -> float:
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not references:
        raise ValueError("no references to score")
    fn = _METRICS[metric]
    return float(np.mean([fn(p, r) for p, r in zip(predictions, references)]))


def predict(backbone, prompt, inputs: Sequence[str], max_new_tokens: int, params=None) -> list[str]:
    batch = encode_batch(backbone, [(x, "") for x in inputs])
    ids = greedy_decode(backbone, prompt, batch.input_ids, max_new_tokens, params=params)
    vocab = backbone.vocab
    return [" ".join(vocab[t] for t in row) for row in ids]


def score_task(backbone, prompt, pairs, metric: str, params=None, task_id: str = "",
               seed: int = 0) -> Score:
    """Greedy-decode ``pairs`` inputs and score them against the outputs."""
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    max_new = max(len(y.split()) for _, y in pairs) + 1
    preds = predict(backbone, prompt, [x for x, _ in pairs], max_new, params=params)
    value = metric_score(preds, [y for _, y in pairs], metric)
    return Score(value, metric, task_id, seed)


def relative_gain(method_score: float, baseline_score: float) -> float:
    """Percent improvement over the baseline; NaN when the baseline is ~0."""
    if baseline_score < RG_BASELINE_FLOOR:
        return math.nan
    # scaling before subtracting keeps decimal inputs like (0.6, 0.5) exact
    return (100.0 * method_score - 100.0 * baseline_score) / baseline_score


def average_relative_gain(gains: Sequence[float]) -> float:
    """Mean of the defined relative gains; undefined (NaN) entries are skipped."""
    kept = [g for g in gains if not math.isnan(g)]
    dropped = len(gains) - len(kept)
    if not kept:
        raise ValueError("all target tasks were excluded from ARG")
    if dropped:
        warnings.warn(f"{dropped} task(s) excluded from ARG: baseline score below floor")
    return math.fsum(kept) / len(kept)
