"""Prompt matrices as task embeddings: SVD subspaces and their correlation.

The correlation between two subspaces with orthonormal bases ``A`` (d x r_a)
and ``B`` (d x r_b) is the squared Frobenius norm of the projection of one
basis onto the other, normalized by its rank and averaged over both
directions::

    corr = (||B^T A||_F^2 / r_a + ||A^T B||_F^2 / r_b) / 2
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np

DEFAULT_ENERGY = 0.95
# published mean scores for similar and dissimilar task pairs; a directional target only
REFERENCE_SIMILAR = 0.768
REFERENCE_DISSIMILAR = 0.306
METHOD_NOTE = ("Frobenius norm of projected basis over rank, averaged over both "
               "directions; basis from right singular vectors at an energy threshold")


def jacobi_svd(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """One-sided (Hestenes) Jacobi SVD.

    Returns singular values in descending order and the matching right
    singular vectors as columns of a square orthogonal matrix.
    """
    u = np.array(a, dtype=np.float64)
    n = u.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui, uj = u[:, i], u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if abs(gamma) <= tol * np.sqrt(alpha) * np.sqrt(beta) or gamma == 0.0:
                    continue
                rotated = True
                diff = beta - alpha
                if abs(diff) > 1e150 * abs(gamma):
                    t = gamma / diff  # tan of a tiny angle; avoids overflowing zeta
                else:
                    zeta = diff / (2.0 * gamma)
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                u[:, [i, j]] = np.column_stack([c * ui - s * uj, s * ui + c * uj])
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    return sigma[order], v[:, order]


@dataclass(frozen=True)
class TaskSubspace:
    basis: np.ndarray
    energy_threshold: float = DEFAULT_ENERGY

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]


def prompt_subspace(prompt, energy_threshold: float = DEFAULT_ENERGY) -> TaskSubspace:
    """Top right-singular vectors holding ``energy_threshold`` of the squared spectrum."""
    matrix = np.asarray(getattr(prompt, "matrix", prompt), dtype=np.float64)
    if not 0.0 < energy_threshold <= 1.0:
        raise ValueError("energy_threshold must be in (0, 1]")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("prompt contains non-finite entries")
    sigma, v = jacobi_svd(matrix)
    energy = sigma ** 2
    total = energy.sum()
    if total <= 0.0:
        raise ValueError("cannot take the subspace of a zero matrix")
    captured = np.cumsum(energy) / total
    # relative slack absorbs rounding when the threshold is exactly reachable
    r = int(np.searchsorted(captured, energy_threshold - 1e-12) + 1)
    r = min(r, int(np.count_nonzero(sigma > sigma[0] * 1e-12)))
    return TaskSubspace(v[:, :max(r, 1)], energy_threshold)


def subspace_correlation(a: TaskSubspace, b: TaskSubspace) -> float:
    if a.dim != b.dim:
        raise ValueError(f"ambient dimension mismatch: {a.dim} vs {b.dim}")
    overlap = float(np.sum((b.basis.T @ a.basis) ** 2))
    score = 0.5 * (overlap / a.rank + overlap / b.rank)
    return float(min(max(score, 0.0), 1.0))


def prompt_correlation(p, q, energy_threshold: float = DEFAULT_ENERGY) -> float:
    return subspace_correlation(prompt_subspace(p, energy_threshold),
                                prompt_subspace(q, energy_threshold))


def rank_sources_by_similarity(target, sources: Mapping[str, object],
                               energy_threshold: float = DEFAULT_ENERGY) -> list[tuple[str, float]]:
    """Source ids with scores, most correlated first; ties broken by id."""
    if not sources:
        raise ValueError("no source prompts to rank")
    t_sub = prompt_subspace(target, energy_threshold)
    scored = []
    for sid, prompt in sources.items():
        s_sub = prompt_subspace(prompt, energy_threshold)
        if s_sub.dim != t_sub.dim:
            raise ValueError(f"source {sid} has width {s_sub.dim}, target {t_sub.dim}")
        scored.append((sid, subspace_correlation(t_sub, s_sub)))
    return sorted(scored, key=lambda kv: (-kv[1], kv[0]))


def similarity_matrix(prompts: Mapping[str, object],
                      energy_threshold: float = DEFAULT_ENERGY) -> list[tuple[str, str, float]]:
    subs = {k: prompt_subspace(p, energy_threshold) for k, p in prompts.items()}
    ids = sorted(subs)
    return [(a, b, subspace_correlation(subs[a], subs[b])) for a in ids for b in ids]


def write_similarity_csv(rows, path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id_a", "task_id_b", "score", "config_hash"])
        for a, b, s in rows:
            w.writerow([a, b, repr(float(s)), config_hash])
