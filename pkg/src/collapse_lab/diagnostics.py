"""Collapse measurements on trained or constructed weights."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .network import Weights, layer_norm_columns
from .theory import simplex_gram


@dataclass
class NormStats:
    mean: float
    std: float
    per_rank_mean: list = field(default_factory=list)
    per_rank_std: list = field(default_factory=list)


def embedding_norm_stats(W: np.ndarray, per_rank: bool = False, s_c: int | None = None) -> NormStats:
    """Mean / std of the column norms of W, optionally grouped by within-concept rank."""
    norms = np.linalg.norm(W, axis=0)
    stats = NormStats(float(norms.mean()), float(norms.std()))
    if per_rank:
        if s_c is None:
            raise ValueError("per-rank statistics need s_c")
        by_rank = norms.reshape(-1, s_c)  # rows: concepts, columns: ranks
        stats.per_rank_mean = by_rank.mean(axis=0).tolist()
        stats.per_rank_std = by_rank.std(axis=0).tolist()
    return stats


@dataclass
class AlignmentStats:
    within_cosine: list  # per group: mean pairwise cosine
    cross_cosine: float  # mean cosine between distinct group mean directions
    mean_within: float
    excluded: int


def _unit_columns(M: np.ndarray, tol: float = 1e-12):
    n = np.linalg.norm(M, axis=0)
    keep = n > tol
    return M[:, keep] / n[keep], keep


def concept_alignment(M: np.ndarray, groups) -> AlignmentStats:
    """Within-group and cross-group cosines.

    ``groups`` is either a partition matrix P (n_c x n) or an integer label per
    column. Zero columns are excluded and counted.
    """
    groups = np.asarray(groups)
    labels = groups.argmax(axis=0) if groups.ndim == 2 else groups.astype(int)
    V, keep = _unit_columns(np.asarray(M, dtype=float))
    labels = labels[keep]
    n_groups = int(labels.max()) + 1 if labels.size else 0
    within = []
    means = []
    for g in range(n_groups):
        Vg = V[:, labels == g]
        m = Vg.shape[1]
        if m == 0:
            within.append(float("nan"))
            means.append(np.zeros(V.shape[0]))
            continue
        s = Vg.sum(axis=1)
        # mean over ordered pairs i != j of <v_i, v_j>
        within.append(float((s @ s - m) / (m * (m - 1))) if m > 1 else 1.0)
        means.append(Vg.mean(axis=1))
    C, _ = _unit_columns(np.stack(means, axis=1)) if means else (np.zeros((0, 0)), None)
    G = C.T @ C
    off = G[~np.eye(G.shape[0], dtype=bool)]
    cross = float(off.mean()) if off.size else float("nan")
    return AlignmentStats(within, cross, float(np.nanmean(within)) if within else float("nan"), int((~keep).sum()))


@dataclass
class EquiangularityResidual:
    gram: float  # |G^T G - ideal|_F over unit-normalised vectors
    sum_norm: float  # |sum of unit-normalised vectors|


def equiangularity_residual(G: np.ndarray) -> EquiangularityResidual:
    """Distance of n_c direction vectors (columns of G) from an equiangular frame."""
    G = np.asarray(G, dtype=float)
    norms = np.linalg.norm(G, axis=0)
    if np.any(norms == 0):
        raise ValueError("direction vectors must be non-zero")
    Gn = G / norms
    ideal = simplex_gram(G.shape[1])
    return EquiangularityResidual(float(np.linalg.norm(Gn.T @ Gn - ideal)), float(np.linalg.norm(Gn.sum(axis=1))))


def pca_singular_values(M: np.ndarray, top_k: int | None = None) -> list:
    """Singular values, descending, of M after subtracting the mean column."""
    M = np.asarray(M, dtype=float)
    if top_k is not None and top_k > min(M.shape):
        raise ValueError("top_k exceeds matrix rank bound")
    s = np.linalg.svd(M - M.mean(axis=1, keepdims=True), compute_uv=False)
    return s[:top_k].tolist() if top_k is not None else s.tolist()


def group_means(V: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    return np.stack([V[:, labels == g].mean(axis=1) for g in range(n_groups)], axis=1)


@dataclass
class CollapseReport:
    embedding_norm_mean: float
    embedding_norm_std: float
    per_rank_norm_mean: list
    per_rank_norm_std: list
    word_within_cosine: float
    word_cross_cosine: float
    equiangularity_residual: float
    top_singular_values: list
    u_norm_mean: float
    u_norm_std: float
    u_within_cosine: float
    u_cross_cosine: float
    u_equiangularity_residual: float
    u_top_singular_values: list
    representation: str = "embedding"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_jsonable)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def collapse_report(weights: Weights, concepts: np.ndarray, n_c: int, s_c: int, *,
                    layernorm: bool = False, top_k: int = 3) -> CollapseReport:
    """Collapse metrics for W (or phi(W) when ``layernorm``) and the head blocks u_{k,l}.

    ``concepts`` is the (K, L) array of 0-based latent concepts.
    """
    M = layer_norm_columns(weights.W) if layernorm else weights.W
    word_labels = np.repeat(np.arange(n_c), s_c)
    ns = embedding_norm_stats(M, per_rank=True, s_c=s_c)
    wa = concept_alignment(M, word_labels)
    k = min(top_k, *M.shape)
    u = weights.u_blocks.reshape(-1, weights.d).T  # (d, K L), column k*L + l
    u_labels = np.asarray(concepts).reshape(-1)
    us = embedding_norm_stats(u)
    ua = concept_alignment(u, u_labels)
    return CollapseReport(
        embedding_norm_mean=ns.mean, embedding_norm_std=ns.std,
        per_rank_norm_mean=ns.per_rank_mean, per_rank_norm_std=ns.per_rank_std,
        word_within_cosine=wa.mean_within, word_cross_cosine=wa.cross_cosine,
        equiangularity_residual=_safe_residual(M, word_labels, n_c),
        top_singular_values=pca_singular_values(M, k),
        u_norm_mean=us.mean, u_norm_std=us.std,
        u_within_cosine=ua.mean_within, u_cross_cosine=ua.cross_cosine,
        u_equiangularity_residual=_safe_residual(u, u_labels, n_c),
        u_top_singular_values=pca_singular_values(u, min(top_k, *u.shape)),
        representation="layernorm" if layernorm else "embedding",
    )


def _safe_residual(V, labels, n_groups) -> float:
    present = [g for g in range(n_groups) if np.any(labels == g)]
    if len(present) != n_groups:
        return float("nan")
    means = group_means(V, labels, n_groups)
    if np.any(np.linalg.norm(means, axis=0) == 0):
        return float("nan")
    return equiangularity_residual(means).gram


def write_word_csv(path, W: np.ndarray, s_c: int) -> None:
    """Per-word rows (alpha, beta, norm, cosine to its concept mean direction)."""
    n_w = W.shape[1]
    labels = np.arange(n_w) // s_c
    means = group_means(W, labels, int(labels.max()) + 1)
    norms = np.linalg.norm(W, axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "beta", "norm", "cosine_to_concept_mean"])
        for j in range(n_w):
            m = means[:, labels[j]]
            denom = norms[j] * np.linalg.norm(m)
            cos = float(W[:, j] @ m / denom) if denom > 0 else float("nan")
            w.writerow([labels[j] + 1, j % s_c + 1, f"{norms[j]:.17g}", f"{cos:.17g}"])


@dataclass
class Comparison:
    metric: str
    observed: float
    predicted: float
    abs_dev: float
    rel_dev: float
    tolerance: float
    passed: bool


def compare_to_theory(report, prediction, tolerances: dict) -> list[Comparison]:
    """Absolute deviations of report metrics from predictions, each checked against its tolerance.

    ``tolerances`` maps a report attribute to ``(prediction attribute, tol)``;
    a bare float tolerance compares ``embedding_norm_mean`` style metrics with
    ``predicted_norm``.
    """
    rows = []
    for metric, spec in tolerances.items():
        pred_attr, tol = spec if isinstance(spec, tuple) else ("predicted_norm", spec)
        obs = float(getattr(report, metric) if not isinstance(report, dict) else report[metric])
        pred = float(getattr(prediction, pred_attr) if not isinstance(prediction, dict) else prediction[pred_attr])
        dev = abs(obs - pred)
        rel = dev / abs(pred) if pred else float("inf")
        rows.append(Comparison(metric, obs, pred, dev, rel, tol, bool(dev <= tol)))
    return rows
