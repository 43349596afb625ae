"""Retrieval metrics: hit-rate RR@k and binary-gain NDCG@k, both directions.

``recall_rate_at_k`` and ``ndcg_at_k`` return fractions in [0, 1]; the
metric tables produced by :func:`evaluate_embeddings` are scaled by 100.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

DIRECTIONS = ("S2T", "T2S")
METRICS = ("RR@1", "RR@5", "NDCG@5")

RelevanceMap = Mapping[int, frozenset]


@dataclass
class RankedResult:
    query_id: int
    ids: np.ndarray  # gallery ids, best first
    scores: np.ndarray  # matching scores, non-increasing


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def rank_scores(query_id: int, scores: np.ndarray, ids: np.ndarray | None = None) -> RankedResult:
    """Sort a gallery by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("cannot rank an empty gallery")
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    return RankedResult(query_id, ids[order], scores[order])


def rank_gallery(query_emb, gallery_embs, query_id: int = 0, ids=None) -> RankedResult:
    """Rank gallery rows by cosine similarity to ``query_emb``."""
    g = np.atleast_2d(np.asarray(gallery_embs, dtype=np.float64))
    if g.size == 0:
        raise ValueError("cannot rank an empty gallery")
    q = _unit_rows(query_emb)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query width {q.shape[1]} vs gallery width {g.shape[1]}")
    return rank_scores(query_id, (_unit_rows(g) @ q.T).reshape(-1), ids)


def rank_all(score_matrix: np.ndarray, ids=None) -> list[RankedResult]:
    """One :class:`RankedResult` per row of a query x gallery score matrix."""
    return [rank_scores(q, row, ids) for q, row in enumerate(np.asarray(score_matrix))]


def recall_rate_at_k(results: Sequence[RankedResult], rel: RelevanceMap, k: int) -> float:
    """Fraction of queries with at least one relevant id in the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = [any(int(i) in rel[r.query_id] for i in r.ids[:k]) for r in results]
    return float(np.mean(hits))


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(results: Sequence[RankedResult], rel: RelevanceMap, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    disc = _discounts(k)
    vals = []
    for r in results:
        relevant = rel[r.query_id]
        # correctly rounded sums keep the value independent of summation order
        dcg = math.fsum(disc[p] for p, i in enumerate(r.ids[:k]) if int(i) in relevant)
        idcg = math.fsum(disc[: min(k, len(relevant))])
        vals.append(dcg / idcg)
    return math.fsum(vals) / len(vals)


class Embedder(Protocol):
    def embed(self, dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (shape embeddings, caption embeddings, caption -> shape index)."""


def evaluate_embeddings(shape_embs, text_embs, caption_owner) -> dict:
    """Six-number table for a test split, values on a 0-100 scale.

    S2T: each shape queries all captions; its own captions are relevant.
    T2S: each caption queries all shapes; its source shape is relevant.
    """
    S, T = _unit_rows(shape_embs), _unit_rows(text_embs)
    owner = np.asarray(caption_owner)
    scores = S @ T.T
    s2t_rel = {i: frozenset(np.flatnonzero(owner == i).tolist()) for i in range(S.shape[0])}
    t2s_rel = {j: frozenset([int(owner[j])]) for j in range(T.shape[0])}
    table = {}
    for direction, mat, rel in (("S2T", scores, s2t_rel), ("T2S", scores.T, t2s_rel)):
        results = rank_all(mat)
        table[direction] = {
            "RR@1": 100.0 * recall_rate_at_k(results, rel, 1),
            "RR@5": 100.0 * recall_rate_at_k(results, rel, 5),
            "NDCG@5": 100.0 * ndcg_at_k(results, rel, 5),
        }
    return table


def evaluate(model: Embedder, dataset) -> dict:
    return evaluate_embeddings(*model.embed(dataset))


def format_tables(rows: Sequence[tuple[str, Mapping[str, Mapping[str, float]]]]) -> str:
    """Plain-text table, one row per labelled result, S2T then T2S blocks."""
    width = max([12] + [len(label) for label, _ in rows])
    head1 = " " * width + " | " + " | ".join(f"{d:^26s}" for d in DIRECTIONS)
    head2 = f"{'':{width}s} | " + " | ".join(
        " ".join(f"{m:>8s}" for m in METRICS) for _ in DIRECTIONS
    )
    lines = [head1, head2, "-" * len(head2)]
    for label, table in rows:
        lines.append(f"{label:{width}s} | " + " | ".join(
            " ".join(f"{table[d][m]:8.2f}" for m in METRICS) for d in DIRECTIONS
        ))
    return "\n".join(lines)


def format_table(table: Mapping[str, Mapping[str, float]], label: str = "") -> str:
    return format_tables([(label, table)])


def table_json(table: Mapping[str, Mapping[str, float]]) -> str:
    return json.dumps({d: {m: float(table[d][m]) for m in METRICS} for d in DIRECTIONS}, sort_keys=True)
