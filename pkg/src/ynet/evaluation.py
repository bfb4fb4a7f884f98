"""Retrieval metrics: average precision, mAP at cutoffs, stage gap, benchmark.

AP over a returned list of length n uses R = min(R_total, n) in the
denominator so a perfect truncated ranking scores 1.0; an unreachable query
(R_total = 0) scores 0. Relevance in the benchmark is class-label equality.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import index as index_mod
from .errors import YNetError
from .hashing import HashConfig, encode, plan_aggregation
from .model import YNetParams, forward_backbone
from .nn import Tensor


def average_precision(rel: Sequence[int], r_total: int) -> float:
    """Eq.-style AP: sum of P(k)*rel(k) over the list, divided by min(R_total, n)."""
    rel = list(rel)
    n = len(rel)
    if n < 1:
        raise YNetError("empty returned list")
    r = min(r_total, n)
    if r == 0:
        return 0.0
    hits = 0
    acc = 0.0
    for k, rk in enumerate(rel, start=1):
        if rk:
            hits += 1
            acc += hits / k
    return acc / r


def mean_ap(queries: Sequence[tuple[Sequence[int], int]], n: int) -> float:
    """Arithmetic mean of AP over (rel list, R_total) pairs truncated at n."""
    if len(queries) == 0:
        raise YNetError("mean_ap over an empty query set")
    return float(np.mean([average_precision(list(rel)[:n], r_total) for rel, r_total in queries]))


def stage_gap(query_stage: float, retrieved_stages: Sequence[float]) -> float:
    """Mean absolute stage difference between the query and its hits."""
    if len(retrieved_stages) == 0:
        raise YNetError("stage_gap over an empty retrieved list")
    return float(np.mean([abs(query_stage - s) for s in retrieved_stages]))


@dataclass
class BenchmarkRow:
    code_length: int
    cutoff: int
    map: float
    stage_gap: float  # nan when stages are unavailable
    per_query_ap: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list[BenchmarkRow]
    config: dict

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("code_length,cutoff,map,stage_gap\n")
        for r in self.rows:
            out.write(f"{r.code_length},{r.cutoff},{r.map:.6f},{r.stage_gap:.6f}\n")
        return out.getvalue()


def compute_cores(params: YNetParams, samples) -> list[np.ndarray]:
    """Eval-mode core-node features for each sample."""
    return [forward_backbone(params, Tensor(s.image), mode="eval").core.data for s in samples]


def score_ranked(
    ranked: Sequence[Sequence[tuple[str, int]]],
    queries,
    gallery,
    cutoffs: Sequence[int],
    code_length: int,
) -> list[BenchmarkRow]:
    """Turn per-query ranked (id, distance) lists into benchmark rows.

    Relevance is label equality against the gallery; stage gap averages only
    over queries that carry a stage.
    """
    gallery_by_id = {s.id: s for s in gallery}
    gallery_labels = np.array([s.label for s in gallery])
    rows: list[BenchmarkRow] = []
    for cut in cutoffs:
        aps = []
        gaps = []
        for q, hits in zip(queries, ranked):
            top = hits[:cut]
            rel = [1 if gallery_by_id[i].label == q.label else 0 for i, _ in top]
            r_total = int((gallery_labels == q.label).sum())
            aps.append(average_precision(rel, r_total))
            if q.stage is not None:
                stages = [gallery_by_id[i].stage for i, _ in top if gallery_by_id[i].stage is not None]
                if stages:
                    gaps.append(stage_gap(q.stage, stages))
        rows.append(
            BenchmarkRow(
                code_length=code_length,
                cutoff=cut,
                map=float(np.mean(aps)),
                stage_gap=float(np.mean(gaps)) if gaps else float("nan"),
                per_query_ap=aps,
            )
        )
    return rows


def run_benchmark(
    params: YNetParams,
    gallery,
    queries,
    code_lengths: Sequence[int],
    cutoffs: Sequence[int],
) -> EvalReport:
    """Encode gallery and queries at each code length, search, score.

    Forward passes run once; only the aggregation is repeated per code
    length.
    """
    if len(gallery) == 0 or len(queries) == 0:
        raise YNetError("benchmark needs non-empty gallery and query sets")
    cfg = params.config
    gallery_cores = compute_cores(params, gallery)
    query_cores = compute_cores(params, queries)
    hw = cfg.core_hw

    rows: list[BenchmarkRow] = []
    for k in code_lengths:
        hash_cfg = HashConfig(k=k, plan=plan_aggregation(k, cfg.core_channels, hw, hw))
        idx = index_mod.build(
            [encode(c, hash_cfg) for c in gallery_cores], [s.id for s in gallery]
        )
        ranked = [index_mod.query_topk(idx, encode(c, hash_cfg), max(cutoffs)) for c in query_cores]
        rows.extend(score_ranked(ranked, queries, gallery, cutoffs, k))
    return EvalReport(rows=rows, config={"model": cfg.to_dict(), "code_lengths": list(code_lengths), "cutoffs": list(cutoffs)})
