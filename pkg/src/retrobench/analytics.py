"""Measurement layer: overlap, rank correlations, and perplexity arithmetic.

All statistics accumulate in float64. The overlap metric defaults to
containment (what fraction of the evaluated chunk's unique tokens appear in
the retrieved pair); jaccard is available behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import PAD_ID

LN2 = math.log(2.0)


@dataclass(frozen=True)
class BpbConfig:
    """Tokens-to-bytes length ratio of the evaluation set."""

    token_byte_ratio: float = 0.258415

    def __post_init__(self) -> None:
        if self.token_byte_ratio <= 0:
            raise ValueError("token/byte ratio must be positive")


@dataclass
class CorrelationReport:
    rows: list[tuple[str, str, float, float, int]]  # (X, Y, spearman, pearson, n)

    def as_tsv(self) -> str:
        lines = ["X\tY\tspearman\tpearson\tn"]
        for x, y, rho, r, n in self.rows:
            lines.append(f"{x}\t{y}\t{rho:.6f}\t{r:.6f}\t{n}")
        return "\n".join(lines) + "\n"


def unigram_overlap(query_tokens: Sequence[int], pair_tokens: Sequence[int], metric: str = "containment") -> float:
    """Unique-token overlap between a chunk and a retrieved [N;F] pair.

    containment: |q & p| / |q|; jaccard: |q & p| / |q | p|. PAD is ignored on
    both sides and an all-PAD query is an error.
    """
    q = {int(t) for t in np.asarray(query_tokens).ravel() if t != PAD_ID}
    p = {int(t) for t in np.asarray(pair_tokens).ravel() if t != PAD_ID}
    if not q:
        raise ValueError("query chunk has no non-PAD tokens")
    if metric == "containment":
        return len(q & p) / len(q)
    if metric == "jaccard":
        return len(q & p) / len(q | p) if (q or p) else 0.0
    raise ValueError(f"unknown overlap metric {metric!r}")


def _check_xy(xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d sequences")
    if len(x) < 3:
        raise ValueError("need at least 3 samples")
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation; errors on constant input."""
    x, y = _check_xy(xs, ys)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance")
    return float(np.sum(xc * yc) / (sx * sy))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties get the mean rank)."""
    x, y = _check_xy(xs, ys)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def bpb(loss_nats_per_token: float, cfg: BpbConfig = BpbConfig()) -> float:
    """Bits-per-byte for a mean loss in nats per token."""
    if loss_nats_per_token < 0:
        raise ValueError("loss must be non-negative")
    return cfg.token_byte_ratio * loss_nats_per_token / LN2


def reduction_fraction(ppl_base: float, ppl_new: float) -> float:
    """Relative perplexity reduction; negative if ppl_new is worse."""
    if ppl_base <= 0:
        raise ValueError("base perplexity must be positive")
    return (ppl_base - ppl_new) / ppl_base


def rerank_gain_fraction(ppl_dense: float, ppl_rerank: float, ppl_bm25: float) -> float:
    """Fraction of the dense-to-bm25 perplexity drop captured by reranking."""
    if ppl_dense <= ppl_bm25:
        raise ValueError("degenerate denominator: dense ppl must exceed bm25 ppl")
    return (ppl_dense - ppl_rerank) / (ppl_dense - ppl_bm25)


def correlation_study(records: Iterable) -> CorrelationReport:
    """Three-row correlation report over per-chunk evaluation records.

    Rows: (negative squared L2 vs delta-PPL), (overlap vs delta-PPL),
    (negative squared L2 vs overlap). Records must come from a dense-mode
    evaluation so the stored neighbor score is the negated squared L2
    distance of the top-1 neighbor.
    """
    rows_in = [r for r in records if r.delta_ppl is not None and r.neighbor_score is not None and r.token_overlap is not None]
    if len(rows_in) < 3:
        raise ValueError("need at least 3 complete records")
    neg_l2 = [r.neighbor_score for r in rows_in]
    delta = [r.delta_ppl for r in rows_in]
    overlap = [r.token_overlap for r in rows_in]
    n = len(rows_in)
    report_rows = [
        ("neg_sq_l2", "delta_ppl", spearman(neg_l2, delta), pearson(neg_l2, delta), n),
        ("token_overlap", "delta_ppl", spearman(overlap, delta), pearson(overlap, delta), n),
        ("neg_sq_l2", "token_overlap", spearman(neg_l2, overlap), pearson(neg_l2, overlap), n),
    ]
    return CorrelationReport(report_rows)
