"""Neighbor assembly for the three retrieval modes: dense, bm25, rerank.

Every retrieved neighbor comes paired with its continuation (the next chunk
of the same source document) and the same-document filter always applies: a
query chunk's own document never supplies neighbors. Scores are uniformly
"higher is better" (dense distances are negated) so downstream consumers are
mode-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bm25_index, dense_index
from .bm25_index import InvertedIndex
from .corpus import Chunk, ChunkStore
from .dense_index import IVFIndex, SearchParams

MODES = ("dense", "bm25", "rerank")


@dataclass
class RetrievalConfig:
    mode: str = "bm25"
    k: int = 2
    candidate_k: int = 1000
    nprobe: int | None = None  # None: exact dense search; int: IVF probe count

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode == "rerank" and self.k > self.candidate_k:
            raise ValueError("k must not exceed candidate_k in rerank mode")


@dataclass
class RetrievedNeighbor:
    neighbor: Chunk
    continuation: Chunk
    score: float
    source_mode: str

    def pair_tokens(self) -> np.ndarray:
        """The [N;F] token row of length 2m consumed by the neighbor encoder."""
        return np.concatenate([self.neighbor.token_ids, self.continuation.token_ids])


@dataclass
class RetrievalResult:
    query_chunk_id: int
    neighbors: list[RetrievedNeighbor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.neighbors)


@dataclass
class Retriever:
    """Bundle of the immutable stores/indices a retrieval mode needs.

    ``matrix`` rows must be aligned with ``store`` chunk ids. Query chunks are
    embedded with the same hashed provider (``embed_dim``/``embed_seed``)
    unless an explicit query vector is supplied.
    """

    store: ChunkStore
    bm25: InvertedIndex | None = None
    matrix: np.ndarray | None = None
    ivf: IVFIndex | None = None
    embed_dim: int | None = None
    embed_seed: int = 0

    def embed_query(self, chunk: Chunk) -> np.ndarray:
        if self.matrix is None:
            raise ValueError("dense index not built")
        d = self.embed_dim or self.matrix.shape[1]
        return dense_index.embed_hashed(chunk, d, self.embed_seed)

    def dense_topk(self, query_vec: np.ndarray, k: int, exclude_doc: str | None, nprobe: int | None) -> list[tuple[int, float]]:
        """(chunk_id, sq_l2) candidates; exact when nprobe is None."""
        if self.matrix is None:
            raise ValueError("dense index not built")
        params = SearchParams(k=k, nprobe=nprobe or 1, exclude_doc=exclude_doc)
        if nprobe is None:
            return dense_index.exact_search(self.matrix, query_vec, params, self.store.doc_index, self.store.doc_ids)
        if self.ivf is None:
            raise ValueError("IVF index not built")
        return dense_index.approx_search(self.ivf, self.matrix, query_vec, params, self.store.doc_index, self.store.doc_ids)


def _wrap(retriever: Retriever, hits: list[tuple[int, float]], mode: str) -> list[RetrievedNeighbor]:
    out = []
    for cid, score in hits:
        neighbor = retriever.store.chunk(cid)
        out.append(RetrievedNeighbor(neighbor, retriever.store.continuation(cid), score, mode))
    return out


def rerank(candidates: list[tuple[int, float]], bm25: InvertedIndex, query_chunk: Chunk, k: int) -> list[tuple[int, float]]:
    """Rescore a dense candidate pool with BM25 and keep the top k.

    Ties (including the all-zero-overlap case) break by ascending chunk id,
    so the output is deterministic and always a subset of the candidates.
    """
    if not candidates:
        raise ValueError("empty candidate pool")
    terms = query_chunk.unique_terms()
    cids = np.array([cid for cid, _ in candidates], dtype=np.int64)
    scores = bm25_index.accumulate_scores(bm25, terms)[cids]
    order = np.lexsort((cids, -scores))[:k]
    return [(int(cids[i]), float(scores[i])) for i in order]


def retrieve(retriever: Retriever, query: Chunk, cfg: RetrievalConfig, exclude_doc: str | None = None, query_vec: np.ndarray | None = None) -> RetrievalResult:
    """RET(query): the ordered [N;F] pairs for one query chunk.

    ``exclude_doc`` defaults to the query's own document. Dense scores are
    negated squared L2 so ordering is descending-score in every mode.
    """
    if exclude_doc is None:
        exclude_doc = query.doc_id
    if cfg.mode == "bm25":
        if retriever.bm25 is None:
            raise ValueError("bm25 index not built")
        hits = bm25_index.bm25_topk(retriever.bm25, query, cfg.k, exclude_doc)
        return RetrievalResult(query.chunk_id, _wrap(retriever, hits, "bm25"))
    if query_vec is None:
        query_vec = retriever.embed_query(query)
    if cfg.mode == "dense":
        hits = retriever.dense_topk(query_vec, cfg.k, exclude_doc, cfg.nprobe)
        hits = [(cid, -dist) for cid, dist in hits]
        return RetrievalResult(query.chunk_id, _wrap(retriever, hits, "dense"))
    # rerank: dense candidate pool, BM25 ordering
    if retriever.bm25 is None:
        raise ValueError("bm25 index not built")
    pool = retriever.dense_topk(query_vec, cfg.candidate_k, exclude_doc, cfg.nprobe)
    if not pool:
        return RetrievalResult(query.chunk_id, [])
    hits = rerank(pool, retriever.bm25, query, cfg.k)
    return RetrievalResult(query.chunk_id, _wrap(retriever, hits, "rerank"))


def batch_retrieve_for_sequence(retriever: Retriever, chunks: list[Chunk], cfg: RetrievalConfig, exclude_doc: str | None = None, query_vecs: np.ndarray | None = None) -> list[RetrievalResult]:
    """RET(C_u) for u = 1..l-1 of an evaluation sequence.

    Result u-1 is queried from chunk u and consumed when modeling chunk u+1;
    no retrieval is issued from the final chunk. The filter excludes the
    sequence's source document for every query.
    """
    if not chunks:
        return []
    if exclude_doc is None:
        exclude_doc = chunks[0].doc_id
    out = []
    for u, chunk in enumerate(chunks[:-1]):
        vec = query_vecs[u] if query_vecs is not None else None
        out.append(retrieve(retriever, chunk, cfg, exclude_doc=exclude_doc, query_vec=vec))
    return out


def recall_of_bm25_in_dense(retriever: Retriever, query_chunks: list[Chunk], k_bm25: int, k_dense: int, nprobe: int | None = None) -> float:
    """Mean fraction of top-k BM25 neighbors found in the top-K dense list.

    The same-document filter applies to both sides. Queries whose BM25 result
    is empty are skipped; a query with fewer than k_bm25 positive-score
    neighbors is scored against the neighbors it actually has.
    """
    if retriever.bm25 is None or retriever.matrix is None:
        raise ValueError("both indices must be built")
    fractions = []
    for chunk in query_chunks:
        bm_hits = bm25_index.bm25_topk(retriever.bm25, chunk, k_bm25, chunk.doc_id)
        if not bm_hits:
            continue
        dense_hits = retriever.dense_topk(retriever.embed_query(chunk), k_dense, chunk.doc_id, nprobe)
        dense_ids = {cid for cid, _ in dense_hits}
        hit = sum(1 for cid, _ in bm_hits if cid in dense_ids)
        fractions.append(hit / len(bm_hits))
    if not fractions:
        return 0.0
    return float(np.mean(fractions))
