"""Inverted index over chunks with Okapi BM25 scoring and exact top-k search.

Scoring uses the non-negative smoothed idf variant

    idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5))

and the classic saturation/length-normalization term, with one 64-token chunk
playing the role of a document. Query terms are treated as a set (repeats
count once) and PAD never contributes to term frequencies or lengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .binio import FormatError, expect_magic, read_array, read_f64, read_u32, write_array, write_f64, write_magic, write_u32
from .corpus import Chunk, ChunkStore


@dataclass(frozen=True)
class BM25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError("k1 must be >= 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


class InvertedIndex:
    """term id -> posting list, plus the corpus statistics BM25 needs.

    Postings are (chunk_ids, term_freqs) array pairs sorted by ascending
    chunk id. Document-filter lookups go through the attached store's
    doc_index; that mapping is not serialized with the index.
    """

    def __init__(self, params: BM25Params, chunk_lengths: np.ndarray, postings: dict[int, tuple[np.ndarray, np.ndarray]], doc_index: np.ndarray, doc_ids: list[str]):
        self.params = params
        self.chunk_lengths = np.ascontiguousarray(chunk_lengths, dtype=np.int64)
        self.n_chunks = len(self.chunk_lengths)
        if self.n_chunks == 0:
            raise ValueError("empty store")
        self.avgdl = float(self.chunk_lengths.mean(dtype=np.float64))
        self.postings = postings
        self.doc_index = np.ascontiguousarray(doc_index, dtype=np.uint32)
        self.doc_ids = list(doc_ids)
        # k1 * (1 - b + b * len/avgdl), precomputed per chunk
        self._k1_norm = params.k1 * (1.0 - params.b + params.b * self.chunk_lengths / self.avgdl)

    def idf(self, term_id: int) -> float:
        entry = self.postings.get(term_id)
        n_t = len(entry[0]) if entry is not None else 0
        return math.log(1.0 + (self.n_chunks - n_t + 0.5) / (n_t + 0.5))

    def term_freq(self, term_id: int, chunk_id: int) -> int:
        entry = self.postings.get(term_id)
        if entry is None:
            return 0
        cids, tfs = entry
        pos = np.searchsorted(cids, chunk_id)
        if pos < len(cids) and cids[pos] == chunk_id:
            return int(tfs[pos])
        return 0

    def doc_of(self, chunk_id: int) -> str:
        return self.doc_ids[self.doc_index[chunk_id]]


def build_bm25(store: ChunkStore, params: BM25Params = BM25Params()) -> InvertedIndex:
    """Index every chunk of ``store``; deterministic in store order."""
    if len(store) == 0:
        raise ValueError("empty store")
    lengths = store.chunk_lengths()
    by_term: dict[int, tuple[list[int], list[int]]] = {}
    for cid in range(len(store)):
        row = store.tokens[cid, : int(lengths[cid])]
        terms, counts = np.unique(row, return_counts=True)
        for t, c in zip(terms.tolist(), counts.tolist()):
            lists = by_term.setdefault(t, ([], []))
            lists[0].append(cid)
            lists[1].append(c)
    postings = {
        t: (np.array(cids, dtype=np.uint32), np.array(tfs, dtype=np.uint32))
        for t, (cids, tfs) in sorted(by_term.items())
    }
    return InvertedIndex(params, lengths, postings, store.doc_index, store.doc_ids)


def bm25_score(index: InvertedIndex, query_terms: Iterable[int], chunk_id: int) -> float:
    """BM25 score of one chunk for a set of query terms.

    Terms absent from the chunk or from the index contribute zero. Summation
    runs over sorted unique terms in float64, matching the accumulation order
    of ``bm25_topk`` bit for bit.
    """
    if not 0 <= chunk_id < index.n_chunks:
        raise ValueError(f"unknown chunk {chunk_id}")
    k1 = index.params.k1
    norm = float(index._k1_norm[chunk_id])
    score = 0.0
    for t in sorted(set(int(t) for t in query_terms)):
        tf = index.term_freq(t, chunk_id)
        if tf == 0:
            continue
        score += index.idf(t) * (tf * (k1 + 1.0)) / (tf + norm)
    return score


def accumulate_scores(index: InvertedIndex, query_terms: Iterable[int]) -> np.ndarray:
    """Dense score vector over all chunks, term-at-a-time over posting lists."""
    k1 = index.params.k1
    scores = np.zeros(index.n_chunks, dtype=np.float64)
    for t in sorted(set(int(t) for t in query_terms)):
        entry = index.postings.get(t)
        if entry is None:
            continue
        cids, tfs = entry
        tf = tfs.astype(np.float64)
        scores[cids] += index.idf(t) * (tf * (k1 + 1.0)) / (tf + index._k1_norm[cids])
    return scores


def _top_k_by_score(scores: np.ndarray, candidate_ids: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k of the candidates by (descending score, ascending chunk id)."""
    order = np.lexsort((candidate_ids, -scores[candidate_ids]))[:k]
    picked = candidate_ids[order]
    return [(int(cid), float(scores[cid])) for cid in picked]


def bm25_topk(index: InvertedIndex, query_chunk: Chunk, k: int, exclude_doc: str | None = None) -> list[tuple[int, float]]:
    """Exact k best chunks for a query chunk's unique non-PAD terms.

    Only chunks containing at least one query term are candidates, so an
    all-PAD query returns an empty list and fewer than k results means the
    positive-score candidates ran out. Chunks of ``exclude_doc`` are dropped
    before truncation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = accumulate_scores(index, query_chunk.unique_terms())
    candidates = np.flatnonzero(scores > 0.0)
    if exclude_doc is not None and exclude_doc in index.doc_ids:
        di = index.doc_ids.index(exclude_doc)
        candidates = candidates[index.doc_index[candidates] != di]
    return _top_k_by_score(scores, candidates, k)


def bm25_topk_terms(index: InvertedIndex, query_terms: Sequence[int], k: int, exclude_doc: str | None = None) -> list[tuple[int, float]]:
    """``bm25_topk`` for a bare term set (used by the CLI's --query-text path)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = accumulate_scores(index, query_terms)
    candidates = np.flatnonzero(scores > 0.0)
    if exclude_doc is not None and exclude_doc in index.doc_ids:
        di = index.doc_ids.index(exclude_doc)
        candidates = candidates[index.doc_index[candidates] != di]
    return _top_k_by_score(scores, candidates, k)


# -- persistence (BM25) -------------------------------------------------------


def save_bm25(index: InvertedIndex, path: str) -> None:
    """Write the index: params, stats, lengths, delta-encoded posting lists."""
    with open(path, "wb") as fh:
        write_magic(fh, b"BM25")
        write_f64(fh, index.params.k1)
        write_f64(fh, index.params.b)
        write_u32(fh, index.n_chunks)
        write_f64(fh, index.avgdl)
        write_array(fh, index.chunk_lengths, "u4")
        write_u32(fh, len(index.postings))
        for t in sorted(index.postings):
            cids, tfs = index.postings[t]
            write_u32(fh, t)
            write_u32(fh, len(cids))
            deltas = np.diff(cids.astype(np.int64), prepend=0).astype(np.uint32)
            interleaved = np.empty((len(cids), 2), dtype=np.uint32)
            interleaved[:, 0] = deltas
            interleaved[:, 1] = tfs
            write_array(fh, interleaved, "u4")


def load_bm25(path: str, store: ChunkStore) -> InvertedIndex:
    """Read an index back and re-attach document provenance from ``store``."""
    with open(path, "rb") as fh:
        expect_magic(fh, b"BM25")
        k1 = read_f64(fh)
        b = read_f64(fh)
        n = read_u32(fh)
        avgdl = read_f64(fh)
        lengths = read_array(fh, n, "u4").astype(np.int64)
        n_terms = read_u32(fh)
        postings: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for _ in range(n_terms):
            t = read_u32(fh)
            df = read_u32(fh)
            raw = read_array(fh, df * 2, "u4").reshape(df, 2)
            cids = np.cumsum(raw[:, 0].astype(np.int64)).astype(np.uint32)
            postings[t] = (cids, raw[:, 1].copy())
        if fh.read(1):
            raise FormatError("trailing bytes after BM25 payload")
    if n != len(store):
        raise FormatError(f"index has {n} chunks but store has {len(store)}")
    index = InvertedIndex(BM25Params(k1, b), lengths, postings, store.doc_index, store.doc_ids)
    if abs(index.avgdl - avgdl) > 1e-9:
        raise FormatError("stored avgdl disagrees with chunk lengths")
    return index
