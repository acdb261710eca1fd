"""Dense chunk representations with exact and inverted-file (IVF) L2 search.

The built-in embedder is a signed-hash bag of unique tokens: cheap,
deterministic, and vocabulary-free, standing in for an external sentence
encoder. Externally computed vectors enter through the EMB1 file format.
Search is squared L2 with 64-bit accumulation over 32-bit inputs, so the
exact path matches a brute-force oracle bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import FormatError, expect_magic, read_array, read_u32, read_u64, write_array, write_magic, write_u32, write_u64
from .corpus import Chunk, ChunkStore

KMEANS_ITERS = 25


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; stable across platforms, vectorized over uint64."""
    z = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def embed_hashed(chunk: Chunk, d: int, seed: int = 0) -> np.ndarray:
    """Signed-hash bag-of-tokens embedding, L2-normalized.

    Each unique non-PAD token id is hashed (with ``seed``) to one coordinate
    and a sign; an all-PAD chunk maps to the zero vector. Token order and
    multiplicity inside the chunk do not matter.
    """
    if d < 8:
        raise ValueError("embedding dimension must be >= 8")
    vec = np.zeros(d, dtype=np.float32)
    terms = chunk.unique_terms()
    if len(terms) == 0:
        return vec
    h = _splitmix64(terms.astype(np.uint64) + (np.uint64(seed) << np.uint64(32)))
    coords = (h % np.uint64(d)).astype(np.int64)
    signs = np.where((h >> np.uint64(61)) & np.uint64(1), np.float32(1.0), np.float32(-1.0))
    np.add.at(vec, coords, signs)
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if norm > 0.0:
        vec = (vec / norm).astype(np.float32)
    return vec


def embed_store(store: ChunkStore, d: int, seed: int = 0) -> np.ndarray:
    """Hashed embeddings for every chunk, row i = chunk i. Shape (n, d) f32."""
    out = np.empty((len(store), d), dtype=np.float32)
    for cid in range(len(store)):
        out[cid] = embed_hashed(store.chunk(cid), d, seed)
    return out


# -- EMB1 embedding file -------------------------------------------------------


def save_embeddings(matrix: np.ndarray, path: str) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    with open(path, "wb") as fh:
        write_magic(fh, b"EMB1")
        write_u32(fh, matrix.shape[0])
        write_u32(fh, matrix.shape[1])
        write_array(fh, matrix, "f4")


def load_embeddings(path: str, expected_rows: int | None = None) -> np.ndarray:
    """Read an EMB1 file; row count may be checked against an attached store."""
    with open(path, "rb") as fh:
        expect_magic(fh, b"EMB1")
        n = read_u32(fh)
        d = read_u32(fh)
        flat = read_array(fh, n * d, "f4")
        if fh.read(1):
            raise FormatError("trailing bytes after EMB1 payload")
    matrix = flat.reshape(n, d)
    if not np.all(np.isfinite(matrix)):
        raise FormatError("non-finite values in embedding payload")
    if expected_rows is not None and n != expected_rows:
        raise FormatError(f"embedding matrix has {n} rows but store has {expected_rows}")
    return matrix


# -- exact search --------------------------------------------------------------


@dataclass
class SearchParams:
    k: int
    nprobe: int = 1
    exclude_doc: str | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.nprobe < 1:
            raise ValueError("nprobe must be >= 1")


def squared_l2(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Per-row squared L2 distance to ``query``, accumulated in float64."""
    diff = matrix.astype(np.float64) - np.asarray(query, dtype=np.float64)
    return np.sum(diff * diff, axis=1)


def _order_and_filter(dists: np.ndarray, ids: np.ndarray, params: SearchParams, doc_index: np.ndarray | None, doc_ids: list[str] | None) -> list[tuple[int, float]]:
    if params.exclude_doc is not None and doc_ids is not None and params.exclude_doc in doc_ids:
        di = doc_ids.index(params.exclude_doc)
        keep = doc_index[ids] != di
        ids, dists = ids[keep], dists[keep]
    order = np.lexsort((ids, dists))[: params.k]
    return [(int(ids[i]), float(dists[i])) for i in order]


def exact_search(matrix: np.ndarray, query: np.ndarray, params: SearchParams, doc_index: np.ndarray | None = None, doc_ids: list[str] | None = None) -> list[tuple[int, float]]:
    """k nearest rows by squared L2, ascending distance, ties by ascending id."""
    if query.shape[-1] != matrix.shape[1]:
        raise ValueError("query dimension mismatch")
    dists = squared_l2(matrix, query)
    return _order_and_filter(dists, np.arange(len(matrix)), params, doc_index, doc_ids)


# -- IVF-flat ------------------------------------------------------------------


class IVFIndex:
    """Coarse k-means partition of the row ids; queries scan nprobe lists."""

    def __init__(self, centroids: np.ndarray, lists: list[np.ndarray], seed: int):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float64)
        self.lists = [np.ascontiguousarray(l, dtype=np.uint32) for l in lists]
        self.seed = int(seed)
        if len(self.lists) != len(self.centroids):
            raise ValueError("one member list per centroid required")

    @property
    def nlist(self) -> int:
        return len(self.lists)

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def _assign(matrix64: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row (squared L2; ties to the lowest index).

    Uses the same expand-form float64 arithmetic as ``squared_l2`` so the
    assignment invariant is checkable bit for bit.
    """
    dists = np.empty((len(matrix64), len(centroids)), dtype=np.float64)
    for ci, c in enumerate(centroids):
        diff = matrix64 - c
        dists[:, ci] = np.sum(diff * diff, axis=1)
    return np.argmin(dists, axis=1)


def build_ivf(matrix: np.ndarray, nlist: int, seed: int = 0) -> IVFIndex:
    """k-means coarse quantizer (fixed 25 iterations, seeded init).

    Initialization samples ``nlist`` distinct rows; empty clusters are
    re-seeded from the point farthest from its current centroid. The final
    assignment pass guarantees every id sits in the list of its nearest
    centroid.
    """
    n = len(matrix)
    if not 1 <= nlist <= n:
        raise ValueError(f"nlist must be in [1, {n}]")
    m64 = matrix.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = m64[np.sort(rng.choice(n, size=nlist, replace=False))].copy()
    for _ in range(KMEANS_ITERS):
        assign = _assign(m64, centroids)
        dist_to_own = np.sum((m64 - centroids[assign]) ** 2, axis=1)
        counts = np.bincount(assign, minlength=nlist)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, m64)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken: set[int] = set()
        for ci in np.flatnonzero(~nonempty):
            far_order = np.argsort(-dist_to_own, kind="stable")
            for cand in far_order:
                if int(cand) not in taken:
                    centroids[ci] = m64[cand]
                    taken.add(int(cand))
                    break
    assign = _assign(m64, centroids)
    lists = [np.flatnonzero(assign == ci).astype(np.uint32) for ci in range(nlist)]
    return IVFIndex(centroids, lists, seed)


def approx_search(ivf: IVFIndex, matrix: np.ndarray, query: np.ndarray, params: SearchParams, doc_index: np.ndarray | None = None, doc_ids: list[str] | None = None) -> list[tuple[int, float]]:
    """Exact scan restricted to the nprobe nearest centroid lists."""
    if params.nprobe > ivf.nlist:
        raise ValueError("nprobe exceeds nlist")
    q64 = np.asarray(query, dtype=np.float64)
    cd = np.sum((ivf.centroids - q64) ** 2, axis=1)
    probe = np.lexsort((np.arange(ivf.nlist), cd))[: params.nprobe]
    ids = np.concatenate([ivf.lists[ci] for ci in probe]) if len(probe) else np.zeros(0, dtype=np.uint32)
    ids = np.sort(ids).astype(np.int64)
    if len(ids) == 0:
        return []
    dists = squared_l2(matrix[ids], query)
    return _order_and_filter(dists, ids, params, doc_index, doc_ids)


# -- IVF persistence (IVF1) ----------------------------------------------------


def save_ivf(ivf: IVFIndex, path: str) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, b"IVF1")
        write_u32(fh, ivf.nlist)
        write_u32(fh, ivf.d)
        write_u64(fh, ivf.seed)
        write_array(fh, ivf.centroids, "f8")
        for members in ivf.lists:
            write_u32(fh, len(members))
            write_array(fh, members, "u4")


def load_ivf(path: str) -> IVFIndex:
    with open(path, "rb") as fh:
        expect_magic(fh, b"IVF1")
        nlist = read_u32(fh)
        d = read_u32(fh)
        seed = read_u64(fh)
        centroids = read_array(fh, nlist * d, "f8").reshape(nlist, d)
        lists = []
        for _ in range(nlist):
            count = read_u32(fh)
            lists.append(read_array(fh, count, "u4"))
        if fh.read(1):
            raise FormatError("trailing bytes after IVF1 payload")
    return IVFIndex(centroids, lists, seed)
