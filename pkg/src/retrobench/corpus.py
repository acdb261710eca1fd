"""Tokenization, vocabulary construction, and chunked corpus storage.

A corpus is a set of documents; every document is tokenized and cut into
fixed-size chunks of ``m`` token ids (default 64). Chunks never straddle
document boundaries; the final chunk of a document is right-padded with PAD.
The chunk is the unit everything downstream operates on: indexing, retrieval,
and per-chunk perplexity evaluation.

Corpus input is JSON-lines with one object per line, either
``{"id": ..., "text": ...}`` (tokenized here) or ``{"id": ..., "tokens":
[...]}`` for corpora tokenized by an external tool. The built-in tokenizer is
a deterministic rule: lowercase, split on Unicode whitespace, then split off
leading/trailing non-alphanumeric characters as individual tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .binio import FormatError, expect_magic, read_array, read_str, read_u32, write_array, write_magic, write_str, write_u32

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

DEFAULT_VOCAB_SIZE = 32_000
DEFAULT_CHUNK_SIZE = 64


@dataclass
class Document:
    """A raw input document. ``doc_id`` must be unique within a corpus."""

    doc_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"document {self.doc_id!r}: text empty after trimming")


def surface_tokens(text: str) -> list[str]:
    """Split ``text`` into surface tokens.

    Lowercase, split on Unicode whitespace, then peel leading/trailing
    non-alphanumeric characters off each piece as separate tokens. The rule
    is total: every non-whitespace character lands in exactly one token.
    """
    out: list[str] = []
    for piece in text.lower().split():
        i, j = 0, len(piece)
        lead: list[str] = []
        trail: list[str] = []
        while i < j and not piece[i].isalnum():
            lead.append(piece[i])
            i += 1
        while j > i and not piece[j - 1].isalnum():
            trail.append(piece[j - 1])
            j -= 1
        out.extend(lead)
        if i < j:
            out.append(piece[i:j])
        out.extend(reversed(trail))
    return out


@dataclass
class Vocabulary:
    """Bijective token<->id map with reserved PAD=0 and UNK=1.

    Ids are dense in ``[0, size)``. Reserved tokens use surface forms the
    tokenizer can never produce (angle brackets are always split off), so
    they cannot collide with corpus tokens.
    """

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must reserve PAD=0 and UNK=1")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def build_vocabulary(corpus: Iterable[Document], max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Build the vocabulary of the ``max_size - 2`` most frequent surface tokens.

    Frequency ties break lexicographically ascending, so the result is a
    deterministic function of the corpus. Raises on an empty corpus.
    """
    if max_size < 2:
        raise ValueError("max_size must be at least 2 (PAD and UNK are reserved)")
    counts: dict[str, int] = {}
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        for tok in surface_tokens(doc.text):
            counts[tok] = counts.get(tok, 0) + 1
    if n_docs == 0:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 2]]
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Map text to token ids; out-of-vocabulary tokens become UNK, never PAD."""
    return [vocab.id_of(tok) for tok in surface_tokens(text)]


@dataclass(eq=False)
class Chunk:
    """A fixed-length window of ``m`` token ids with document provenance.

    ``pad_count`` trailing positions hold PAD. Stored chunks always satisfy
    ``pad_count < m``; the synthetic all-PAD continuation chunk returned for
    document-final chunks is the one exception and carries ``chunk_id = -1``.
    """

    chunk_id: int
    doc_id: str
    ordinal: int
    token_ids: np.ndarray
    pad_count: int

    def __len__(self) -> int:
        return len(self.token_ids)

    def non_pad_tokens(self) -> np.ndarray:
        n = len(self.token_ids) - self.pad_count
        return self.token_ids[:n]

    def unique_terms(self) -> np.ndarray:
        """Unique non-PAD token ids, ascending."""
        return np.unique(self.non_pad_tokens())


def chunk_tokens(token_ids: Sequence[int], doc_id: str, m: int) -> list[Chunk]:
    """Cut a token sequence into ceil(len/m) chunks, right-padding the last."""
    if m < 2:
        raise ValueError("chunk size m must be >= 2")
    ids = np.asarray(token_ids, dtype=np.uint32)
    if ids.size and int(ids.min()) == PAD_ID:
        raise ValueError("PAD id 0 is reserved and may not appear in input tokens")
    chunks: list[Chunk] = []
    for ordinal, start in enumerate(range(0, len(ids), m)):
        window = ids[start : start + m]
        pad = m - len(window)
        if pad:
            window = np.concatenate([window, np.zeros(pad, dtype=np.uint32)])
        chunks.append(Chunk(-1, doc_id, ordinal, window, pad))
    return chunks


def chunk_document(doc: Document, vocab: Vocabulary, m: int = DEFAULT_CHUNK_SIZE) -> list[Chunk]:
    """Tokenize ``doc`` and split it into chunks (zero chunks if no tokens)."""
    return chunk_tokens(tokenize(doc.text, vocab), doc.doc_id, m)


class ChunkStore:
    """Immutable ordered collection of chunks with doc-id provenance.

    Chunk ids are dense ``0..n-1`` in corpus order. Token rows live in one
    ``(n, m)`` uint32 matrix so index builders can work columnwise.
    """

    def __init__(self, m: int, tokens: np.ndarray, doc_index: np.ndarray, ordinals: np.ndarray, pad_counts: np.ndarray, doc_ids: list[str]):
        self.m = int(m)
        self.tokens = np.ascontiguousarray(tokens, dtype=np.uint32)
        self.doc_index = np.ascontiguousarray(doc_index, dtype=np.uint32)
        self.ordinals = np.ascontiguousarray(ordinals, dtype=np.uint32)
        self.pad_counts = np.ascontiguousarray(pad_counts, dtype=np.uint32)
        self.doc_ids = list(doc_ids)
        self._validate()
        self.doc_ranges: dict[str, tuple[int, int]] = {}
        for cid, di in enumerate(self.doc_index):
            did = self.doc_ids[di]
            if did not in self.doc_ranges:
                self.doc_ranges[did] = (cid, cid + 1)
            else:
                lo, hi = self.doc_ranges[did]
                if cid != hi:
                    raise ValueError(f"chunks of document {did!r} are not contiguous")
                self.doc_ranges[did] = (lo, cid + 1)

    def _validate(self) -> None:
        n = len(self.tokens)
        if self.tokens.ndim != 2 or self.tokens.shape[1] != self.m:
            raise ValueError("token matrix must be (n, m)")
        for arr in (self.doc_index, self.ordinals, self.pad_counts):
            if len(arr) != n:
                raise ValueError("per-chunk arrays must share length")
        if n and int(self.pad_counts.max()) >= self.m:
            raise ValueError("stored chunks must have pad_count < m")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("duplicate doc_id")

    @classmethod
    def from_documents(cls, docs: Iterable[Document], vocab: Vocabulary, m: int = DEFAULT_CHUNK_SIZE) -> "ChunkStore":
        return cls.from_token_docs(((d.doc_id, tokenize(d.text, vocab)) for d in docs), m)

    @classmethod
    def from_token_docs(cls, docs: Iterable[tuple[str, Sequence[int]]], m: int = DEFAULT_CHUNK_SIZE) -> "ChunkStore":
        rows: list[np.ndarray] = []
        doc_index: list[int] = []
        ordinals: list[int] = []
        pads: list[int] = []
        doc_ids: list[str] = []
        seen: set[str] = set()
        for doc_id, token_ids in docs:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r}")
            seen.add(doc_id)
            chunks = chunk_tokens(token_ids, doc_id, m)
            if not chunks:
                continue
            di = len(doc_ids)
            doc_ids.append(doc_id)
            for c in chunks:
                rows.append(c.token_ids)
                doc_index.append(di)
                ordinals.append(c.ordinal)
                pads.append(c.pad_count)
        tokens = np.vstack(rows) if rows else np.zeros((0, m), dtype=np.uint32)
        return cls(m, tokens, np.array(doc_index, dtype=np.uint32), np.array(ordinals, dtype=np.uint32), np.array(pads, dtype=np.uint32), doc_ids)

    def __len__(self) -> int:
        return len(self.tokens)

    def chunk(self, chunk_id: int) -> Chunk:
        if not 0 <= chunk_id < len(self):
            raise ValueError(f"unknown chunk {chunk_id}")
        return Chunk(
            chunk_id,
            self.doc_ids[self.doc_index[chunk_id]],
            int(self.ordinals[chunk_id]),
            self.tokens[chunk_id],
            int(self.pad_counts[chunk_id]),
        )

    def __iter__(self) -> Iterator[Chunk]:
        for cid in range(len(self)):
            yield self.chunk(cid)

    def doc_of(self, chunk_id: int) -> str:
        if not 0 <= chunk_id < len(self):
            raise ValueError(f"unknown chunk {chunk_id}")
        return self.doc_ids[self.doc_index[chunk_id]]

    def chunk_lengths(self) -> np.ndarray:
        """Non-PAD token count per chunk."""
        return (self.m - self.pad_counts).astype(np.int64)

    def doc_chunk_ids(self, doc_id: str) -> range:
        lo, hi = self.doc_ranges[doc_id]
        return range(lo, hi)

    def continuation(self, chunk_id: int) -> Chunk:
        """The next chunk of the same document.

        For a document-final chunk the continuation is a synthetic all-PAD
        chunk (same doc_id, pad_count == m, chunk_id == -1); downstream
        attention masks remove it entirely.
        """
        if not 0 <= chunk_id < len(self):
            raise ValueError(f"unknown chunk {chunk_id}")
        nxt = chunk_id + 1
        if nxt < len(self) and self.doc_index[nxt] == self.doc_index[chunk_id]:
            return self.chunk(nxt)
        return Chunk(
            -1,
            self.doc_ids[self.doc_index[chunk_id]],
            int(self.ordinals[chunk_id]) + 1,
            np.zeros(self.m, dtype=np.uint32),
            self.m,
        )

    def max_token_id(self) -> int:
        return int(self.tokens.max(initial=0))

    # -- persistence (CHK1) -------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            write_magic(fh, b"CHK1")
            write_u32(fh, self.m)
            write_u32(fh, len(self))
            per_chunk = np.empty((len(self), 3 + self.m), dtype=np.uint32)
            per_chunk[:, 0] = self.doc_index
            per_chunk[:, 1] = self.ordinals
            per_chunk[:, 2] = self.pad_counts
            per_chunk[:, 3:] = self.tokens
            write_array(fh, per_chunk, "u4")
            write_u32(fh, len(self.doc_ids))
            for did in self.doc_ids:
                write_str(fh, did)

    @classmethod
    def load(cls, path: str) -> "ChunkStore":
        with open(path, "rb") as fh:
            expect_magic(fh, b"CHK1")
            m = read_u32(fh)
            n = read_u32(fh)
            per_chunk = read_array(fh, n * (3 + m), "u4").reshape(n, 3 + m)
            n_docs = read_u32(fh)
            doc_ids = [read_str(fh) for _ in range(n_docs)]
            if fh.read(1):
                raise FormatError("trailing bytes after CHK1 payload")
        return cls(m, per_chunk[:, 3:], per_chunk[:, 0], per_chunk[:, 1], per_chunk[:, 2], doc_ids)


def continuation(store: ChunkStore, chunk_id: int) -> Chunk:
    return store.continuation(chunk_id)


# -- JSON-lines ingestion ----------------------------------------------------


def read_corpus_jsonl(path: str) -> tuple[list[Document], list[tuple[str, list[int]]]]:
    """Read a JSONL corpus; returns (text documents, pre-tokenized documents).

    Exactly one of the two lists is non-empty; mixing forms in one file is
    rejected.
    """
    text_docs: list[Document] = []
    token_docs: list[tuple[str, list[int]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "id" not in obj:
                raise ValueError(f"{path}:{lineno}: missing 'id'")
            if "text" in obj:
                text_docs.append(Document(str(obj["id"]), str(obj["text"])))
            elif "tokens" in obj:
                toks = obj["tokens"]
                if not all(isinstance(t, int) and t > 0 for t in toks):
                    raise ValueError(f"{path}:{lineno}: tokens must be positive integers (0 is PAD)")
                token_docs.append((str(obj["id"]), toks))
            else:
                raise ValueError(f"{path}:{lineno}: need 'text' or 'tokens'")
    if text_docs and token_docs:
        raise ValueError(f"{path}: cannot mix 'text' and 'tokens' records")
    return text_docs, token_docs


def save_vocabulary(vocab: Vocabulary | None, path: str, external_size: int | None = None) -> None:
    """Persist a vocabulary; external (pre-tokenized) corpora record only a size."""
    if vocab is not None:
        payload = {"type": "surface", "tokens": vocab.id_to_token}
    else:
        if external_size is None:
            raise ValueError("external vocabulary needs a size")
        payload = {"type": "external", "vocab_size": external_size}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False)


def load_vocabulary(path: str) -> tuple[Vocabulary | None, int]:
    """Load a vocabulary file; returns (vocab or None, vocab size)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("type") == "surface":
        vocab = Vocabulary(payload["tokens"])
        return vocab, vocab.size
    if payload.get("type") == "external":
        return None, int(payload["vocab_size"])
    raise ValueError(f"{path}: unrecognized vocabulary file")
