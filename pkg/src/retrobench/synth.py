"""Synthetic corpora for controlled retrieval experiments.

The copy-task corpus is built from twin-document families: each family has a
base token stream and two members, the original and a twin with a fraction of
tokens resampled. Every chunk mixes a small set of very common filler tokens
(present nearly everywhere, so their idf is tiny) with rare content tokens
drawn from a per-family, per-ordinal sub-vocabulary. Lexical retrieval can
therefore isolate the aligned twin chunk through its rare terms, while
equal-weight bag-of-token embeddings see a much smaller margin over
filler-sharing distractors. Holding some families out of training but keeping
them in the retrieval store yields evaluation documents whose only usable
signal is a twin under a different doc_id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Document


@dataclass
class CopyTaskSpec:
    n_families: int = 150
    n_eval_families: int = 40
    min_chunks: int = 4
    max_chunks: int = 8
    m: int = 64
    overlap: float = 0.9
    n_filler: int = 24
    content_pool: int = 600
    content_per_ordinal: int = 12
    p_filler: float = 0.45
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.overlap <= 1:
            raise ValueError("overlap must be in (0, 1]")
        if self.n_eval_families >= self.n_families:
            raise ValueError("need at least one training family")


@dataclass
class CopyTaskCorpus:
    documents: list[Document]
    train_doc_ids: list[str]
    eval_doc_ids: list[str]
    spec: CopyTaskSpec


def _family_tokens(rng: np.random.Generator, spec: CopyTaskSpec, n_chunks: int) -> list[str]:
    tokens: list[str] = []
    for ordinal in range(n_chunks):
        sub_vocab = rng.choice(spec.content_pool, size=spec.content_per_ordinal, replace=False)
        for _ in range(spec.m):
            if rng.random() < spec.p_filler:
                tokens.append(f"f{rng.integers(spec.n_filler):02d}")
            else:
                tokens.append(f"w{sub_vocab[rng.integers(spec.content_per_ordinal)]:03d}")
    return tokens


def _perturb(rng: np.random.Generator, spec: CopyTaskSpec, tokens: list[str]) -> list[str]:
    out = list(tokens)
    for i in range(len(out)):
        if rng.random() >= spec.overlap:
            out[i] = f"w{rng.integers(spec.content_pool):03d}"
    return out


def make_copy_corpus(spec: CopyTaskSpec = CopyTaskSpec()) -> CopyTaskCorpus:
    """Build the twin-family corpus; deterministic in the spec's seed.

    The last ``n_eval_families`` families are held out of the training pool;
    their "b" twins form the evaluation set. All documents, held-out ones
    included, belong in the retrieval store, so the same-document filter is
    what keeps a query from retrieving itself.
    """
    rng = np.random.default_rng(spec.seed)
    documents: list[Document] = []
    train_ids: list[str] = []
    eval_ids: list[str] = []
    eval_start = spec.n_families - spec.n_eval_families
    for fam in range(spec.n_families):
        n_chunks = int(rng.integers(spec.min_chunks, spec.max_chunks + 1))
        base = _family_tokens(rng, spec, n_chunks)
        twin = _perturb(rng, spec, base)
        doc_a = Document(f"fam{fam:03d}a", " ".join(base))
        doc_b = Document(f"fam{fam:03d}b", " ".join(twin))
        documents += [doc_a, doc_b]
        if fam < eval_start:
            train_ids += [doc_a.doc_id, doc_b.doc_id]
        else:
            eval_ids.append(doc_b.doc_id)
    return CopyTaskCorpus(documents, train_ids, eval_ids, spec)


def write_jsonl(corpus: CopyTaskCorpus, path: str) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            fh.write(json.dumps({"id": doc.doc_id, "text": doc.text}) + "\n")
