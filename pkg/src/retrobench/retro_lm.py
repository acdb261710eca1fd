"""Toy retrieval-conditioned autoregressive transformer, in plain numpy.

The decoder is a pre-norm causal transformer with learnable relative position
biases (one bucket per unique causal offset, clipped at the table size).
Selected decoder layers carry a chunked cross-attention (CCA) block: with
chunk size m and 0-indexed positions, the states at positions u*m-1 through
(u+1)*m-2 attend jointly to the encodings of the k retrieved [N;F] pairs for
chunk u. Positions 0..m-2 attend to nothing and pass through unchanged, which
keeps the first chunk's likelihood retrieval-free and preserves
autoregressivity. Retrieval-off evaluation runs the same parameters with
every CCA block skipped.

Neighbor pairs are encoded by a small bidirectional transformer with
symmetric relative biases; PAD positions are masked out of all attention.
Everything here is written with explicit forward/backward passes so the
analytic gradients can be validated against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .binio import FormatError, expect_magic, read_array, read_str, read_u32, write_array, write_magic, write_str, write_u32
from .corpus import PAD_ID, ChunkStore
from .retrieval import RetrievalConfig, RetrievalResult, Retriever, batch_retrieve_for_sequence

NEG_INF = -np.inf
# plain python floats: numpy scalars would silently promote f32 activations
_GELU_C0 = float(np.sqrt(2.0 / np.pi))
_GELU_C1 = 0.044715


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_decoder_layers: int = 4
    n_encoder_layers: int = 1
    cca_layers: tuple[int, ...] = (2, 3)
    m: int = 64
    k: int = 2
    max_seq_len: int = 512
    rel_buckets: int = 0  # 0: one bucket per causal offset (= max_seq_len)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.m < 2:
            raise ValueError("chunk size m must be >= 2")
        if self.max_seq_len % self.m:
            raise ValueError("m must divide max_seq_len")
        if any(not 0 <= i < self.n_decoder_layers for i in self.cca_layers):
            raise ValueError("cca_layers out of range")
        if self.rel_buckets <= 0:
            self.rel_buckets = self.max_seq_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def enc_buckets(self) -> int:
        # one bucket per symmetric offset over a 2m-long pair
        return 4 * self.m - 1

    def to_json(self) -> str:
        d = asdict(self)
        d["cca_layers"] = list(self.cca_layers)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["cca_layers"] = tuple(d["cca_layers"])
        return cls(**d)


@dataclass
class EvalRecord:
    """Per-chunk evaluation row: perplexity with retrieval on/off plus the
    top-1 neighbor's score and unigram overlap with the chunk it informs."""

    sequence_id: str
    u: int
    ppl_on: float | None
    ppl_off: float | None
    delta_ppl: float | None
    neighbor_score: float | None
    token_overlap: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalRecord":
        return cls(**json.loads(text))


# -- parameters ---------------------------------------------------------------


def init_params(config: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded parameter initialization; names are stable across runs."""
    rng = np.random.default_rng(config.seed)
    d, h = config.d_model, config.n_heads
    params: dict[str, np.ndarray] = {}

    def norm(name: str, *shape: int) -> None:
        params[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)

    def zeros(name: str, *shape: int) -> None:
        params[name] = np.zeros(shape, dtype=dtype)

    def ones(name: str, *shape: int) -> None:
        params[name] = np.ones(shape, dtype=dtype)

    norm("tok_embed", config.vocab_size, d)
    norm("enc_embed", config.vocab_size, d)
    for i in range(config.n_decoder_layers):
        p = f"dec{i}"
        ones(f"{p}.sa.ln.g", d)
        zeros(f"{p}.sa.ln.b", d)
        for w in ("wq", "wk", "wv", "wo"):
            norm(f"{p}.sa.{w}", d, d)
        zeros(f"{p}.sa.bias", config.rel_buckets, h)
        if i in config.cca_layers:
            ones(f"{p}.cca.ln.g", d)
            zeros(f"{p}.cca.ln.b", d)
            for w in ("wq", "wk", "wv", "wo"):
                norm(f"{p}.cca.{w}", d, d)
        ones(f"{p}.ffn.ln.g", d)
        zeros(f"{p}.ffn.ln.b", d)
        norm(f"{p}.ffn.w1", d, 4 * d)
        zeros(f"{p}.ffn.b1", 4 * d)
        norm(f"{p}.ffn.w2", 4 * d, d)
        zeros(f"{p}.ffn.b2", d)
    for j in range(config.n_encoder_layers):
        p = f"enc{j}"
        ones(f"{p}.sa.ln.g", d)
        zeros(f"{p}.sa.ln.b", d)
        for w in ("wq", "wk", "wv", "wo"):
            norm(f"{p}.sa.{w}", d, d)
        zeros(f"{p}.sa.bias", config.enc_buckets, h)
        ones(f"{p}.ffn.ln.g", d)
        zeros(f"{p}.ffn.ln.b", d)
        norm(f"{p}.ffn.w1", d, 4 * d)
        zeros(f"{p}.ffn.b1", 4 * d)
        norm(f"{p}.ffn.w2", 4 * d, d)
        zeros(f"{p}.ffn.b2", d)
    ones("enc.lnf.g", d)
    zeros("enc.lnf.b", d)
    ones("dec.lnf.g", d)
    zeros("dec.lnf.b", d)
    norm("out.w", d, config.vocab_size)
    zeros("out.b", config.vocab_size)
    return params


def cca_param_names(config: ModelConfig) -> list[str]:
    """Parameters used only when retrieval is on (CCA blocks + encoder)."""
    names = ["enc_embed", "enc.lnf.g", "enc.lnf.b"]
    for i in config.cca_layers:
        names += [f"dec{i}.cca.ln.g", f"dec{i}.cca.ln.b"] + [f"dec{i}.cca.{w}" for w in ("wq", "wk", "wv", "wo")]
    for j in range(config.n_encoder_layers):
        p = f"enc{j}"
        names += [f"{p}.sa.ln.g", f"{p}.sa.ln.b", f"{p}.sa.bias"]
        names += [f"{p}.sa.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"{p}.ffn.ln.g", f"{p}.ffn.ln.b", f"{p}.ffn.w1", f"{p}.ffn.b1", f"{p}.ffn.w2", f"{p}.ffn.b2"]
    return names


# -- primitive layers ----------------------------------------------------------


def _layer_norm_fwd(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(x):
    # tanh-approximation gelu; smooth, so finite differences stay honest
    inner = x * x
    inner *= _GELU_C1
    inner += 1.0
    inner *= x
    inner *= _GELU_C0
    t = np.tanh(inner, out=inner)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    # d/dx = 0.5(1+t) + 0.5 x (1-t^2) c0 (1 + 3 c1 x^2)
    tt = t * t
    np.subtract(1.0, tt, out=tt)
    g = x * x
    g *= 3.0 * _GELU_C1
    g += 1.0
    g *= tt
    g *= x
    g *= 0.5 * _GELU_C0
    np.multiply(t, 0.5, out=tt)
    g += tt
    g += 0.5
    g *= dy
    return g


def _scatter_add_rows(table: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """table[ids] += rows with duplicate ids, via sort + segmented reduce."""
    ids = ids.ravel()
    rows = rows.reshape(len(ids), -1)
    order = np.argsort(ids, kind="stable")
    s_ids = ids[order]
    s_rows = rows[order]
    starts = np.flatnonzero(np.r_[True, s_ids[1:] != s_ids[:-1]])
    table[s_ids[starts]] += np.add.reduceat(s_rows, starts, axis=0)


def _split_heads(x, h):
    # (..., L, d) -> (..., h, L, d/h); contiguous so matmul hits BLAS
    *lead, L, d = x.shape
    x = x.reshape(*lead, L, h, d // h)
    return np.ascontiguousarray(np.moveaxis(x, -2, -3))


def _merge_heads(x):
    # (..., h, L, dh) -> (..., L, h*dh)
    x = np.moveaxis(x, -3, -2)
    *lead, L, h, dh = x.shape
    return x.reshape(*lead, L, h * dh)


def _attention_fwd(q, k, v, scale, add_terms=None, may_mask_all=False):
    """Softmax attention. ``add_terms`` (bias and/or -inf masks, pre-summed)
    is broadcast onto the score matrix; with ``may_mask_all`` fully masked
    rows emit exactly zero instead of NaN."""
    scores = q @ np.ascontiguousarray(k.swapaxes(-1, -2))
    scores *= scale
    if add_terms is not None:
        for term in add_terms:
            scores += term
    mx = scores.max(axis=-1, keepdims=True)
    if may_mask_all:
        mx = np.where(np.isfinite(mx), mx, 0.0)
    scores -= mx
    np.exp(scores, out=scores)
    e = scores
    denom = e.sum(axis=-1, keepdims=True)
    if may_mask_all:
        denom = np.where(denom == 0.0, 1.0, denom)
    e /= denom
    p = e
    ctx = p @ v
    return ctx, p, (q, k, v, p, scale)


def _attention_bwd(dctx, cache):
    q, k, v, p, scale = cache
    dp = dctx @ np.ascontiguousarray(v.swapaxes(-1, -2))
    dv = p.swapaxes(-1, -2) @ dctx
    row = np.einsum("...ij,...ij->...i", dp, p)[..., None]
    ds = dp
    ds -= row
    ds *= p
    dq = ds @ k
    dq *= scale
    dk = ds.swapaxes(-1, -2) @ q
    dk *= scale
    return dq, dk, dv, ds


def _causal_bucket_matrix(L: int, n_buckets: int) -> np.ndarray:
    rel = np.arange(L)[:, None] - np.arange(L)[None, :]
    return np.minimum(np.maximum(rel, 0), n_buckets - 1)


def _symmetric_bucket_matrix(L: int) -> np.ndarray:
    rel = np.arange(L)[None, :] - np.arange(L)[:, None]
    return rel + (L - 1)


def _bias_from_table(table: np.ndarray, buckets: np.ndarray) -> np.ndarray:
    # table (nb, h), buckets (Lq, Lk) -> (h, Lq, Lk)
    return np.moveaxis(table[buckets], -1, 0)


def _bias_grad(ds_sum: np.ndarray, buckets: np.ndarray, n_buckets: int) -> np.ndarray:
    # ds_sum (h, Lq, Lk) -> (nb, h)
    h = ds_sum.shape[0]
    out = np.empty((n_buckets, h), dtype=ds_sum.dtype)
    flat = buckets.ravel()
    for hi in range(h):
        out[:, hi] = np.bincount(flat, weights=ds_sum[hi].ravel(), minlength=n_buckets)
    return out


# -- transformer blocks ----------------------------------------------------------


def _self_attn_fwd(params, prefix, x, bias_buckets, n_buckets, n_heads, add_mask, may_mask_all=False):
    g, b = params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"]
    xn, ln_cache = _layer_norm_fwd(x, g, b)
    q = _split_heads(xn @ params[f"{prefix}.wq"], n_heads)
    k = _split_heads(xn @ params[f"{prefix}.wk"], n_heads)
    v = _split_heads(xn @ params[f"{prefix}.wv"], n_heads)
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    bias = _bias_from_table(params[f"{prefix}.bias"], bias_buckets)
    if add_mask is not None and add_mask.ndim <= bias.ndim:
        add_terms = (bias + add_mask,)
    elif add_mask is not None:
        add_terms = (bias, add_mask)
    else:
        add_terms = (bias,)
    ctx, p, att_cache = _attention_fwd(q, k, v, scale, add_terms=add_terms, may_mask_all=may_mask_all)
    merged = _merge_heads(ctx)
    out = merged @ params[f"{prefix}.wo"]
    cache = (xn, ln_cache, att_cache, merged, bias_buckets, n_buckets)
    return x + out, cache


def _self_attn_bwd(params, grads, prefix, dy, cache, n_heads):
    xn, ln_cache, att_cache, merged, bias_buckets, n_buckets = cache
    lead = merged.shape[:-1]
    d = merged.shape[-1]
    m2 = merged.reshape(-1, d)
    dy2 = dy.reshape(-1, d)
    grads[f"{prefix}.wo"] += m2.T @ dy2
    dmerged = (dy2 @ params[f"{prefix}.wo"].T).reshape(*lead, d)
    dctx = _split_heads(dmerged, n_heads)
    dq, dk, dv, ds = _attention_bwd(dctx, att_cache)
    ds_sum = ds.reshape(-1, n_heads, *ds.shape[-2:]).sum(axis=0)
    grads[f"{prefix}.bias"] += _bias_grad(ds_sum, bias_buckets, n_buckets)
    dxn = np.zeros_like(xn)
    xn2 = xn.reshape(-1, d)
    for name, dhead in (("wq", dq), ("wk", dk), ("wv", dv)):
        dflat = _merge_heads(dhead).reshape(-1, d)
        grads[f"{prefix}.{name}"] += xn2.T @ dflat
        dxn += (dflat @ params[f"{prefix}.{name}"].T).reshape(xn.shape)
    dx_ln, dg, db = _layer_norm_bwd(dxn, ln_cache)
    grads[f"{prefix}.ln.g"] += dg
    grads[f"{prefix}.ln.b"] += db
    return dy + dx_ln


def _ffn_fwd(params, prefix, x):
    g, b = params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"]
    xn, ln_cache = _layer_norm_fwd(x, g, b)
    a = xn @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    hdn, gelu_cache = _gelu_fwd(a)
    out = hdn @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    return x + out, (xn, ln_cache, gelu_cache, hdn)


def _ffn_bwd(params, grads, prefix, dy, cache):
    xn, ln_cache, gelu_cache, hdn = cache
    d = xn.shape[-1]
    dy2 = dy.reshape(-1, d)
    hdn2 = hdn.reshape(-1, hdn.shape[-1])
    grads[f"{prefix}.w2"] += hdn2.T @ dy2
    grads[f"{prefix}.b2"] += dy2.sum(axis=0)
    dhdn = (dy2 @ params[f"{prefix}.w2"].T).reshape(hdn.shape)
    da = _gelu_bwd(dhdn, gelu_cache)
    da2 = da.reshape(-1, da.shape[-1])
    xn2 = xn.reshape(-1, d)
    grads[f"{prefix}.w1"] += xn2.T @ da2
    grads[f"{prefix}.b1"] += da2.sum(axis=0)
    dxn = (da2 @ params[f"{prefix}.w1"].T).reshape(xn.shape)
    dx_ln, dg, db = _layer_norm_bwd(dxn, ln_cache)
    grads[f"{prefix}.ln.g"] += dg
    grads[f"{prefix}.ln.b"] += db
    return dy + dx_ln


# -- neighbor packing ------------------------------------------------------------


def pack_pairs(rets: Sequence[RetrievalResult], n_spans: int, k: int, m: int) -> np.ndarray:
    """[N;F] token rows as a (n_spans, k, 2m) array; missing neighbors are PAD."""
    if len(rets) != n_spans:
        raise ValueError(f"need {n_spans} retrieval results, got {len(rets)}")
    out = np.zeros((n_spans, k, 2 * m), dtype=np.uint32)
    for u, ret in enumerate(rets):
        if len(ret.neighbors) > k:
            raise ValueError("more neighbors than config.k")
        for j, rn in enumerate(ret.neighbors):
            pair = rn.pair_tokens()
            if len(pair) != 2 * m:
                raise ValueError(f"neighbor pair must have 2m = {2 * m} tokens, got {len(pair)}")
            out[u, j] = pair
    return out


# -- encoder ----------------------------------------------------------------------


def _encoder_fwd(params, config: ModelConfig, pair_tokens: np.ndarray, want_cache: bool):
    """Encode (B, S, k, 2m) neighbor pairs bidirectionally.

    Returns states (B, S, k, 2m, d) and the key-validity mask (B, S, k, 2m).
    """
    B, S, k, L2 = pair_tokens.shape
    dtype = params["tok_embed"].dtype
    flat_tokens = pair_tokens.reshape(B * S * k, L2)
    valid = flat_tokens != PAD_ID
    x = params["enc_embed"][flat_tokens].astype(dtype, copy=True)
    add_mask = np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]
    buckets = _symmetric_bucket_matrix(L2)
    caches = []
    for j in range(config.n_encoder_layers):
        x, c_sa = _self_attn_fwd(params, f"enc{j}.sa", x, buckets, config.enc_buckets, config.n_heads, add_mask, may_mask_all=True)
        x, c_ff = _ffn_fwd(params, f"enc{j}.ffn", x)
        caches.append((c_sa, c_ff))
    x, lnf_cache = _layer_norm_fwd(x, params["enc.lnf.g"], params["enc.lnf.b"])
    states = x.reshape(B, S, k, L2, -1)
    mask = valid.reshape(B, S, k, L2)
    cache = (flat_tokens, caches, lnf_cache, x.shape) if want_cache else None
    return states, mask, cache


def _encoder_bwd(params, grads, config: ModelConfig, dstates: np.ndarray, cache) -> None:
    flat_tokens, caches, lnf_cache, flat_shape = cache
    dx = dstates.reshape(flat_shape)
    dx, dg, db = _layer_norm_bwd(dx, lnf_cache)
    grads["enc.lnf.g"] += dg
    grads["enc.lnf.b"] += db
    for j in reversed(range(config.n_encoder_layers)):
        c_sa, c_ff = caches[j]
        dx = _ffn_bwd(params, grads, f"enc{j}.ffn", dx, c_ff)
        dx = _self_attn_bwd(params, grads, f"enc{j}.sa", dx, c_sa, config.n_heads)
    _scatter_add_rows(grads["enc_embed"], flat_tokens, dx)


def encode_neighbors(params: dict[str, np.ndarray], config: ModelConfig, ret: RetrievalResult) -> np.ndarray:
    """Bidirectional encodings of one chunk's [N;F] pairs, shape (k, 2m, d)."""
    pair_tokens = pack_pairs([ret], 1, config.k, config.m)[None]
    states, _, _ = _encoder_fwd(params, config, pair_tokens, want_cache=False)
    return states[0, 0]


# -- chunked cross-attention --------------------------------------------------------


def _cca_fwd(params, prefix, config: ModelConfig, x, enc_states, enc_mask, n_spans, want_cache):
    """One CCA block. x is (B, L, d); enc_states (B, S, k, 2m, d)."""
    B, L, d = x.shape
    m = config.m
    span_len = n_spans * m
    avail = min(L - (m - 1), span_len)
    xn, ln_cache = _layer_norm_fwd(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    span = np.zeros((B, span_len, d), dtype=x.dtype)
    span[:, :avail] = xn[:, m - 1 : m - 1 + avail]
    spanned = span.reshape(B * n_spans, m, d)

    kv = enc_states.reshape(B * n_spans, config.k * 2 * config.m, d)
    key_valid = enc_mask.reshape(B * n_spans, config.k * 2 * config.m)
    add_mask = np.where(key_valid, 0.0, NEG_INF).astype(x.dtype)[:, None, None, :]

    q = _split_heads(spanned @ params[f"{prefix}.wq"], config.n_heads)
    kk = _split_heads(kv @ params[f"{prefix}.wk"], config.n_heads)
    vv = _split_heads(kv @ params[f"{prefix}.wv"], config.n_heads)
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    ctx, p, att_cache = _attention_fwd(q, kk, vv, scale, add_terms=(add_mask,), may_mask_all=True)
    merged = _merge_heads(ctx)
    out_span = (merged @ params[f"{prefix}.wo"]).reshape(B, span_len, d)

    y = x.copy()
    y[:, m - 1 : m - 1 + avail] += out_span[:, :avail]
    cache = (ln_cache, att_cache, merged, spanned, kv, avail) if want_cache else None
    return y, cache


def _cca_bwd(params, grads, prefix, config: ModelConfig, dy, cache, n_spans):
    ln_cache, att_cache, merged, spanned, kv, avail = cache
    B, L, d = dy.shape
    m = config.m
    span_len = n_spans * m
    dout_span = np.zeros((B, span_len, d), dtype=dy.dtype)
    dout_span[:, :avail] = dy[:, m - 1 : m - 1 + avail]
    dout2 = dout_span.reshape(-1, d)
    grads[f"{prefix}.wo"] += merged.reshape(-1, d).T @ dout2
    dmerged = (dout2 @ params[f"{prefix}.wo"].T).reshape(merged.shape)
    dctx = _split_heads(dmerged, config.n_heads)
    dq, dk, dv, _ = _attention_bwd(dctx, att_cache)

    dspanned = _merge_heads(dq) @ params[f"{prefix}.wq"].T
    grads[f"{prefix}.wq"] += spanned.reshape(-1, d).T @ _merge_heads(dq).reshape(-1, d)
    dkv = _merge_heads(dk) @ params[f"{prefix}.wk"].T + _merge_heads(dv) @ params[f"{prefix}.wv"].T
    kv2 = kv.reshape(-1, d)
    grads[f"{prefix}.wk"] += kv2.T @ _merge_heads(dk).reshape(-1, d)
    grads[f"{prefix}.wv"] += kv2.T @ _merge_heads(dv).reshape(-1, d)

    dxn = np.zeros((B, L, d), dtype=dy.dtype)
    dspan = dspanned.reshape(B, span_len, d)
    dxn[:, m - 1 : m - 1 + avail] = dspan[:, :avail]
    dx_ln, dg, db = _layer_norm_bwd(dxn, ln_cache)
    grads[f"{prefix}.ln.g"] += dg
    grads[f"{prefix}.ln.b"] += db
    denc = dkv.reshape(B, n_spans, config.k, 2 * config.m, d)
    return dy + dx_ln, denc


# -- full model ---------------------------------------------------------------------


def _forward_batch(params, config: ModelConfig, tokens: np.ndarray, pair_tokens: np.ndarray | None, mode: str, want_cache: bool):
    """Batched forward pass; returns (logits, cache). tokens is (B, L)."""
    if mode not in ("on", "off"):
        raise ValueError("mode must be 'on' or 'off'")
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, length)")
    B, L = tokens.shape
    if L < 1 or L > config.max_seq_len:
        raise ValueError(f"sequence length {L} outside [1, {config.max_seq_len}]")
    if int(tokens.max()) >= config.vocab_size:
        raise ValueError(f"token id {int(tokens.max())} out of range for vocab {config.vocab_size}")
    n_spans = (L + config.m - 1) // config.m - 1
    retrieval_active = mode == "on" and n_spans > 0
    if retrieval_active:
        if not config.cca_layers:
            raise ValueError("retrieval on requires at least one CCA layer")
        if pair_tokens is None:
            raise ValueError(f"retrieval on requires neighbor pairs for u=1..{n_spans}")
        if pair_tokens.shape != (B, n_spans, config.k, 2 * config.m):
            raise ValueError(f"pair tokens must have shape {(B, n_spans, config.k, 2 * config.m)}")

    dtype = params["tok_embed"].dtype
    enc_states = enc_mask = enc_cache = None
    if retrieval_active:
        enc_states, enc_mask, enc_cache = _encoder_fwd(params, config, pair_tokens, want_cache)

    x = params["tok_embed"][tokens].astype(dtype, copy=True)
    causal = np.where(np.arange(L)[None, :] <= np.arange(L)[:, None], 0.0, NEG_INF).astype(dtype)
    buckets = _causal_bucket_matrix(L, config.rel_buckets)
    layer_caches = []
    for i in range(config.n_decoder_layers):
        x, c_sa = _self_attn_fwd(params, f"dec{i}.sa", x, buckets, config.rel_buckets, config.n_heads, causal)
        c_cca = None
        if i in config.cca_layers and retrieval_active:
            x, c_cca = _cca_fwd(params, f"dec{i}.cca", config, x, enc_states, enc_mask, n_spans, want_cache)
        x, c_ff = _ffn_fwd(params, f"dec{i}.ffn", x)
        layer_caches.append((c_sa, c_cca, c_ff))
    xf, lnf_cache = _layer_norm_fwd(x, params["dec.lnf.g"], params["dec.lnf.b"])
    logits = xf @ params["out.w"] + params["out.b"]
    cache = None
    if want_cache:
        cache = dict(
            tokens=tokens,
            n_spans=n_spans,
            retrieval_active=retrieval_active,
            enc_cache=enc_cache,
            enc_shape=None if enc_states is None else enc_states.shape,
            layer_caches=layer_caches,
            lnf_cache=lnf_cache,
            xf=xf,
        )
    return logits, cache


def _backward_batch(params, config: ModelConfig, cache, dlogits) -> dict[str, np.ndarray]:
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    xf = cache["xf"]
    d = xf.shape[-1]
    xf2 = xf.reshape(-1, d)
    dl2 = dlogits.reshape(-1, dlogits.shape[-1])
    grads["out.w"] += xf2.T @ dl2
    grads["out.b"] += dl2.sum(axis=0)
    dx = (dl2 @ params["out.w"].T).reshape(xf.shape)
    dx, dg, db = _layer_norm_bwd(dx, cache["lnf_cache"])
    grads["dec.lnf.g"] += dg
    grads["dec.lnf.b"] += db

    denc_total = None
    if cache["retrieval_active"]:
        denc_total = np.zeros(cache["enc_shape"], dtype=dx.dtype)
    for i in reversed(range(config.n_decoder_layers)):
        c_sa, c_cca, c_ff = cache["layer_caches"][i]
        dx = _ffn_bwd(params, grads, f"dec{i}.ffn", dx, c_ff)
        if c_cca is not None:
            dx, denc = _cca_bwd(params, grads, f"dec{i}.cca", config, dx, c_cca, cache["n_spans"])
            denc_total += denc
        dx = _self_attn_bwd(params, grads, f"dec{i}.sa", dx, c_sa, config.n_heads)
    _scatter_add_rows(grads["tok_embed"], cache["tokens"], dx)
    if cache["retrieval_active"]:
        _encoder_bwd(params, grads, config, denc_total, cache["enc_cache"])
    return grads


def forward(params: dict[str, np.ndarray], config: ModelConfig, tokens: Sequence[int], rets: Sequence[RetrievalResult] | None = None, mode: str = "off") -> np.ndarray:
    """Next-token distributions for one sequence, shape (L, vocab).

    mode="off" skips every CCA block and ignores ``rets`` entirely; mode="on"
    requires one RetrievalResult per chunk u = 1..ceil(L/m)-1.
    """
    tokens = np.asarray(tokens, dtype=np.int64)[None, :]
    pair_tokens = None
    if mode == "on":
        n_spans = (tokens.shape[1] + config.m - 1) // config.m - 1
        if n_spans > 0:
            if rets is None:
                raise ValueError(f"retrieval on requires results for u=1..{n_spans}")
            pair_tokens = pack_pairs(list(rets), n_spans, config.k, config.m)[None]
    logits, _ = _forward_batch(params, config, tokens, pair_tokens, mode, want_cache=False)
    return softmax(logits[0])


def softmax(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - mx)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray, reduction: str = "mean"):
    """Masked softmax cross-entropy; returns (loss, dlogits, n_targets).

    The gradient of the loss in the logits is exactly (softmax - onehot),
    scaled by the mask and 1/n for mean reduction.
    """
    B, L, V = logits.shape
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no unmasked targets")
    mx = logits.max(axis=-1, keepdims=True)
    z = logits - mx
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    picked_z = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    picked_logp = picked_z - np.log(denom[..., 0])
    nll = -(picked_logp * mask).sum(dtype=np.float64)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = float(nll) * scale
    dlogits = e
    dlogits /= denom
    dlogits[np.arange(B)[:, None], np.arange(L)[None, :], targets] -= 1.0
    dlogits *= mask[..., None] * scale
    return loss, dlogits, n


def loss_and_grads(params, config: ModelConfig, tokens: np.ndarray, pair_tokens: np.ndarray | None, mode: str, reduction: str = "mean"):
    """Teacher-forced loss and parameter gradients for a (B, L) token batch."""
    tokens = np.asarray(tokens)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros(tokens.shape, dtype=bool)
    mask[:, :-1] = tokens[:, 1:] != PAD_ID
    logits, cache = _forward_batch(params, config, tokens, pair_tokens, mode, want_cache=True)
    loss, dlogits, n = cross_entropy(logits, targets, mask, reduction)
    grads = _backward_batch(params, config, cache, dlogits)
    return loss, grads, n


# -- perplexity ---------------------------------------------------------------------


def chunk_nll(distributions: np.ndarray, tokens: Sequence[int], u: int, m: int) -> tuple[float, int]:
    """Total negative log likelihood and target count for chunk u (1-based)."""
    if u < 1:
        raise ValueError("u must be >= 1")
    tokens = np.asarray(tokens, dtype=np.int64)
    L = len(tokens)
    lo, hi = (u - 1) * m, u * m
    if hi > L:
        raise ValueError(f"chunk {u} not fully inside the sequence")
    total, count = 0.0, 0
    for t in range(max(lo, 1), hi):
        if tokens[t] == PAD_ID:
            continue
        p = float(distributions[t - 1, tokens[t]])
        total += -np.log(p)
        count += 1
    return total, count


def chunk_perplexity(distributions: np.ndarray, tokens: Sequence[int], u: int, m: int) -> float | None:
    """exp(mean NLL) over chunk u's non-PAD targets; None if it has none."""
    total, count = chunk_nll(distributions, tokens, u, m)
    if count == 0:
        return None
    return float(np.exp(total / count))


# -- training -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int
    lr: float = 1e-4
    seed: int = 0
    batch_size: int = 4
    mode: str = "on"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    doc_ids: list[str] | None = None  # sampling pool; None = every doc in the store
    window_chunks: int | None = None  # crop each sample to an aligned chunk window


class AdamState:
    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr, beta1, beta2, eps):
        self.t += 1
        b1c = 1.0 - beta1**self.t
        b2c = 1.0 - beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            params[name] -= (lr / b1c) * m / (np.sqrt(v / b2c) + eps)


def _doc_token_matrix(store: ChunkStore, doc_id: str, max_chunks: int) -> np.ndarray:
    ids = store.doc_chunk_ids(doc_id)
    ids = range(ids.start, min(ids.stop, ids.start + max_chunks))
    return store.tokens[ids.start : ids.stop].reshape(-1)


def train(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    store: ChunkStore,
    train_cfg: TrainConfig,
    retriever: Retriever | None = None,
    retrieval_cfg: RetrievalConfig | None = None,
) -> list[float]:
    """Adam on teacher-forced cross-entropy; returns the per-step loss curve.

    Each step samples a batch of equal-length documents (bucketed by chunk
    count) from a seeded generator, so a fixed seed reproduces the curve
    exactly. With mode="on", neighbors come from ``retriever`` with the
    same-document filter and are cached per document (the retriever is
    frozen, so they never change).
    """
    if train_cfg.mode == "on" and (retriever is None or retrieval_cfg is None):
        raise ValueError("training with retrieval on needs a retriever and config")
    max_chunks = config.max_seq_len // config.m
    if train_cfg.window_chunks is not None:
        if train_cfg.window_chunks < 1:
            raise ValueError("window_chunks must be >= 1")
        max_chunks = min(max_chunks, train_cfg.window_chunks)
    pool = train_cfg.doc_ids if train_cfg.doc_ids is not None else list(store.doc_ids)
    if not pool:
        raise ValueError("no training documents")
    doc_len: dict[str, int] = {d: len(store.doc_chunk_ids(d)) for d in pool}
    buckets: dict[int, list[str]] = {}
    for doc_id in pool:
        buckets.setdefault(min(doc_len[doc_id], max_chunks), []).append(doc_id)
    lengths = sorted(buckets)
    weights = np.array([len(buckets[l]) for l in lengths], dtype=np.float64)
    weights /= weights.sum()

    rng = np.random.default_rng(train_cfg.seed)
    adam = AdamState(params)
    ret_cache: dict[str, np.ndarray] = {}

    def rets_for(doc_id: str) -> np.ndarray:
        """Per-chunk [N;F] packs for the whole document; row o = RET of ordinal o."""
        cached = ret_cache.get(doc_id)
        if cached is None:
            lo = store.doc_chunk_ids(doc_id).start
            l = doc_len[doc_id]
            chunks = [store.chunk(lo + i) for i in range(l)]
            rets = batch_retrieve_for_sequence(retriever, chunks, retrieval_cfg, exclude_doc=doc_id)
            cached = pack_pairs(rets, l - 1, config.k, config.m)
            ret_cache[doc_id] = cached
        return cached

    losses: list[float] = []
    for step in range(train_cfg.steps):
        l = lengths[rng.choice(len(lengths), p=weights)]
        docs = [buckets[l][i] for i in rng.integers(0, len(buckets[l]), size=train_cfg.batch_size)]
        starts = [int(rng.integers(0, doc_len[d] - l + 1)) for d in docs]
        token_rows = []
        pair_rows = []
        for doc_id, start in zip(docs, starts):
            lo = store.doc_chunk_ids(doc_id).start
            token_rows.append(store.tokens[lo + start : lo + start + l].reshape(-1))
            if train_cfg.mode == "on" and l > 1:
                pair_rows.append(rets_for(doc_id)[start : start + l - 1])
        tokens = np.stack(token_rows)
        pair_tokens = np.stack(pair_rows) if pair_rows else None
        mode = train_cfg.mode if l > 1 else "off"
        loss, grads, _ = loss_and_grads(params, config, tokens, pair_tokens, mode)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}: loss={loss}")
        losses.append(loss)
        adam.step(params, grads, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    return losses


# -- gradient check -----------------------------------------------------------------


def tiny_config(seed: int = 0, vocab_size: int = 16, d_model: int = 8, m: int = 4) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=d_model,
        n_heads=2,
        n_decoder_layers=2,
        n_encoder_layers=1,
        cca_layers=(1,),
        m=m,
        k=2,
        max_seq_len=4 * m,
        seed=seed,
    )


def gradient_check(config: ModelConfig | None = None, seed: int = 0, step: float = 1e-4) -> float:
    """Max normalized error between analytic and central-difference gradients.

    Runs the full model (retrieval on) in float64 on a random tiny instance
    and perturbs every scalar parameter. The error metric is
    |a - n| / max(1, |a|, |n|), so it is relative for large gradients and
    absolute below 1.
    """
    if config is None:
        config = tiny_config(seed=seed)
    rng = np.random.default_rng(seed + 1)
    params = init_params(config, dtype=np.float64)
    for name in params:
        params[name] = params[name] + rng.normal(0.0, 0.02, size=params[name].shape)
    L = 2 * config.m + 2
    n_spans = (L + config.m - 1) // config.m - 1
    tokens = rng.integers(1, config.vocab_size, size=(1, L))
    pair_tokens = rng.integers(1, config.vocab_size, size=(1, n_spans, config.k, 2 * config.m)).astype(np.uint32)
    pair_tokens[0, 0, -1, :] = PAD_ID  # exercise the fully masked pair path

    _, grads, _ = loss_and_grads(params, config, tokens, pair_tokens, "on", reduction="sum")

    def loss_at() -> float:
        logits, _ = _forward_batch(params, config, tokens, pair_tokens, "on", want_cache=False)
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        mask = np.zeros(tokens.shape, dtype=bool)
        mask[:, :-1] = tokens[:, 1:] != PAD_ID
        loss, _, _ = cross_entropy(logits, targets, mask, reduction="sum")
        return loss

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_at()
            flat[idx] = orig - step
            down = loss_at()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[idx]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst


# -- evaluation ----------------------------------------------------------------------


def eval_document(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    store: ChunkStore,
    doc_id: str,
    retriever: Retriever | None = None,
    retrieval_cfg: RetrievalConfig | None = None,
    with_on: bool = True,
    with_off: bool = True,
) -> tuple[list[EvalRecord], dict[str, float]]:
    """Per-chunk perplexities for one document under teacher forcing.

    Records cover chunks u >= 2. The summary accumulates NLL over exactly
    those chunks' non-PAD targets, once per requested mode.
    """
    from .analytics import unigram_overlap  # local import to avoid a cycle

    if not (with_on or with_off):
        raise ValueError("nothing to evaluate")
    max_chunks = config.max_seq_len // config.m
    ids = store.doc_chunk_ids(doc_id)
    l = min(len(ids), max_chunks)
    tokens = store.tokens[ids.start : ids.start + l].reshape(-1)
    chunks = [store.chunk(ids.start + i) for i in range(l)]

    rets: list[RetrievalResult] | None = None
    dist_on = dist_off = None
    if with_on:
        if retriever is None or retrieval_cfg is None:
            raise ValueError("retrieval-on evaluation needs a retriever and config")
        rets = batch_retrieve_for_sequence(retriever, chunks, retrieval_cfg, exclude_doc=doc_id)
        dist_on = forward(params, config, tokens, rets, mode="on")
    if with_off:
        dist_off = forward(params, config, tokens, mode="off")

    records: list[EvalRecord] = []
    nll_on = nll_off = 0.0
    n_targets = 0
    for u in range(2, l + 1):
        ppl_on = ppl_off = delta = score = overlap = None
        count = 0
        if dist_on is not None:
            total_on, count = chunk_nll(dist_on, tokens, u, config.m)
            ppl_on = float(np.exp(total_on / count)) if count else None
            nll_on += total_on
        if dist_off is not None:
            total_off, count = chunk_nll(dist_off, tokens, u, config.m)
            ppl_off = float(np.exp(total_off / count)) if count else None
            nll_off += total_off
        n_targets += count
        if count == 0:
            continue
        if ppl_on is not None and ppl_off is not None:
            delta = ppl_off - ppl_on
        if rets is not None and len(rets[u - 2].neighbors) > 0:
            top1 = rets[u - 2].neighbors[0]
            score = top1.score
            overlap = unigram_overlap(chunks[u - 1].token_ids, top1.pair_tokens())
        records.append(EvalRecord(doc_id, u, ppl_on, ppl_off, delta, score, overlap))
    summary = {"nll_on": nll_on, "nll_off": nll_off, "n_targets": n_targets}
    return records, summary


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(path: str, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, b"RLM1")
        write_str(fh, config.to_json())
        write_u32(fh, len(params))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float32)
            write_str(fh, name)
            write_u32(fh, arr.ndim)
            for dim in arr.shape:
                write_u32(fh, dim)
            write_array(fh, arr, "f4")


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        expect_magic(fh, b"RLM1")
        config = ModelConfig.from_json(read_str(fh))
        count = read_u32(fh)
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = read_str(fh)
            ndim = read_u32(fh)
            shape = tuple(read_u32(fh) for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            params[name] = read_array(fh, size, "f4").reshape(shape)
        if fh.read(1):
            raise FormatError("trailing bytes after RLM1 payload")
    expected = set(init_params(config, dtype=np.float32))
    if set(params) != expected:
        raise FormatError("checkpoint parameter names do not match its config")
    return config, params
