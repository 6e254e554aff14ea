"""Multi-head attention and its language-aware variants.

Three interchangeable kernels operate on the same inputs:

* ``mha``          -- standard multi-head scaled dot-product attention.
* ``laa_naive``    -- language-aware attention computed the literal way:
  the minibatch is regrouped per target language and each head is
  projected with ``W_head + W_head^lang`` explicitly. Slow, obviously
  correct; it is the oracle the batched kernel is checked against.
* ``laa_batched``  -- the efficient form: per-sample language matrices are
  row-gathered into a ``b x d x d`` stack and applied with one batched
  matmul per projection, with the shared-input product cached for
  self-attention.

Masks are boolean ``[b, n_q, n_k]`` with True marking *invalid* key
positions; they are applied as an additive -1e9 sentinel before softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat,
    gather_rows,
    matmul,
    mul,
    narrow,
    reshape,
    softmax_rows,
    transpose,
    transpose_last2,
)

MASK_SENTINEL = -1e9


@dataclass
class AttentionParams:
    """Projection weights of one attention block.

    All four matrices are ``d_model x d_model``. Head ``i`` of wq/wk/wv is
    the column block ``[i*d, (i+1)*d)``; head ``i`` of wo is the matching
    row block.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    def __post_init__(self):
        d_model = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            t = getattr(self, name)
            if t.shape != (d_model, d_model):
                raise ValueError(f"{name} must be square {d_model}x{d_model}, got {t.shape}")
        if d_model % self.n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {self.n_heads} heads")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LanguageMatrixStack:
    """One ``d_model x d_model`` matrix per language, stacked ``[l, d, d]``.

    The language index mapping is owned by the vocabulary and must be the
    same one used for language ids in batches.
    """

    w_all: Tensor

    def __post_init__(self):
        if self.w_all.ndim != 3 or self.w_all.shape[1] != self.w_all.shape[2]:
            raise ValueError(f"language stack must be [l, d, d], got {self.w_all.shape}")

    @property
    def n_languages(self) -> int:
        return self.w_all.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_all.shape[1]


@dataclass
class AttentionInput:
    """Activations entering an attention block.

    q is ``[b, n_q, d_model]``; k and v are ``[b, n_k, d_model]`` (the same
    tensor as q for self-attention). mask is ``[b, n_q, n_k]`` with True at
    invalid key positions, or None. lang_ids is the per-sample language
    index, required by the language-aware kernels.
    """

    q: Tensor
    k: Tensor
    v: Tensor
    mask: np.ndarray | None = None
    lang_ids: np.ndarray | None = None


@dataclass
class KVCachePolicy:
    """Whether the shared-input language projection may be reused when q,
    k, v alias the same activations."""

    reuse_shared_projection: bool = True


def _check_input(params: AttentionParams, inp: AttentionInput) -> None:
    d = params.d_model
    if inp.q.shape[-1] != d or inp.k.shape[-1] != d or inp.v.shape[-1] != d:
        raise ValueError(
            f"activation width mismatch: params d_model={d}, "
            f"got q {inp.q.shape}, k {inp.k.shape}, v {inp.v.shape}"
        )
    if inp.k.shape[:2] != inp.v.shape[:2]:
        raise ValueError(f"k/v disagree: {inp.k.shape} vs {inp.v.shape}")
    if inp.k.shape[0] != inp.q.shape[0]:
        raise ValueError(f"q batch {inp.q.shape[0]} != k/v batch {inp.k.shape[0]}")
    if inp.mask is not None:
        b, nq, nk = inp.q.shape[0], inp.q.shape[1], inp.k.shape[1]
        if inp.mask.shape != (b, nq, nk):
            raise ValueError(f"mask shape {inp.mask.shape} != {(b, nq, nk)}")
        if not (~inp.mask).any(axis=-1).all():
            raise ValueError("attention mask leaves a query row with no valid key")


def _mask_bias(mask: np.ndarray | None) -> Tensor | None:
    if mask is None:
        return None
    return Tensor(np.where(mask, MASK_SENTINEL, 0.0)[:, None, :, :])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d_model = x.shape
    return transpose(reshape(x, (b, n, n_heads, d_model // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, n_heads: int) -> Tensor:
    """Per-head softmax(q k^T / sqrt(d)) v, heads concatenated back to
    [b, n_q, d_model]."""
    dh = q.shape[-1] // n_heads
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    logits = mul(matmul(qh, transpose_last2(kh)), 1.0 / math.sqrt(dh))
    if bias is not None:
        logits = logits + bias
    weights = softmax_rows(logits)
    return _merge_heads(matmul(weights, vh))


def mha(params: AttentionParams, inp: AttentionInput) -> Tensor:
    """Standard multi-head attention: project, attend per head, concat,
    project out."""
    _check_input(params, inp)
    q = matmul(inp.q, params.wq)
    k = matmul(inp.k, params.wk)
    v = matmul(inp.v, params.wv)
    z = _scaled_dot_attention(q, k, v, _mask_bias(inp.mask), params.n_heads)
    return matmul(z, params.wo)


def _check_lang_ids(stack: LanguageMatrixStack, lang_ids) -> np.ndarray:
    ids = np.asarray(lang_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"lang_ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= stack.n_languages):
        raise ValueError(
            f"language id out of range [0, {stack.n_languages}): {ids.tolist()}"
        )
    return ids


def select_language_matrices(stack: LanguageMatrixStack, lang_ids) -> Tensor:
    """Row-gather the per-sample language matrices into ``[b, d, d]``.

    Duplicate ids return the same matrix; gradients flowing back through
    duplicates accumulate into the single underlying row.
    """
    ids = _check_lang_ids(stack, lang_ids)
    return gather_rows(stack.w_all, ids)


def laa_naive(params: AttentionParams, langs: LanguageMatrixStack, inp: AttentionInput) -> Tensor:
    """Language-aware attention, computed per language group and per head.

    For each head i and language matrix W^lang (column-chunked to head i):
    q_i = Q (Wq_i + W_i^lang), same for k_i/v_i, and the output sums
    z_i (Wo_i + (W_i^lang)^T) over heads. Samples are regrouped by
    language and restored to their original order afterwards.
    """
    _check_input(params, inp)
    if inp.lang_ids is None:
        raise ValueError("laa_naive needs lang_ids")
    ids = _check_lang_ids(langs, inp.lang_ids)

    h = params.n_heads
    dh = params.head_dim
    d_model = params.d_model
    order: list[int] = []
    group_outputs: list[Tensor] = []
    for lang in sorted(set(ids.tolist())):
        rows = np.flatnonzero(ids == lang)
        order.extend(rows.tolist())
        qg = gather_rows(inp.q, rows)
        kg = qg if inp.k is inp.q else gather_rows(inp.k, rows)
        vg = kg if inp.v is inp.k else (qg if inp.v is inp.q else gather_rows(inp.v, rows))
        bias = None
        if inp.mask is not None:
            bias = Tensor(np.where(inp.mask[rows], MASK_SENTINEL, 0.0))
        w_lang = reshape(narrow(langs.w_all, 0, lang, 1), (d_model, d_model))

        z_out = None
        for i in range(h):
            w_lang_i = narrow(w_lang, 1, i * dh, dh)
            qi = matmul(qg, narrow(params.wq, 1, i * dh, dh) + w_lang_i)
            ki = matmul(kg, narrow(params.wk, 1, i * dh, dh) + w_lang_i)
            vi = matmul(vg, narrow(params.wv, 1, i * dh, dh) + w_lang_i)
            logits = mul(matmul(qi, transpose_last2(ki)), 1.0 / math.sqrt(dh))
            if bias is not None:
                logits = logits + bias
            zi = matmul(softmax_rows(logits), vi)
            contrib = matmul(zi, narrow(params.wo, 0, i * dh, dh) + transpose_last2(w_lang_i))
            z_out = contrib if z_out is None else z_out + contrib
        group_outputs.append(z_out)

    stacked = concat(group_outputs, axis=0)
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[np.asarray(order)] = np.arange(len(order))
    return gather_rows(stacked, inverse)


def laa_batched(
    params: AttentionParams,
    langs: LanguageMatrixStack,
    inp: AttentionInput,
    cache: KVCachePolicy = KVCachePolicy(),
) -> Tensor:
    """Efficient language-aware attention over a mixed-language batch.

    Gathers the per-sample matrices once, then computes
    q = Q Wq + Q Wbar (and likewise for k, v) with batched matmuls, and
    Z = z Wo + z Wbar^T on the way out. When q, k, v alias the same
    activations the shared product X Wbar is computed once and reused.
    """
    _check_input(params, inp)
    if inp.lang_ids is None:
        raise ValueError("laa_batched needs lang_ids")
    w_bar = select_language_matrices(langs, inp.lang_ids)

    shared: dict[int, Tensor] = {}

    def lang_term(x: Tensor) -> Tensor:
        if cache.reuse_shared_projection and id(x) in shared:
            return shared[id(x)]
        out = matmul(x, w_bar)
        shared[id(x)] = out
        return out

    q = matmul(inp.q, params.wq) + lang_term(inp.q)
    k = matmul(inp.k, params.wk) + lang_term(inp.k)
    v = matmul(inp.v, params.wv) + lang_term(inp.v)
    z = _scaled_dot_attention(q, k, v, _mask_bias(inp.mask), params.n_heads)
    return matmul(z, params.wo) + matmul(z, transpose_last2(w_bar))
