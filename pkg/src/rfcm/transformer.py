"""Masked transformer encoder, cross-attention decoder, and word head.

The encoder runs over the concatenation of projected clip rows and
embedded caption tokens; a causal mask keeps every text row from seeing
later tokens, and keeps clip rows from seeing text at all. The decoder
is a stack of cross-attention layers in which the encoder stream asks
questions of the clip-relation summary, and the word head turns text
rows into vocabulary logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
UNK_ID = 3
N_SPECIAL_TOKENS = 4

VIDEO_SEGMENT = 0
TEXT_SEGMENT = 1


@dataclass(frozen=True)
class StackConfig:
    """Sizes of the transformer encoder/decoder stack."""

    n_enc_layers: int = 3
    n_dec_layers: int = 3
    n_heads: int = 12
    d_enc: int = 384
    d_dec: int = 384
    max_len: int = 20          # caption slots incl. BOS and EOS
    n_vocab: int = 0           # filled in from the vocabulary

    def validate(self) -> None:
        if min(self.n_enc_layers, self.n_dec_layers, self.n_heads, self.d_enc, self.d_dec) < 1:
            raise ConfigError("stack sizes must all be >= 1")
        if self.d_enc % self.n_heads != 0:
            raise ConfigError(f"d_enc={self.d_enc} not divisible by n_heads={self.n_heads}")
        if self.d_enc != self.d_dec:
            raise ConfigError(
                f"d_enc={self.d_enc} must equal d_dec={self.d_dec}: the decoder stream "
                "carries residual connections from the encoder output"
            )
        if self.max_len < 2:
            raise ConfigError("max_len must allow at least BOS and EOS")
        if self.n_vocab < N_SPECIAL_TOKENS:
            raise ConfigError(f"n_vocab={self.n_vocab} smaller than the reserved token ids")


@lru_cache(maxsize=32)
def _sinusoid_cached(n: int, d: int, dtype_name: str) -> np.ndarray:
    dtype = np.dtype(dtype_name)
    pe = np.zeros((n, d), dtype=dtype)
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i / d)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d // 2])
    pe.flags.writeable = False
    return pe


def sinusoidal_table(n: int, d: int, dtype=np.float64) -> np.ndarray:
    """Parameter-free trigonometric position encoding, one row per position."""
    return _sinusoid_cached(n, d, np.dtype(dtype).name)


class AttentionMask:
    """Boolean may-attend matrix; true means the row may read that column."""

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise ContractError(f"mask must be square, got shape {allowed.shape}")
        dead = ~allowed.any(axis=1)
        if dead.any():
            raise ContractError(f"mask row {int(np.flatnonzero(dead)[0])} attends to nothing")
        self.allowed = allowed

    def bias(self, dtype=np.float64) -> np.ndarray:
        """Additive logit mask: 0 where allowed, a huge negative number where not."""
        return np.where(self.allowed, 0.0, ad.MASKED_LOGIT).astype(dtype)


def build_causal_mask(k: int, text_len: int, valid_len: int | None = None) -> AttentionMask:
    """Mask for the clip+text stream of k+2 clip rows and text_len token rows.

    Clip rows attend to every clip row and never to text. Text row j
    attends to all clip rows and to non-pad text rows <= j. Pad columns
    (text positions >= valid_len) are unreadable by everyone; pad rows
    keep their clip columns so no row is left with nothing to attend to.
    """
    if valid_len is None:
        valid_len = text_len
    if not 0 <= valid_len <= text_len:
        raise ContractError(f"valid_len={valid_len} outside [0, {text_len}]")
    v = k + 2
    n = v + text_len
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:v, :v] = True
    allowed[v:, :v] = True
    tri = np.tril(np.ones((text_len, text_len), dtype=bool))
    tri[:, valid_len:] = False
    allowed[v:, v:] = tri
    return AttentionMask(allowed)


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    p: dict,
    n_heads: int,
    mask_bias: Tensor | None = None,
    probs_out: list | None = None,
) -> Tensor:
    """Scaled dot-product attention with n_heads column-sliced heads.

    Masked logits are pushed to an effectively -inf value before the
    softmax, so forbidden columns get exactly zero weight. probs_out, if
    given, collects each head's post-softmax weights (as ndarrays).
    """
    q = ad.linear(q_in, p["Wq"], p["bq"])
    k = ad.linear(kv_in, p["Wk"], p["bk"])
    v = ad.linear(kv_in, p["Wv"], p["bv"])
    d_model = q.shape[1]
    if d_model % n_heads != 0:
        raise ContractError(f"model width {d_model} not divisible by {n_heads} heads")
    if mask_bias is not None and mask_bias.shape != (q.shape[0], k.shape[0]):
        raise ContractError(
            f"mask shape {mask_bias.shape} does not match attention shape {(q.shape[0], k.shape[0])}"
        )
    d_head = d_model // n_heads
    inv_sqrt = 1.0 / math.sqrt(d_head)
    heads = []
    for e in range(n_heads):
        lo, hi = e * d_head, (e + 1) * d_head
        scores = ad.scale(ad.matmul(ad.slice_cols(q, lo, hi), ad.transpose(ad.slice_cols(k, lo, hi))), inv_sqrt)
        if mask_bias is not None:
            scores = ad.add(scores, mask_bias)
        probs = ad.softmax(scores, axis=1)
        if probs_out is not None:
            probs_out.append(probs.data)
        heads.append(ad.matmul(probs, ad.slice_cols(v, lo, hi)))
    return ad.linear(ad.concat(heads, axis=1), p["Wo"], p["bo"])


def feed_forward(h: Tensor, p: dict) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(h, p["W1"], p["b1"])), p["W2"], p["b2"])


def _residual_ln(x: Tensor, sub: Tensor, ln: tuple[Tensor, Tensor]) -> Tensor:
    return ad.layer_norm(ad.add(x, sub), ln[0], ln[1])


def encoder_layer(h: Tensor, mask_bias: Tensor, p: dict, n_heads: int) -> Tensor:
    """Two masked attention sub-layers then a feed-forward, each wrapped
    in residual + layer norm. The second attention reuses the causal
    mask: an unmasked pass would leak future reference tokens."""
    a1 = _residual_ln(h, multi_head_attention(h, h, p["mmha"], n_heads, mask_bias), p["ln1"])
    a2 = _residual_ln(a1, multi_head_attention(a1, a1, p["mha"], n_heads, mask_bias), p["ln2"])
    return _residual_ln(a2, feed_forward(a2, p["ffn"]), p["ln3"])


def encoder_forward(h_c: Tensor, mask_bias: Tensor, layers: list[dict], n_heads: int) -> Tensor:
    h = h_c
    for p in layers:
        h = encoder_layer(h, mask_bias, p, n_heads)
    return h


def decoder_layer(stream: Tensor, memory: Tensor, p: dict, n_heads: int) -> Tensor:
    a1 = _residual_ln(stream, multi_head_attention(stream, memory, p["cross"], n_heads), p["ln1"])
    return _residual_ln(a1, feed_forward(a1, p["ffn"]), p["ln2"])


def decoder_forward(clip_summary: Tensor | None, h_enc: Tensor, layers: list[dict], n_heads: int) -> Tensor:
    """Cross-attention stack: the encoder stream provides the queries,
    the clip-relation summary provides keys and values."""
    if clip_summary is None:
        raise ContractError("decoder requires the clip-relation summary (got None)")
    s = h_enc
    for p in layers:
        s = decoder_layer(s, clip_summary, p, n_heads)
    return s


def embed_text(ids: np.ndarray, table: Tensor) -> Tensor:
    """Token embeddings plus sinusoidal encoding of the text positions."""
    rows = ad.embedding_lookup(table, ids)
    pe = sinusoidal_table(len(ids), table.shape[1], table.dtype)
    return ad.add(rows, Tensor(pe))


def build_encoder_input(clip_rows: Tensor, text_rows: Tensor, segment_table: Tensor) -> Tensor:
    """Stack clip rows above text rows and add the 2-way segment embedding."""
    if clip_rows.shape[1] != text_rows.shape[1]:
        raise ContractError(
            f"clip rows ({clip_rows.shape[1]} wide) and text rows ({text_rows.shape[1]} wide) disagree"
        )
    seg_ids = [VIDEO_SEGMENT] * clip_rows.shape[0] + [TEXT_SEGMENT] * text_rows.shape[0]
    stacked = ad.concat([clip_rows, text_rows], axis=0)
    return ad.add(stacked, ad.embedding_lookup(segment_table, seg_ids))


def head_logits(h: Tensor, p: dict, k: int, n_positions: int) -> Tensor:
    """Logits for the next word at each of the first n_positions text rows.

    Row j of the result is the distribution over word j+1, i.e. the
    shifted-right convention: the prediction for a word never reads it.
    """
    rows = ad.slice_rows(h, k + 2, k + 2 + n_positions)
    a = ad.gelu(ad.linear(rows, p["W1"], p["b1"]))
    a = ad.layer_norm(a, p["ln"][0], p["ln"][1])
    return ad.linear(a, p["W2"], p["b2"])


def generation_head(h: Tensor, p: dict, k: int, max_len: int, j: int) -> Tensor:
    """Logit vector for word j (1-based), read from text row j - 1."""
    if not 1 <= j <= max_len - 1:
        raise ContractError(f"word position j={j} outside [1, {max_len - 1}]")
    row = ad.take_row(h, k + 2 + (j - 1))
    a = ad.gelu(ad.linear(row, p["W1"], p["b1"]))
    a = ad.layer_norm(a, p["ln"][0], p["ln"][1])
    return ad.linear(a, p["W2"], p["b2"])


def build_stack(init, cfg: StackConfig, d_clip: int, with_decoder: bool = True) -> dict:
    """Allocate every transformer parameter; d_clip is the width of the
    incoming clip rows (bridged to d_enc by a learned projection).
    with_decoder=False (the decoder ablation) allocates no decoder layers."""
    p: dict = {
        "embed": init.embedding("embed.table", cfg.n_vocab, cfg.d_enc),
        "segment": init.embedding("embed.segment", 2, cfg.d_enc),
        "bridge_W": init.matrix("embed.clip_bridge.W", d_clip, cfg.d_enc),
        "bridge_b": init.bias("embed.clip_bridge.b", cfg.d_enc),
    }
    enc = []
    for i in range(cfg.n_enc_layers):
        prefix = f"enc.layer{i}"
        enc.append(
            {
                "mmha": init.attention(f"{prefix}.mmha", cfg.d_enc, cfg.d_enc, cfg.d_enc),
                "ln1": init.ln(f"{prefix}.ln1", cfg.d_enc),
                "mha": init.attention(f"{prefix}.mha", cfg.d_enc, cfg.d_enc, cfg.d_enc),
                "ln2": init.ln(f"{prefix}.ln2", cfg.d_enc),
                "ffn": init.ffn(f"{prefix}.ffn", cfg.d_enc, 4 * cfg.d_enc),
                "ln3": init.ln(f"{prefix}.ln3", cfg.d_enc),
            }
        )
    p["encoder"] = enc
    dec = []
    if with_decoder:
        for i in range(cfg.n_dec_layers):
            prefix = f"dec.layer{i}"
            dec.append(
                {
                    "cross": init.attention(f"{prefix}.cross", cfg.d_dec, d_clip, cfg.d_dec),
                    "ln1": init.ln(f"{prefix}.ln1", cfg.d_dec),
                    "ffn": init.ffn(f"{prefix}.ffn", cfg.d_dec, 4 * cfg.d_dec),
                    "ln2": init.ln(f"{prefix}.ln2", cfg.d_dec),
                }
            )
    p["decoder"] = dec
    p["head"] = {
        "W1": init.matrix("head.W1", cfg.d_dec, cfg.d_dec),
        "b1": init.bias("head.b1", cfg.d_dec),
        "ln": init.ln("head.ln", cfg.d_dec),
        "W2": init.matrix("head.W2", cfg.d_dec, cfg.n_vocab),
        "b2": init.bias("head.b2", cfg.n_vocab),
    }
    return p
