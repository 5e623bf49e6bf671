"""Relational self-attention over the clip-embedding sequence.

Each clip sequence is projected to k+2 rows: one per past clip (each
conditioned on the latest clip) plus a learned future slot predicted
from the latest clip alone. The relational layers then combine a basic
kernel (a linear read of the current-time row), a relational kernel
(flattened query-key Hadamard interactions) and a relational context
(values plus their Gram-matrix self-correlation) into a single feature
that replaces the current-time row; a plain feed-forward + layer norm
follows per layer, and once more at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .transformer import multi_head_attention, sinusoidal_table


@dataclass(frozen=True)
class RsaConfig:
    """Shape of the clip-relation encoder."""

    k: int                    # past events before the current one
    d_in: int                 # clip feature width
    d_rsa: int = 384          # layer width
    n_layers: int = 2

    def validate(self) -> None:
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if min(self.d_in, self.d_rsa, self.n_layers) < 1:
            raise ConfigError("d_in, d_rsa and n_layers must be >= 1")

    @property
    def n_slots(self) -> int:
        return self.k + 2


def project_clips(clips: np.ndarray, p: dict, cfg: RsaConfig) -> tuple[Tensor, Tensor]:
    """Turn k+1 clip features into the k+2 embedded event rows.

    Past rows embed [clip, latest clip] pairs; the future slot is a
    separate linear read of the latest clip only, so it never sees the
    ground-truth future feature. Returns (all rows, future slot).
    """
    clips = np.asarray(clips)
    if clips.shape != (cfg.k + 1, cfg.d_in):
        raise ContractError(
            f"expected {cfg.k + 1} clips of width {cfg.d_in}, got array of shape {clips.shape}"
        )
    latest = clips[cfg.k]
    paired = np.concatenate([clips, np.tile(latest, (cfg.k + 1, 1))], axis=1)
    past_rows = ad.linear(Tensor(paired), p["W_past"], p["b_past"])
    future = ad.linear(Tensor(latest), p["W_future"], p["b_future"])
    rows = ad.concat([past_rows, ad.reshape(future, (1, cfg.d_rsa))], axis=0)
    return rows, future


def positional_encode(rows: Tensor) -> Tensor:
    """Add the trigonometric position encoding (first layer only)."""
    n, d = rows.shape
    return ad.add(rows, Tensor(sinusoidal_table(n, d, rows.dtype)))


def rsa_kernels(query: Tensor, keys: Tensor, p: dict) -> tuple[Tensor, Tensor]:
    """Basic and relational kernels over the k+2 event slots.

    The basic kernel is a linear map of the current-time row; the
    relational kernel reads the flattened Hadamard product of that row
    (stacked) with every key row. No softmax is applied to either.
    """
    n_slots, d = keys.shape
    if query.shape != (d,):
        raise ContractError(f"query must be one row of width {d}, got shape {query.shape}")
    if p["W_p"].shape != (n_slots, d) or p["W_h"].shape != (n_slots, n_slots * d):
        raise ContractError(
            f"kernel weights {p['W_p'].shape} / {p['W_h'].shape} do not fit {n_slots} slots of width {d}"
        )
    basic = ad.matmul(p["W_p"], query)
    stacked = ad.tile_rows(query, n_slots)
    relational = ad.matmul(p["W_h"], ad.flatten(ad.hadamard(stacked, keys)))
    return basic, relational


def relational_context(values: Tensor, w_g: Tensor) -> Tensor:
    """Values plus a learned read of their Gram matrix: V + W_g (V^T V)."""
    gram = ad.matmul(ad.transpose(values), values)
    return ad.add(values, ad.matmul(w_g, gram))


def rsa_attend(basic: Tensor, relational: Tensor, context: Tensor) -> Tensor:
    """Collapse the kernels against the relational context: (b + r)^T C."""
    return ad.matmul(ad.add(basic, relational), context)


def rsa_substitute(h: Tensor, p: dict, k: int) -> Tensor:
    """Compute the relational feature and write it over row k (time t)."""
    query = ad.take_row(h, k)
    basic, relational = rsa_kernels(query, h, p)
    phi = rsa_attend(basic, relational, relational_context(h, p["W_g"]))
    return ad.concat(
        [ad.slice_rows(h, 0, k), ad.reshape(phi, (1, h.shape[1])), ad.slice_rows(h, k + 1, h.shape[0])],
        axis=0,
    )


def _ffn_ln(h: Tensor, p: dict) -> Tensor:
    hidden = ad.gelu(ad.linear(h, p["ffn"]["W1"], p["ffn"]["b1"]))
    out = ad.linear(hidden, p["ffn"]["W2"], p["ffn"]["b2"])
    return ad.layer_norm(out, p["ln"][0], p["ln"][1])


def rsa_layer(h: Tensor, p: dict, k: int) -> Tensor:
    return _ffn_ln(rsa_substitute(h, p, k), p)


def standard_attention_layer(h: Tensor, p: dict, n_heads: int) -> Tensor:
    """Drop-in replacement layer for the relational one: plain multi-head
    self-attention over all rows, then the same feed-forward + norm."""
    return _ffn_ln(multi_head_attention(h, h, p["attn"], n_heads), p)


def rsa_encoder_forward(clips: np.ndarray, p: dict, cfg: RsaConfig, n_heads: int = 1):
    """Full clip encoder: project, position-encode, n_layers relational
    (or standard-attention) layers, final feed-forward + norm.

    Returns (summary rows, raw projected rows, future slot). The raw
    rows feed the transformer encoder; the summary feeds the decoder.
    """
    rows, future = project_clips(clips, p["proj"], cfg)
    h = positional_encode(rows)
    for layer in p["layers"]:
        if "attn" in layer:
            h = standard_attention_layer(h, layer, n_heads)
        else:
            h = rsa_layer(h, layer, cfg.k)
    h = _ffn_ln(h, p["final"])
    return h, rows, future


def build_rsa_encoder(init, cfg: RsaConfig, variant: str = "rsa", n_heads: int = 1) -> dict:
    """Allocate encoder parameters; variant "mha" swaps the relational
    kernels for standard self-attention (the w/o-RSA ablation)."""
    if variant not in ("rsa", "mha"):
        raise ConfigError(f"unknown encoder variant {variant!r}")
    if variant == "mha" and cfg.d_rsa % n_heads != 0:
        raise ConfigError(f"d_rsa={cfg.d_rsa} not divisible by n_heads={n_heads}")
    p: dict = {
        "proj": {
            "W_past": init.matrix("clip_proj.past.W", 2 * cfg.d_in, cfg.d_rsa),
            "b_past": init.bias("clip_proj.past.b", cfg.d_rsa),
            "W_future": init.matrix("clip_proj.future.W", cfg.d_in, cfg.d_rsa),
            "b_future": init.bias("clip_proj.future.b", cfg.d_rsa),
        }
    }
    layers = []
    for i in range(cfg.n_layers):
        prefix = f"rsa.layer{i}"
        if variant == "rsa":
            layer = {
                "W_p": init.matrix(f"{prefix}.W_p", cfg.n_slots, cfg.d_rsa),
                "W_h": init.matrix(f"{prefix}.W_h", cfg.n_slots, cfg.n_slots * cfg.d_rsa),
                "W_g": init.matrix(f"{prefix}.W_g", cfg.n_slots, cfg.d_rsa),
            }
        else:
            layer = {"attn": init.attention(f"{prefix}.mha", cfg.d_rsa, cfg.d_rsa, cfg.d_rsa)}
        layer["ffn"] = init.ffn(f"{prefix}.ffn", cfg.d_rsa, 4 * cfg.d_rsa)
        layer["ln"] = init.ln(f"{prefix}.ln", cfg.d_rsa)
        layers.append(layer)
    p["layers"] = layers
    p["final"] = {
        "ffn": init.ffn("rsa.final.ffn", cfg.d_rsa, 4 * cfg.d_rsa),
        "ln": init.ln("rsa.final.ln", cfg.d_rsa),
    }
    return p
