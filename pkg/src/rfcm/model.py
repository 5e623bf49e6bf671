"""The full future-captioning model: clip-relation encoder, masked
transformer encoder, cross-attention decoder, word head, future-feature
head. Supports the two ablations: "no_rsa" swaps the relational layers
for standard self-attention, "no_decoder" routes the encoder output
straight into the word head.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .params import Initializer, ParamStore
from .rsa import RsaConfig, build_rsa_encoder, rsa_encoder_forward
from .transformer import (
    StackConfig,
    build_causal_mask,
    build_encoder_input,
    build_stack,
    decoder_forward,
    embed_text,
    encoder_forward,
    head_logits,
)

ABLATIONS = ("full", "no_rsa", "no_decoder")

_INIT_STREAM = 7


@lru_cache(maxsize=4096)
def _causal_bias(k: int, text_len: int, valid_len: int, dtype_name: str) -> np.ndarray:
    bias = build_causal_mask(k, text_len, valid_len).bias(np.dtype(dtype_name))
    bias.flags.writeable = False
    return bias


class RFCM:
    """Relational future-captioning model over one episode's clips."""

    def __init__(
        self,
        rsa_cfg: RsaConfig,
        stack_cfg: StackConfig,
        ablation: str = "full",
        seed: int = 0,
        dtype=np.float64,
    ):
        rsa_cfg.validate()
        stack_cfg.validate()
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}")
        self.rsa_cfg = rsa_cfg
        self.stack_cfg = stack_cfg
        self.ablation = ablation
        self.seed = seed
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise ConfigError(f"precision must be float64 or float32, got {self.dtype}")

        self.params = ParamStore()
        init = Initializer(self.params, np.random.SeedSequence([seed, _INIT_STREAM]), self.dtype)
        variant = "mha" if ablation == "no_rsa" else "rsa"
        self.rsa_p = build_rsa_encoder(init, rsa_cfg, variant, stack_cfg.n_heads)
        self.stack_p = build_stack(init, stack_cfg, rsa_cfg.d_rsa, with_decoder=ablation != "no_decoder")
        self.future_head = {
            "W": init.matrix("future_head.W", rsa_cfg.d_rsa, rsa_cfg.d_in),
            "b": init.bias("future_head.b", rsa_cfg.d_in),
        }

    # -- forward pieces ----------------------------------------------------

    def encode_clips(self, clips) -> tuple[Tensor, Tensor, Tensor]:
        """Run the clip encoder once per episode.

        Returns (relation summary for the decoder, raw projected clip
        rows for the encoder input, future-slot embedding for the MSE head).
        """
        clips = np.asarray(clips, dtype=self.dtype)
        return rsa_encoder_forward(clips, self.rsa_p, self.rsa_cfg, self.stack_cfg.n_heads)

    def caption_logits(self, summary: Tensor, clip_rows: Tensor, ids, valid_len: int | None = None) -> Tensor:
        """Next-word logits at every text row for the given token prefix.

        Row j of the result is the distribution over word j+1. ids may be
        any non-empty prefix starting with BOS; valid_len marks where
        padding starts (defaults to all of ids).
        """
        ids = np.asarray(ids, dtype=np.int64)
        n_text = len(ids)
        if not 1 <= n_text <= self.stack_cfg.max_len:
            raise ContractError(f"text length {n_text} outside [1, {self.stack_cfg.max_len}]")
        text = embed_text(ids, self.stack_p["embed"])
        bridged = ad.linear(clip_rows, self.stack_p["bridge_W"], self.stack_p["bridge_b"])
        h_c = build_encoder_input(bridged, text, self.stack_p["segment"])
        bias = _causal_bias(
            self.rsa_cfg.k, n_text, n_text if valid_len is None else valid_len, self.dtype.name
        )
        h_enc = encoder_forward(h_c, Tensor(bias), self.stack_p["encoder"], self.stack_cfg.n_heads)
        if self.ablation == "no_decoder":
            h_out = h_enc
        else:
            h_out = decoder_forward(summary, h_enc, self.stack_p["decoder"], self.stack_cfg.n_heads)
        return head_logits(h_out, self.stack_p["head"], self.rsa_cfg.k, n_text)

    def predict_future_feature(self, future_slot: Tensor) -> Tensor:
        """Map the future-slot embedding back to clip-feature space."""
        return ad.linear(future_slot, self.future_head["W"], self.future_head["b"])

    def score_caption(self, clips, ids, valid_len: int | None = None) -> Tensor:
        """One-shot convenience: encode clips and score a token prefix."""
        summary, rows, _ = self.encode_clips(clips)
        return self.caption_logits(summary, rows, ids, valid_len)

    def config_dict(self) -> dict:
        return {
            "k": self.rsa_cfg.k,
            "d_in": self.rsa_cfg.d_in,
            "d_rsa": self.rsa_cfg.d_rsa,
            "n_rsa_layers": self.rsa_cfg.n_layers,
            "n_enc_layers": self.stack_cfg.n_enc_layers,
            "n_dec_layers": self.stack_cfg.n_dec_layers,
            "n_heads": self.stack_cfg.n_heads,
            "d_enc": self.stack_cfg.d_enc,
            "d_dec": self.stack_cfg.d_dec,
            "max_len": self.stack_cfg.max_len,
            "n_vocab": self.stack_cfg.n_vocab,
            "ablation": self.ablation,
            "seed": self.seed,
            "precision": self.dtype.name,
        }

    @classmethod
    def from_config_dict(cls, cfg: dict) -> "RFCM":
        rsa_cfg = RsaConfig(
            k=cfg["k"], d_in=cfg["d_in"], d_rsa=cfg["d_rsa"], n_layers=cfg["n_rsa_layers"]
        )
        stack_cfg = StackConfig(
            n_enc_layers=cfg["n_enc_layers"],
            n_dec_layers=cfg["n_dec_layers"],
            n_heads=cfg["n_heads"],
            d_enc=cfg["d_enc"],
            d_dec=cfg["d_dec"],
            max_len=cfg["max_len"],
            n_vocab=cfg["n_vocab"],
        )
        return cls(
            rsa_cfg,
            stack_cfg,
            ablation=cfg.get("ablation", "full"),
            seed=cfg.get("seed", 0),
            dtype=np.dtype(cfg.get("precision", "float64")),
        )
