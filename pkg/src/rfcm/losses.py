"""The composite training loss.

Four terms share one forward pass per episode: mean per-token caption
cross-entropy, a down-weighted cross-entropy on the first content word
(active only for frequent-enough first words), a margin ranking penalty
that pushes the true future caption to score better than the episode's
own past captions, and a mean squared error tying the learned future
slot to the actual next clip feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Episode, TokenSequence, Vocabulary, tokenize
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_iwp: float = 0.1
    lambda_corr: float = 0.005
    lambda_mse: float = 10.0
    w_scale: int = 1000          # constant scale divisor for the first-word term
    freq_threshold: int = 30     # first words at or below this training count are skipped
    margin: float = 0.5          # ranking margin for the temporal penalty
    per_word_scale: bool = False  # scale by 1/freq(first word) instead of 1/w_scale

    def validate(self) -> None:
        for name in ("lambda_ce", "lambda_iwp", "lambda_corr", "lambda_mse", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.w_scale < 1 or self.freq_threshold < 0:
            raise ConfigError("w_scale must be >= 1 and freq_threshold >= 0")


@dataclass
class LossBreakdown:
    """Unweighted component values plus their weighted total for one batch."""

    ce: float
    iwp: float
    corr: float
    mse: float
    total: float

    def as_dict(self) -> dict:
        return {"ce": self.ce, "iwp": self.iwp, "corr": self.corr, "mse": self.mse, "total": self.total}


@dataclass
class PreparedEpisode:
    """An episode tokenized and cast once, reusable across epochs."""

    episode_id: str
    clips: np.ndarray
    future_clip: np.ndarray
    tokens: TokenSequence
    negatives: list[TokenSequence]


def prepare_episode(ep: Episode, vocab: Vocabulary, max_len: int, dtype=np.float64) -> PreparedEpisode:
    return PreparedEpisode(
        episode_id=ep.id,
        clips=np.asarray(ep.clips, dtype=dtype),
        future_clip=np.asarray(ep.future_clip, dtype=dtype),
        tokens=tokenize(ep.future_caption, vocab, max_len),
        negatives=[tokenize(c, vocab, max_len) for c in ep.past_captions],
    )


def caption_ce(logits: Tensor, target_ids) -> tuple[Tensor, Tensor]:
    """Mean negative log-likelihood of the targets under the logits.

    logits row i scores target i; returns (mean NLL, per-token NLL vector).
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if logits.shape[0] != len(target_ids):
        raise ContractError(f"{logits.shape[0]} logit rows for {len(target_ids)} targets")
    picked = ad.pick(ad.log_softmax(logits, axis=1), target_ids)
    nll = ad.scale(picked, -1.0)
    return ad.mean_all(nll), nll


def iwp_loss(first_word_nll: Tensor, first_word_id: int, train_freq: int, weights: LossWeights) -> Tensor:
    """Scaled first-word cross-entropy; zero unless the reference first
    word occurred more than freq_threshold times in the training split."""
    if train_freq <= weights.freq_threshold:
        return Tensor(np.zeros((), dtype=first_word_nll.dtype))
    gamma = 1.0 / train_freq if weights.per_word_scale else 1.0 / weights.w_scale
    return ad.scale(first_word_nll, gamma)


def corr_loss(positive_ce: Tensor, negative_ces: list[Tensor], margin: float) -> Tensor:
    """Mean hinge(margin + ce(true future) - ce(off-time caption)).

    Penalizes the model whenever an event from the wrong time scores
    nearly as well as (or better than) the true future caption.
    """
    if not negative_ces:
        return Tensor(np.zeros((), dtype=positive_ce.dtype))
    terms = [ad.relu(ad.add(ad.sub(positive_ce, neg), margin)) for neg in negative_ces]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def future_mse(target_feature, predicted: Tensor) -> Tensor:
    """Mean squared error between the true next-clip feature and the
    prediction decoded from the future slot."""
    target = target_feature if isinstance(target_feature, Tensor) else Tensor(np.asarray(target_feature))
    if target.shape != predicted.shape:
        raise ContractError(f"future feature widths differ: {target.shape} vs {predicted.shape}")
    diff = ad.sub(predicted, target)
    return ad.mean_all(ad.hadamard(diff, diff))


def episode_loss(model, prep: PreparedEpisode, weights: LossWeights, vocab: Vocabulary) -> dict[str, Tensor]:
    """All four components for one episode, sharing a single clip encoding."""
    summary, clip_rows, future_slot = model.encode_clips(prep.clips)

    v = prep.tokens.valid_len
    ids = prep.tokens.ids[:v]
    logits = model.caption_logits(summary, clip_rows, ids)
    ce, nll = caption_ce(ad.slice_rows(logits, 0, v - 1), ids[1:v])

    first_id = int(ids[1])
    first_nll = ad.sum_all(ad.slice_rows(nll, 0, 1))
    iwp = iwp_loss(first_nll, first_id, vocab.frequency(first_id), weights)

    if weights.lambda_corr > 0 and prep.negatives:
        neg_ces = []
        for neg in prep.negatives:
            nv = neg.valid_len
            nids = neg.ids[:nv]
            nlogits = model.caption_logits(summary, clip_rows, nids)
            neg_ce, _ = caption_ce(ad.slice_rows(nlogits, 0, nv - 1), nids[1:nv])
            neg_ces.append(neg_ce)
        corr = corr_loss(ce, neg_ces, weights.margin)
    else:
        corr = Tensor(np.zeros((), dtype=model.dtype))

    mse = future_mse(Tensor(prep.future_clip), model.predict_future_feature(future_slot))
    return {"ce": ce, "iwp": iwp, "corr": corr, "mse": mse}


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum in a fixed association order, so the reported total
    is bit-for-bit the weighted sum of the reported components."""
    total = ad.add(
        ad.add(
            ad.add(ad.scale(components["ce"], weights.lambda_ce), ad.scale(components["iwp"], weights.lambda_iwp)),
            ad.scale(components["corr"], weights.lambda_corr),
        ),
        ad.scale(components["mse"], weights.lambda_mse),
    )
    breakdown = LossBreakdown(
        ce=components["ce"].item(),
        iwp=components["iwp"].item(),
        corr=components["corr"].item(),
        mse=components["mse"].item(),
        total=total.item(),
    )
    return total, breakdown


def batch_loss(model, preps: list[PreparedEpisode], weights: LossWeights, vocab: Vocabulary):
    """Episode components averaged over the batch, then weighted."""
    if not preps:
        raise ContractError("empty batch")
    sums: dict[str, Tensor] = {}
    for prep in preps:
        comps = episode_loss(model, prep, weights, vocab)
        for name, value in comps.items():
            sums[name] = value if name not in sums else ad.add(sums[name], value)
    inv = 1.0 / len(preps)
    means = {name: ad.scale(value, inv) for name, value in sums.items()}
    return total_loss(means, weights)
