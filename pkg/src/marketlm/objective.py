"""Dual next-token pretraining loss with salient-token weighting.

The alignment objective jointly predicts the next text token and the next
time-series bin over an interleaved sequence. Text-token losses can be
reweighted by a contrastive likelihood ratio: how much more probable the
multimodal model finds each text token than a text-only pass over the same
sequence with the time-series tokens removed. Tokens whose probability rises
with market context get up-weighted, with no external sentiment dictionary
involved.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import forward
from .sequence import TEXT, TS, build_masks, drop_ts_tokens

log = logging.getLogger(__name__)


class ObjectiveError(ValueError):
    pass


@dataclass
class WeightConfig:
    """Schedule and clamp for the contrastive token weights."""

    total_steps: int
    warm_frac: float = 0.20
    clamp_lo: float = 0.1
    clamp_hi: float = 10.0

    def __post_init__(self):
        if not 0 < self.warm_frac < 1:
            raise ObjectiveError(f"warm_frac must be in (0, 1), got {self.warm_frac}")
        if not self.clamp_lo < 1 < self.clamp_hi:
            raise ObjectiveError("clamp bounds must straddle 1")
        if self.total_steps <= 0:
            raise ObjectiveError("total_steps must be positive")

    def warm(self, step):
        return step < self.warm_frac * self.total_steps


@dataclass
class TokenWeights:
    """Per-text-token likelihood-ratio weights for one sequence.

    `positions` are the sequence indices whose successor is a text token
    (the scored text positions). `raw` is the clamped ratio W, `norm` the
    mean-one normalized weight actually used in the loss.
    """

    positions: np.ndarray
    raw: np.ndarray
    norm: np.ndarray
    logp_text: np.ndarray
    logp_mm: np.ndarray
    warm: bool = False

    def validate(self):
        n = len(self.positions)
        if self.raw.shape != (n,) or self.norm.shape != (n,):
            raise ObjectiveError("weight arrays must match scored positions")
        if n and abs(self.norm.mean() - 1.0) > 1e-6:
            raise ObjectiveError("normalized weights must have mean one")


@dataclass
class DualLoss:
    """Total loss plus its per-modality components and token counts."""

    total: T.Tensor
    text_component: T.Tensor | None
    ts_component: T.Tensor | None
    n_text: int
    n_ts: int

    @property
    def missing_text(self):
        return self.n_text == 0

    @property
    def missing_ts(self):
        return self.n_ts == 0


def scored_positions(seq):
    """Positions with a successor, split by the successor's modality."""
    succ = seq.tags[1:]
    text_pos = np.flatnonzero(succ == TEXT)
    ts_pos = np.flatnonzero(succ == TS)
    return text_pos, ts_pos


def uniform_weights(seq):
    """All-ones weights (warm-start / no-weighting baselines)."""
    text_pos, _ = scored_positions(seq)
    ones = np.ones(len(text_pos))
    nans = np.full(len(text_pos), np.nan)
    return TokenWeights(text_pos, ones.copy(), ones, nans, nans, warm=True)


def dual_loss(params, seq, masks, weights=None, raw_sum=False, out=None):
    """Dual next-token cross-entropy over one interleaved sequence.

    Text positions (successor is text) are scored against the text head with
    the given weights; ts positions against the bin head(s), unweighted. Each
    component is normalized by its own token count and the two are summed;
    `raw_sum=True` instead normalizes the pooled sum by the pooled count (the
    literal single-sum form). Pass `out` to reuse a forward result.
    """
    if weights is None:
        weights = uniform_weights(seq)
    weights.validate()
    text_pos, ts_pos = scored_positions(seq)
    if not np.array_equal(weights.positions, text_pos):
        raise ObjectiveError("weights were built for a different sequence")
    if out is None:
        out = forward(params, seq, masks)

    dt = params.config.np_dtype
    text_loss = None
    if len(text_pos):
        logits = T.take_rows(out.text_logits, text_pos)
        text_loss = T.cross_entropy(logits, seq.ids[text_pos + 1],
                                    weights=weights.norm.astype(dt))
    else:
        log.info("dual_loss flag=no_text_positions")

    ts_loss = None
    if len(ts_pos):
        if params.config.ts_embed_mode == "discrete":
            per_channel = []
            for c, logit_c in enumerate(out.ts_logits):
                per_channel.append(T.cross_entropy(
                    T.take_rows(logit_c, ts_pos), seq.ts_bins[ts_pos + 1, c]))
            ts_loss = per_channel[0]
            for extra in per_channel[1:]:
                ts_loss = ts_loss + extra
            if len(per_channel) > 1:
                ts_loss = ts_loss * (1.0 / len(per_channel))
        else:
            preds = T.take_rows(out.ts_preds, ts_pos)
            target = T.Tensor(np.nan_to_num(seq.ts_values[ts_pos + 1]).astype(dt))
            diff = preds + target * (-1.0)
            ts_loss = T.mean_(diff * diff)
    else:
        log.info("dual_loss flag=no_ts_positions")

    n_text, n_ts = len(text_pos), len(ts_pos)
    if raw_sum:
        total_n = max(n_text + n_ts, 1)
        parts = []
        if text_loss is not None:
            parts.append(text_loss * (n_text / total_n))
        if ts_loss is not None:
            parts.append(ts_loss * (n_ts / total_n))
    else:
        parts = [p for p in (text_loss, ts_loss) if p is not None]
    if not parts:
        raise ObjectiveError("sequence has no scored positions")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return DualLoss(total, text_loss, ts_loss, n_text, n_ts)


def _text_token_logprobs(params, seq, masks, positions, out=None):
    """log P(x_{i+1} | prefix) at the given text-scored positions."""
    if out is None:
        out = forward(params, seq, masks)
    logp = T.log_softmax_rows(out.text_logits).data
    return logp[positions, seq.ids[positions + 1]]


def contrastive_weights(params, seq, masks, cfg, step):
    """Likelihood-ratio token weights from a text-only contrastive baseline.

    Before `warm_frac * total_steps` all weights are one. Afterwards two
    gradient-free passes run: the full multimodal sequence, and the same
    sequence with every ts token removed (text renumbered contiguously).
    W_i = P_mm(x_i) / P_text(x_i), clamped to [clamp_lo, clamp_hi], then
    normalized to mean one over the sequence's scored text tokens.
    """
    if cfg.warm(step):
        return uniform_weights(seq)
    text_pos, _ = scored_positions(seq)
    if not len(text_pos):
        return uniform_weights(seq)

    with T.no_grad():
        logp_mm = _text_token_logprobs(params, seq, masks, text_pos)
        reduced, kept = drop_ts_tokens(seq)
        red_masks = build_masks(reduced)
        # original text position -> its row in the reduced sequence; because
        # both i and i+1 are text at scored positions, successors line up
        red_index = np.full(seq.length, -1, dtype=np.int64)
        red_index[kept] = np.arange(len(kept))
        red_pos = red_index[text_pos]
        logp_text = _text_token_logprobs(params, reduced, red_masks, red_pos)

    # ratio in log space; overflow lands on inf and is clamped away
    with np.errstate(over="ignore"):
        raw = np.exp(logp_mm - logp_text)
    raw = np.clip(np.nan_to_num(raw, nan=cfg.clamp_hi, posinf=cfg.clamp_hi),
                  cfg.clamp_lo, cfg.clamp_hi)
    norm = raw / raw.mean()
    w = TokenWeights(text_pos, raw, norm, logp_text, logp_mm, warm=False)
    w.validate()
    return w


def dump_token_diagnostics(path, seq, vocab, weights):
    """Per-token CSV: token, modality, log-probs under both passes, W, W̃."""
    by_pos = {int(p): k for k, p in enumerate(weights.positions)}
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["position", "token", "modality", "logp_text", "logp_mm",
                      "weight_raw", "weight_norm"])
        for i in range(seq.length):
            if seq.tags[i] == TS:
                out.writerow([i, f"<ts:{seq.ids[i] - seq.text_vocab}>", "ts",
                              "", "", "", ""])
                continue
            word = vocab.words[seq.ids[i]]
            # the weight at position i-1 scores token i
            k = by_pos.get(i - 1)
            if k is None:
                out.writerow([i, word, "text", "", "", "", ""])
            else:
                out.writerow([i, word, "text",
                              f"{weights.logp_text[k]:.6f}",
                              f"{weights.logp_mm[k]:.6f}",
                              f"{weights.raw[k]:.6f}",
                              f"{weights.norm[k]:.6f}"])
