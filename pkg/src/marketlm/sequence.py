"""Interleaved multimodal token sequences and their attention masks.

A sample becomes one temporally ordered stream: one time-series bin token per
trading day, article token blocks inserted after their day's return token,
and a trailing end-of-sequence token feeding the classifier head. Text and
time-series ids live in disjoint ranges (ts ids are offset by the text
vocabulary size).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .corpus import RETURN_WINDOW

log = logging.getLogger(__name__)

TEXT = 0
TS = 1

BOA = "<boa>"
EOA = "<eoa>"
EOS = "<eos>"
UNK = "<unk>"
SPECIALS = (UNK, BOA, EOA, EOS)


def render_timestamp(ts):
    """Single-token text rendering of an article timestamp."""
    return ts.strftime("%Y-%m-%dT%H:%M")


class Vocab:
    """Text vocabulary over article words, timestamp tokens, and specials."""

    def __init__(self, words):
        self.words = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self):
        return len(self.words)

    def id(self, word):
        return self._index.get(word, self._index[UNK])

    def __contains__(self, word):
        return word in self._index

    @classmethod
    def build(cls, samples):
        words = set()
        for s in samples:
            for a in s.articles:
                words.update(a.text)
                words.add(render_timestamp(a.timestamp))
        return cls(words)

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"words": self.words}, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = json.load(f)
        v = cls([])
        v.words = doc["words"]
        v._index = {w: i for i, w in enumerate(v.words)}
        return v


@dataclass
class MultimodalSequence:
    ids: np.ndarray        # text ids, or text_vocab + bin id (channel 0) at ts rows
    tags: np.ndarray       # TEXT / TS per token
    days: np.ndarray       # trading-day index per token, non-decreasing
    ts_bins: np.ndarray    # (L, channels) bin ids, -1 at text rows
    ts_values: np.ndarray  # (L, channels) raw values, NaN at text rows
    text_vocab: int

    @property
    def length(self):
        return len(self.ids)

    @property
    def channels(self):
        return self.ts_bins.shape[1]

    def positions(self):
        """Consecutive indices; temporal spacing is carried by the ts tokens."""
        return np.arange(self.length, dtype=np.int64)

    def validate(self):
        if not np.all(np.diff(self.days) >= 0):
            raise ValueError("day-stamps must be non-decreasing")
        ts_rows = self.tags == TS
        if np.any(self.ids[ts_rows] < self.text_vocab):
            raise ValueError("ts token id below the ts range")
        if np.any(self.ids[~ts_rows] >= self.text_vocab):
            raise ValueError("text token id inside the ts range")

    def to_json(self):
        return json.dumps({"ids": self.ids.tolist(), "tags": self.tags.tolist(),
                           "days": self.days.tolist()})


@dataclass
class MaskPair:
    lower: np.ndarray  # causal AND same-modality
    upper: np.ndarray  # full causal

    def for_layer(self, layer, cross_modal_start):
        """1-based layer index; cross-modal attention from `cross_modal_start` up."""
        return self.upper if layer >= cross_modal_start else self.lower


def trading_days_for(sample):
    """The RETURN_WINDOW trading days covered by the sample's return window."""
    end = pd.Timestamp(sample.date) - pd.tseries.offsets.BDay(1)
    days = pd.bdate_range(end=end, periods=RETURN_WINDOW)
    return [d.date() for d in days]


def _day_index(calendar, day):
    """Index of the nearest trading day at/before `day`; -1 if out of window."""
    i = int(np.searchsorted(np.array(calendar, dtype="datetime64[D]"),
                            np.datetime64(day), side="right")) - 1
    return i


def interleave(sample, codecs, vocab, mode="mm", max_len=None):
    """Build the interleaved sequence for one sample.

    `codecs` is a BinCodec or a ChannelSet (channel 0 must be the return
    series). The return token of day d precedes that day's article blocks;
    same-day articles order by timestamp then source. Oversized sequences
    drop whole oldest days, never splitting an article block.
    """
    from .codec import BinCodec

    if isinstance(codecs, BinCodec):
        channels = [("returns", codecs)]
        channel_values = {"returns": sample.returns}
    else:
        channels = codecs.channels
        channel_values = {"returns": sample.returns, **sample.channels}

    calendar = trading_days_for(sample)
    values_by_day = np.stack(
        [np.asarray(channel_values[name], dtype=float) for name, _ in channels],
        axis=1)  # (RETURN_WINDOW, C)
    bins_by_day = np.stack(
        [codec.encode(values_by_day[:, i]) for i, (_, codec) in enumerate(channels)],
        axis=1)
    n_channels = bins_by_day.shape[1]
    no_bin = np.full(n_channels, -1, dtype=np.int64)
    no_val = np.full(n_channels, np.nan)

    # units: (day, order_key, token_ids, tags, bins_rows, value_rows)
    units = []
    if mode in ("mm", "ts"):
        for d in range(RETURN_WINDOW):
            ids = [vocab.size + int(bins_by_day[d, 0])]
            units.append((d, (0,), ids, [TS], [bins_by_day[d]], [values_by_day[d]]))
    if mode in ("mm", "text"):
        arts = sorted(sample.articles, key=lambda a: (a.timestamp, a.source))
        for a in arts:
            d = _day_index(calendar, a.day)
            if d < 0:
                log.info("interleave drop=stale_article company=%s ts=%s",
                         sample.company, a.timestamp)
                continue
            words = [BOA, render_timestamp(a.timestamp)] + list(a.text) + [EOA]
            ids = [vocab.id(w) for w in words]
            units.append((d, (1, a.timestamp, a.source), ids,
                          [TEXT] * len(ids), [no_bin] * len(ids),
                          [no_val] * len(ids)))
    units.sort(key=lambda u: (u[0], u[1]))

    eos_unit = (RETURN_WINDOW - 1, None, [vocab.id(EOS)], [TEXT], [no_bin], [no_val])
    if max_len is not None:
        total = sum(len(u[2]) for u in units) + 1
        while units and total > max_len:
            dropped = units.pop(0)
            total -= len(dropped[2])

    ids, tags, days, bins, vals = [], [], [], [], []
    for d, _, u_ids, u_tags, u_bins, u_vals in units + [eos_unit]:
        ids.extend(u_ids)
        tags.extend(u_tags)
        days.extend([d] * len(u_ids))
        bins.extend(u_bins)
        vals.extend(u_vals)

    seq = MultimodalSequence(
        ids=np.asarray(ids, dtype=np.int64),
        tags=np.asarray(tags, dtype=np.int8),
        days=np.asarray(days, dtype=np.int64),
        ts_bins=np.stack(bins).astype(np.int64),
        ts_values=np.stack(vals),
        text_vocab=vocab.size,
    )
    seq.validate()
    return seq


def build_masks(seq):
    """Causal masks: upper allows all j <= i; lower additionally requires
    matching modality tags (diagonal always allowed)."""
    L = seq.length
    causal = np.tril(np.ones((L, L), dtype=bool))
    same = seq.tags[:, None] == seq.tags[None, :]
    return MaskPair(lower=causal & same, upper=causal)


def drop_ts_tokens(seq):
    """Text-only view of a sequence (contrastive baseline / text-only runs).

    Text tokens keep their order and are renumbered contiguously; returns the
    reduced sequence plus the original indices of the kept tokens.
    """
    keep = np.flatnonzero(seq.tags == TEXT)
    reduced = MultimodalSequence(
        ids=seq.ids[keep].copy(),
        tags=seq.tags[keep].copy(),
        days=seq.days[keep].copy(),
        ts_bins=seq.ts_bins[keep].copy(),
        ts_values=seq.ts_values[keep].copy(),
        text_vocab=seq.text_vocab,
    )
    return reduced, keep
