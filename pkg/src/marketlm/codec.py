"""Quantile discretization of continuous series into bin tokens.

A fitted codec holds the bin edges (empirical quantiles of the training
split), per-bin median representatives for diagnostics, a learnable per-bin
embedding table, and a linear projection into the model width. Multivariate
inputs get one independent codec per channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ALLOWED_BIN_COUNTS = (4, 8, 16, 32, 64)

CODEC_FORMAT_VERSION = 1


class FitError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class BinCodec:
    bins: int
    edges: np.ndarray          # bins-1 ascending thresholds
    representatives: np.ndarray  # per-bin medians of the fitting data
    embedding: np.ndarray      # bins x d_ts
    projection: np.ndarray     # d_ts x d_model

    @property
    def d_ts(self):
        return self.embedding.shape[1]

    @property
    def d_model(self):
        return self.projection.shape[1]

    def encode(self, v):
        """Bin id for value `v`: half-open [lo, hi) bins, edges assigned upward."""
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise DataError("encode requires finite values")
        return np.searchsorted(self.edges, v, side="right").astype(np.int64)

    def to_dict(self):
        return {
            "version": CODEC_FORMAT_VERSION,
            "B": self.bins,
            "d_ts": self.d_ts,
            "edges": self.edges.tolist(),
            "representatives": self.representatives.tolist(),
            "embedding": self.embedding.tolist(),
            "projection": self.projection.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CODEC_FORMAT_VERSION:
            raise DataError(f"unsupported codec version {d.get('version')!r}")
        return cls(
            bins=int(d["B"]),
            edges=np.asarray(d["edges"], dtype=np.float64),
            representatives=np.asarray(d["representatives"], dtype=np.float64),
            embedding=np.asarray(d["embedding"], dtype=np.float64),
            projection=np.asarray(d["projection"], dtype=np.float64),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def fit(values, bins, d_ts=32, d_model=None, seed=0):
    """Fit a codec on training-split values only.

    Edges sit at the k/B empirical quantiles so each bin carries ~1/B of the
    training mass. Embedding and projection are freshly initialized from the
    seed; the projection targets `d_model` (defaults to d_ts).
    """
    if bins not in ALLOWED_BIN_COUNTS:
        raise FitError(f"bin count {bins} outside tuning grid {ALLOWED_BIN_COUNTS}")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError("fit requires finite values")
    if np.unique(values).size < bins:
        raise FitError(f"need >= {bins} distinct values, got {np.unique(values).size}")
    qs = np.arange(1, bins) / bins
    edges = np.quantile(values, qs)
    if np.unique(edges).size != edges.size:
        raise FitError("degenerate value distribution: duplicate quantile edges")
    ids = np.searchsorted(edges, values, side="right")
    reps = np.array([np.median(values[ids == k]) for k in range(bins)])
    d_model = d_ts if d_model is None else d_model
    rng = np.random.default_rng(seed)
    embedding = rng.standard_normal((bins, d_ts)) * 0.02
    projection = rng.standard_normal((d_ts, d_model)) * (1.0 / np.sqrt(d_ts))
    return BinCodec(bins, edges, reps, embedding, projection)


def embed(codec, ids):
    """Model-width vector(s) for bin id(s): projection(embedding[id]).

    Numpy convenience; the differentiable path wraps the same tables in
    graph tensors inside the model.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= codec.bins):
        raise IndexError(f"bin id out of range [0, {codec.bins})")
    return codec.embedding[ids] @ codec.projection


def forward_fill(values):
    """Replace NaNs with the last preceding observation; leading NaNs stay NaN."""
    values = np.asarray(values, dtype=np.float64).copy()
    idx = np.where(np.isnan(values), -1, np.arange(values.size))
    np.maximum.accumulate(idx, out=idx)
    filled = np.where(idx >= 0, values[np.maximum(idx, 0)], np.nan)
    return filled


@dataclass
class ChannelSet:
    channels: list = field(default_factory=list)  # (name, BinCodec) pairs

    @property
    def names(self):
        return [n for n, _ in self.channels]

    @property
    def d_model(self):
        return self.channels[0][1].d_model

    def encode_day(self, row):
        """Per-channel bin ids for one day's channel values."""
        return np.array([c.encode(v) for (_, c), v in zip(self.channels, row)])

    def save(self, path):
        doc = {"version": CODEC_FORMAT_VERSION,
               "channels": [{"name": n, "codec": c.to_dict()} for n, c in self.channels]}
        with open(path, "w") as f:
            json.dump(doc, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = json.load(f)
        return cls([(ch["name"], BinCodec.from_dict(ch["codec"])) for ch in doc["channels"]])


def fit_channels(matrix, bins, d_ts=32, d_model=None, seed=0):
    """Fit one independent codec per channel after forward-filling gaps.

    `matrix` maps channel name -> value list (NaN marks missing). Days before
    a channel's first observation are dropped from that channel's fit.
    """
    channels = []
    for i, (name, vals) in enumerate(matrix.items()):
        filled = forward_fill(vals)
        observed = filled[~np.isnan(filled)]
        if observed.size == 0:
            raise DataError(f"channel {name!r} has no observations")
        codec = fit(observed, bins, d_ts=d_ts, d_model=d_model, seed=seed + i)
        channels.append((name, codec))
    names = [n for n, _ in channels]
    if len(set(names)) != len(names):
        raise DataError("duplicate channel names")
    return ChannelSet(channels)
