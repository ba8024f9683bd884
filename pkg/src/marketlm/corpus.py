"""Article curation, direction labels, and synthetic corpora.

The synthetic generator plants verifiable cross-modal signal: a persistent
hidden Markov state drives daily returns, and a designated "salient" slice of
the vocabulary is emitted with polarity tied to the recent cumulative return.
Signal strength `kappa` scales both the state-dependent drift and the
polarity coupling, so kappa=0 yields an unpredictable random walk with text
independent of returns.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

RETURN_WINDOW = 252
MAX_ARTICLES = 10
MIN_ARTICLES_PER_YEAR = 5
TRUNCATE_WORDS = 128
MIN_CHARS = 100
MAX_CHARS = 10_000
MAX_NUMERIC_FRAC = 0.10
JACCARD_DUP = 0.90
HORIZONS = (7, 30)


class CorpusError(ValueError):
    pass


@dataclass
class Article:
    company: str
    timestamp: datetime
    text: list  # words, truncated to the first TRUNCATE_WORDS
    source: str = ""

    @property
    def day(self) -> date:
        return self.timestamp.date()


@dataclass
class CompanySample:
    company: str
    date: date
    returns: np.ndarray               # the trailing RETURN_WINDOW daily returns
    articles: list                    # ascending by timestamp, <= MAX_ARTICLES
    label_7d: int | None
    label_30d: int | None
    channels: dict = field(default_factory=dict)  # extra per-channel trailing values

    def validate(self):
        if len(self.returns) != RETURN_WINDOW:
            raise CorpusError(f"{self.company}@{self.date}: expected "
                              f"{RETURN_WINDOW} returns, got {len(self.returns)}")
        if not np.all(np.isfinite(self.returns)):
            raise CorpusError(f"{self.company}@{self.date}: non-finite returns")
        if len(self.articles) > MAX_ARTICLES:
            raise CorpusError(f"{self.company}@{self.date}: too many articles")
        if len(self.articles) < MIN_ARTICLES_PER_YEAR:
            raise CorpusError(f"{self.company}@{self.date}: fewer than "
                              f"{MIN_ARTICLES_PER_YEAR} articles in trailing year")
        stamps = [a.timestamp for a in self.articles]
        if stamps != sorted(stamps):
            raise CorpusError(f"{self.company}@{self.date}: articles out of order")
        horizon = timedelta(days=365)
        for a in self.articles:
            if a.day >= self.date or a.day < self.date - horizon:
                raise CorpusError(f"{self.company}@{self.date}: article outside "
                                  "the trailing year")
        for v in self.channels.values():
            if len(v) != RETURN_WINDOW:
                raise CorpusError(f"{self.company}@{self.date}: channel length "
                                  f"!= {RETURN_WINDOW}")

    def label(self, horizon):
        if horizon == 7:
            return self.label_7d
        if horizon == 30:
            return self.label_30d
        raise ValueError(f"unknown horizon {horizon}")


# -- curation ---------------------------------------------------------------


def _numeric_fraction(body):
    if not body:
        return 0.0
    return sum(ch.isdigit() for ch in body) / len(body)


def _word_set(words):
    return {w.lower() for w in words}


def _jaccard(a, b):
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def curate(raw_records, blocklist=()):
    """Apply the quality filters in order and return surviving Articles.

    Filter order: single-company tag, character-length bounds, numeric
    fraction, word-level Jaccard dedup against previously accepted articles
    of the same company, then the stock-specificity blocklist. Records with
    unparseable timestamps are skipped with a logged reason code.
    """
    blocklist = [b.lower() for b in blocklist if b.strip()]
    accepted = []
    accepted_sets = {}  # company -> list of word sets
    for rec in sorted(raw_records, key=lambda r: str(r.get("ts", ""))):
        companies = rec.get("companies")
        if companies is None:
            companies = [rec["company"]] if "company" in rec else []
        if len(companies) != 1:
            log.info("curate reject=multi_company ts=%s", rec.get("ts"))
            continue
        company = companies[0]
        try:
            ts = datetime.fromisoformat(str(rec["ts"]))
        except (KeyError, ValueError):
            log.info("curate reject=bad_timestamp company=%s", company)
            continue
        body = rec.get("text", "")
        if not (MIN_CHARS < len(body) < MAX_CHARS):
            log.info("curate reject=length company=%s ts=%s", company, ts)
            continue
        if _numeric_fraction(body) >= MAX_NUMERIC_FRAC:
            log.info("curate reject=numeric_fraction company=%s ts=%s", company, ts)
            continue
        words = body.split()
        wset = _word_set(words)
        if any(_jaccard(wset, prev) >= JACCARD_DUP for prev in accepted_sets.get(company, [])):
            log.info("curate reject=duplicate company=%s ts=%s", company, ts)
            continue
        lowered = body.lower()
        if any(pat in lowered for pat in blocklist):
            log.info("curate reject=blocklist company=%s ts=%s", company, ts)
            continue
        accepted_sets.setdefault(company, []).append(wset)
        accepted.append(Article(company=company, timestamp=ts,
                                text=words[:TRUNCATE_WORDS],
                                source=rec.get("source", "")))
    accepted.sort(key=lambda a: (a.timestamp, a.company))
    return accepted


def load_blocklist(path):
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


# -- labeling ---------------------------------------------------------------


def label(prices, t, horizon):
    """Direction of the price move over `horizon` calendar days from `t`.

    `prices` maps trading-day dates to closes. The calendar-day horizon is
    mapped to the nearest following trading day with a price. Returns 1 for
    up, 0 for down, None on an exact tie or a missing endpoint.
    """
    if t not in prices:
        return None
    target = t + timedelta(days=horizon)
    future_days = sorted(d for d in prices if d >= target)
    if not future_days:
        return None
    p0, p1 = prices[t], prices[future_days[0]]
    if p1 > p0:
        return 1
    if p1 < p0:
        return 0
    return None


def balance(samples, horizon, seed=0):
    """Equalize class counts at `horizon` by downsampling the majority class."""
    pos = [s for s in samples if s.label(horizon) == 1]
    neg = [s for s in samples if s.label(horizon) == 0]
    if not pos or not neg:
        raise CorpusError("balance requires both classes present")
    rng = np.random.default_rng(seed)
    n = min(len(pos), len(neg))
    if len(pos) > n:
        pos = [pos[i] for i in sorted(rng.choice(len(pos), size=n, replace=False))]
    if len(neg) > n:
        neg = [neg[i] for i in sorted(rng.choice(len(neg), size=n, replace=False))]
    out = pos + neg
    out.sort(key=lambda s: (s.date, s.company))
    return out


# -- synthetic corpus -------------------------------------------------------


@dataclass
class SyntheticSpec:
    vocab_words: int = 60         # filler vocabulary size
    states: int = 2               # latent regimes
    state_persistence: float = 0.90
    drift: float = 0.006          # per-state daily drift magnitude (scaled by kappa)
    vol: float = 0.012
    salient_words: int = 8        # words per polarity set
    salient_prob: float = 0.4     # chance a body token is salient
    articles_per_year: float = 9.0
    tokens_per_article: int = 12
    lookback: int = 10            # days of cumulative return driving polarity
    kappa: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")

    @property
    def pos_words(self):
        return [f"up{i}" for i in range(self.salient_words)]

    @property
    def neg_words(self):
        return [f"dn{i}" for i in range(self.salient_words)]

    @property
    def filler_words(self):
        return [f"w{i:03d}" for i in range(self.vocab_words)]

    def lexicon(self):
        """Category -> word set, in the tab-separated lexicon file layout."""
        return {
            "Positive": set(self.pos_words),
            "Negative": set(self.neg_words),
            "All-Sentiment": set(self.pos_words) | set(self.neg_words),
            "Non-Sentiment": set(self.filler_words),
        }


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    samples: list
    market: dict  # company -> {"dates": [date], "prices": ndarray, "returns": ndarray}


def _simulate_company(spec, rng, n_days):
    """Latent Markov chain -> returns; returns -> prices and article stream."""
    drifts = np.linspace(-1.0, 1.0, spec.states) * spec.drift * spec.kappa
    state = rng.integers(spec.states)
    states = np.empty(n_days, dtype=np.int64)
    for d in range(n_days):
        if rng.random() > spec.state_persistence:
            state = rng.integers(spec.states)
        states[d] = state
    returns = drifts[states] + rng.normal(0.0, spec.vol, size=n_days)
    prices = 100.0 * np.cumprod(1.0 + returns)
    return states, returns, prices


def _emit_article(spec, rng, company, day_ts, recent_cum_return):
    words = []
    match_prob = 0.5 * (1.0 + spec.kappa)
    for _ in range(spec.tokens_per_article):
        if rng.random() < spec.salient_prob:
            matches = rng.random() < match_prob
            positive = (recent_cum_return >= 0) == matches
            pool = spec.pos_words if positive else spec.neg_words
            words.append(pool[rng.integers(len(pool))])
        else:
            words.append(spec.filler_words[rng.integers(spec.vocab_words)])
    return Article(company=company, timestamp=day_ts, text=words, source="synth")


def generate_synthetic(spec, n, start="2018-01-02", with_market=False, stagger_days=5):
    """Generate `n` labeled CompanySamples (one per synthetic company).

    Company start dates are staggered by `stagger_days` calendar days so
    prediction dates spread over time, which lets callers partition
    temporally or form monthly portfolios. Same seed, same bytes.
    """
    samples = []
    market = {}
    company_idx = 0
    horizon_pad = 35  # trading days to cover the 30-calendar-day label
    n_days = RETURN_WINDOW + spec.lookback + horizon_pad + 10
    base = pd.Timestamp(start)
    while len(samples) < n:
        cid = f"C{company_idx:04d}"
        rng = np.random.default_rng([spec.seed, company_idx])
        days = pd.bdate_range(base + pd.Timedelta(days=company_idx * stagger_days),
                              periods=n_days)
        days = [d.date() for d in days]
        _, returns, prices = _simulate_company(spec, rng, n_days)
        price_map = dict(zip(days, prices))
        company_idx += 1

        # article stream over the window preceding the prediction date
        t_idx = RETURN_WINDOW + spec.lookback
        daily_rate = spec.articles_per_year / RETURN_WINDOW
        articles = []
        for d in range(spec.lookback, t_idx):
            if rng.random() < daily_rate:
                cum = returns[d - spec.lookback:d].sum()
                ts = datetime.combine(days[d], datetime.min.time()) + timedelta(hours=12)
                articles.append(_emit_article(spec, rng, cid, ts, cum))
        if len(articles) < MIN_ARTICLES_PER_YEAR:
            continue

        t = days[t_idx]
        year_ago = t - timedelta(days=365)
        in_window = [a for a in articles if year_ago <= a.day < t]
        if len(in_window) < MIN_ARTICLES_PER_YEAR:
            continue
        sample = CompanySample(
            company=cid,
            date=t,
            returns=returns[t_idx - RETURN_WINDOW:t_idx].copy(),
            articles=in_window[-MAX_ARTICLES:],
            label_7d=label(price_map, t, 7),
            label_30d=label(price_map, t, 30),
        )
        if sample.label_30d is None:
            continue
        sample.validate()
        samples.append(sample)
        if with_market:
            market[cid] = {"dates": days, "prices": prices, "returns": returns}
    return SyntheticCorpus(spec=spec, samples=samples, market=market)


def add_noise_channels(samples, names, seed=0):
    """Attach pure-noise extra channels (multivariate runs with no new signal)."""
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, 7919, i])
        s.channels = {name: rng.normal(0.0, 0.01, size=RETURN_WINDOW)
                      for name in names}
    return samples


# -- serialization ----------------------------------------------------------


def save_jsonl(samples, path):
    with open(path, "w") as f:
        for s in samples:
            rec = {
                "company": s.company,
                "date": s.date.isoformat(),
                "returns": [float(r) for r in s.returns],
                "articles": [{"ts": a.timestamp.strftime("%Y-%m-%dT%H:%M"),
                              "text": " ".join(a.text)} for a in s.articles],
                "label_7d": s.label_7d,
                "label_30d": s.label_30d,
            }
            if s.channels:
                rec["channels"] = {k: [float(x) for x in v]
                                   for k, v in s.channels.items()}
            f.write(json.dumps(rec) + "\n")


def load_jsonl(path):
    samples = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            sample = CompanySample(
                company=rec["company"],
                date=date.fromisoformat(rec["date"]),
                returns=np.asarray(rec["returns"], dtype=np.float64),
                articles=[Article(company=rec["company"],
                                  timestamp=datetime.fromisoformat(a["ts"]),
                                  text=a["text"].split())
                          for a in rec["articles"]],
                label_7d=rec["label_7d"],
                label_30d=rec["label_30d"],
                channels={k: np.asarray(v, dtype=np.float64)
                          for k, v in rec.get("channels", {}).items()},
            )
            sample.validate()
            samples.append(sample)
    return samples


def save_lexicon(lexicon, path):
    with open(path, "w") as f:
        for category in sorted(lexicon):
            for word in sorted(lexicon[category]):
                f.write(f"{category}\t{word}\n")


def split_by_date(samples, train_end, val_end):
    """Temporal partition: train strictly before train_end, val before val_end."""
    train_end = date.fromisoformat(train_end) if isinstance(train_end, str) else train_end
    val_end = date.fromisoformat(val_end) if isinstance(val_end, str) else val_end
    train = [s for s in samples if s.date < train_end]
    val = [s for s in samples if train_end <= s.date < val_end]
    test = [s for s in samples if s.date >= val_end]
    return train, val, test
