from datetime import date, timedelta

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from marketlm import corpus as CP


def _raw(ts="2020-01-02T09:00", text=None, company="AAA", **kw):
    if text is None:
        text = "solid quarterly report with broad based demand " * 5
    rec = {"company": company, "ts": ts, "text": text}
    rec.update(kw)
    return rec


def test_curate_rejects_short_article():
    assert CP.curate([_raw(text="x" * 50)]) == []


def test_curate_accepts_normal_article():
    arts = CP.curate([_raw()])
    assert len(arts) == 1
    assert arts[0].company == "AAA"


def test_curate_rejects_exact_duplicate():
    recs = [_raw(ts="2020-01-02T09:00"), _raw(ts="2020-01-03T09:00")]
    assert len(CP.curate(recs)) == 1


def test_curate_rejects_numeric_heavy():
    text = ("9" * 20 + "abcde " * 20)  # >10% digits, length ok
    assert CP.curate([_raw(text=text)]) == []


def test_curate_rejects_multi_company_tag():
    assert CP.curate([_raw(companies=["AAA", "BBB"])]) == []


def test_curate_skips_bad_timestamp():
    assert CP.curate([_raw(ts="not-a-date")]) == []


def test_curate_blocklist():
    assert CP.curate([_raw(text="market summary " * 20)], blocklist=["market summary"]) == []


def test_curate_truncates_to_128_words():
    text = " ".join("alpha beta gamma delta".split()[i % 4] for i in range(300))
    arts = CP.curate([_raw(text=text)])
    assert len(arts[0].text) == 128


def test_curate_idempotent():
    recs = [_raw(), _raw(ts="2020-01-05T09:00", text="totally different body " * 10),
            _raw(ts="2020-01-06T09:00")]
    once = CP.curate(recs)
    again = CP.curate([{"company": a.company, "ts": a.timestamp.isoformat(),
                        "text": " ".join(a.text)} for a in once])
    assert [(a.company, a.timestamp) for a in once] == \
           [(a.company, a.timestamp) for a in again]


def test_curate_dedup_scoped_per_company():
    recs = [_raw(company="AAA"), _raw(company="BBB", ts="2020-01-03T09:00")]
    assert len(CP.curate(recs)) == 2


def test_label_up_down_tie():
    d0 = date(2020, 1, 6)
    prices = {d0: 100.0,
              d0 + timedelta(days=7): 105.0,
              d0 + timedelta(days=30): 99.0}
    assert CP.label(prices, d0, 7) == 1
    assert CP.label(prices, d0, 30) == 0
    tie = {d0: 100.0, d0 + timedelta(days=7): 100.0}
    assert CP.label(tie, d0, 7) is None


def test_label_missing_endpoint():
    d0 = date(2020, 1, 6)
    assert CP.label({d0: 100.0}, d0, 7) is None
    assert CP.label({}, d0, 7) is None


def test_label_maps_to_next_trading_day():
    d0 = date(2020, 1, 6)
    # horizon lands on a weekend; the following Monday close decides
    prices = {d0: 100.0, date(2020, 1, 14): 101.0}
    assert CP.label(prices, d0, 7) == 1


def _mk_sample(i, l7, l30):
    day = date(2020, 6, 1) + timedelta(days=i)
    arts = [CP.Article("C", CP.datetime(2020, 3, 1 + j, 12), ["w0"]) for j in range(5)]
    return CP.CompanySample(f"C{i}", day, np.zeros(252), arts, l7, l30)


def test_balance_downsamples_majority():
    samples = [_mk_sample(i, 1, 1) for i in range(60)] + \
              [_mk_sample(100 + i, 0, 0) for i in range(40)]
    out = CP.balance(samples, 30, seed=1)
    labels = [s.label_30d for s in out]
    assert labels.count(1) == labels.count(0) == 40


def test_balance_already_balanced_and_deterministic():
    samples = [_mk_sample(i, 1, 1) for i in range(5)] + \
              [_mk_sample(10 + i, 0, 0) for i in range(5)]
    out = CP.balance(samples, 30, seed=3)
    assert len(out) == 10
    ids_a = [s.company for s in CP.balance(samples, 30, seed=3)]
    ids_b = [s.company for s in CP.balance(samples, 30, seed=3)]
    assert ids_a == ids_b


def test_balance_single_class_errors():
    with pytest.raises(CP.CorpusError):
        CP.balance([_mk_sample(0, 1, 1)], 30)


def test_generate_synthetic_valid_samples():
    corpus = CP.generate_synthetic(CP.SyntheticSpec(seed=5), n=6)
    assert len(corpus.samples) == 6
    for s in corpus.samples:
        s.validate()
        assert s.label_30d in (0, 1)


def test_generate_synthetic_deterministic():
    spec = CP.SyntheticSpec(seed=9)
    a = CP.generate_synthetic(spec, n=4)
    b = CP.generate_synthetic(spec, n=4)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.company == sb.company and sa.date == sb.date
        assert np.array_equal(sa.returns, sb.returns)
        assert [x.text for x in sa.articles] == [x.text for x in sb.articles]


def test_kappa_zero_text_return_independence():
    # chi-squared between salient-token polarity and recent-return sign
    spec = CP.SyntheticSpec(kappa=0.0, seed=2, articles_per_year=40.0)
    corpus = CP.generate_synthetic(spec, n=40)
    pos_set, neg_set = set(spec.pos_words), set(spec.neg_words)
    table = np.zeros((2, 2))
    for s in corpus.samples:
        for a in s.articles:
            day_idx = None  # recent sign from trailing returns before the article
            offs = (s.date - a.day).days
            # approximate trading-day offset; sign over the sample's last window
            k = max(spec.lookback, min(251, 252 - offs))
            sign = int(s.returns[k - spec.lookback:k].sum() >= 0)
            for w in a.text:
                if w in pos_set:
                    table[sign, 1] += 1
                elif w in neg_set:
                    table[sign, 0] += 1
    assert table.sum() > 1000
    _, p, _, _ = chi2_contingency(table)
    assert p > 0.01


def test_kappa_one_oracle_beats_marginal():
    # With kappa=1 the polarity side is a deterministic function of the
    # recent cumulative return, so an oracle that sees it achieves loss
    # ln(salient_words) on salient tokens; a context-blind marginal cannot
    # beat ln(2 * salient_words).
    spec = CP.SyntheticSpec(kappa=1.0, seed=3)
    oracle_loss = np.log(spec.salient_words)
    marginal_loss = np.log(2 * spec.salient_words)
    assert marginal_loss > oracle_loss
    # empirical check: within a polarity side the draw is uniform over that side
    corpus = CP.generate_synthetic(spec, n=30, stagger_days=1)
    counts = {w: 0 for w in spec.pos_words + spec.neg_words}
    for s in corpus.samples:
        for a in s.articles:
            for w in a.text:
                if w in counts:
                    counts[w] += 1
    freqs = np.array(list(counts.values()), dtype=float)
    freqs /= freqs.sum()
    emp_marginal = -float(np.log(freqs).mean())
    assert emp_marginal > oracle_loss


def test_jsonl_roundtrip(tmp_path):
    corpus = CP.generate_synthetic(CP.SyntheticSpec(seed=11), n=3)
    CP.add_noise_channels(corpus.samples, ["volu"], seed=1)
    path = tmp_path / "samples.jsonl"
    CP.save_jsonl(corpus.samples, path)
    loaded = CP.load_jsonl(path)
    assert len(loaded) == 3
    for a, b in zip(corpus.samples, loaded):
        assert a.company == b.company and a.date == b.date
        assert np.allclose(a.returns, b.returns)
        assert [x.text for x in a.articles] == [x.text for x in b.articles]
        assert np.allclose(a.channels["volu"], b.channels["volu"])


def test_split_by_date_partition():
    corpus = CP.generate_synthetic(CP.SyntheticSpec(seed=4), n=12, stagger_days=30)
    dates = sorted(s.date for s in corpus.samples)
    train_end = dates[6].isoformat()
    val_end = dates[9].isoformat()
    train, val, test = CP.split_by_date(corpus.samples, train_end, val_end)
    assert len(train) + len(val) + len(test) == 12
    assert all(s.date < dates[6] for s in train)
    assert all(s.date >= dates[9] for s in test)


def test_articles_never_postdate_prediction():
    corpus = CP.generate_synthetic(CP.SyntheticSpec(seed=6), n=5)
    for s in corpus.samples:
        assert all(a.day < s.date for a in s.articles)


def test_lexicon_file_roundtrip(tmp_path):
    spec = CP.SyntheticSpec()
    path = tmp_path / "lexicon.tsv"
    CP.save_lexicon(spec.lexicon(), path)
    lines = path.read_text().splitlines()
    assert f"Positive\t{spec.pos_words[0]}" in lines
    assert all("\t" in line for line in lines)
