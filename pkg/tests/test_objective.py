import csv

import numpy as np
import pytest

from marketlm import model as M
from marketlm import objective as O
from marketlm import sequence as S
from marketlm import tensor as T
from tests.test_model import toy_config, toy_seq


def _setup(**kw):
    params = M.ModelParams.init(toy_config(**kw))
    seq, masks = toy_seq()
    return params, seq, masks


def test_weight_config_validation():
    with pytest.raises(O.ObjectiveError):
        O.WeightConfig(total_steps=100, warm_frac=1.5)
    with pytest.raises(O.ObjectiveError):
        O.WeightConfig(total_steps=100, clamp_lo=2.0)
    cfg = O.WeightConfig(total_steps=100)
    assert cfg.warm(19) and not cfg.warm(20)


def test_uniform_reduces_to_plain_sum():
    params, seq, masks = _setup()
    res = O.dual_loss(params, seq, masks)
    out = M.forward(params, seq, masks)
    text_pos, ts_pos = O.scored_positions(seq)
    lp = T.log_softmax_rows(out.text_logits).data
    expect_text = -lp[text_pos, seq.ids[text_pos + 1]].mean()
    lp_ts = T.log_softmax_rows(out.ts_logits[0]).data
    expect_ts = -lp_ts[ts_pos, seq.ts_bins[ts_pos + 1, 0]].mean()
    assert np.allclose(res.text_component.data, expect_text)
    assert np.allclose(res.ts_component.data, expect_ts)
    assert np.allclose(res.total.data, expect_text + expect_ts)


def test_pure_text_sequence_has_no_ts_component():
    params, seq, masks = _setup()
    reduced, _ = S.drop_ts_tokens(seq)
    res = O.dual_loss(params, reduced, S.build_masks(reduced))
    assert res.ts_component is None and res.missing_ts
    assert np.allclose(res.total.data, res.text_component.data)


def test_doubling_one_weight_matches_hand_computation():
    params, seq, masks = _setup()
    text_pos, _ = O.scored_positions(seq)
    w = O.uniform_weights(seq)
    raw = np.ones(len(text_pos))
    raw[0] = 2.0
    norm = raw / raw.mean()
    w = O.TokenWeights(text_pos, raw, norm, w.logp_text, w.logp_mm)
    res = O.dual_loss(params, seq, masks, weights=w)
    out = M.forward(params, seq, masks)
    lp = T.log_softmax_rows(out.text_logits).data
    tok_lp = lp[text_pos, seq.ids[text_pos + 1]]
    expect = -(norm * tok_lp).sum() / norm.sum()
    assert np.allclose(res.text_component.data, expect)


def test_raw_sum_mode_pools_counts():
    params, seq, masks = _setup()
    res = O.dual_loss(params, seq, masks, raw_sum=True)
    sep = O.dual_loss(params, seq, masks)
    n_t, n_s = sep.n_text, sep.n_ts
    expect = (sep.text_component.data * n_t + sep.ts_component.data * n_s) / (n_t + n_s)
    assert np.allclose(res.total.data, expect)


def test_warm_start_weights_all_one():
    params, seq, masks = _setup()
    cfg = O.WeightConfig(total_steps=100)
    w = O.contrastive_weights(params, seq, masks, cfg, step=19)
    assert w.warm and np.all(w.norm == 1.0)
    # bit-exact equivalence with the uniform path
    a = O.dual_loss(params, seq, masks, weights=w).total.data
    b = O.dual_loss(params, seq, masks).total.data
    assert np.array_equal(a, b)


def test_weights_mean_one_and_clamped():
    params, seq, masks = _setup()
    cfg = O.WeightConfig(total_steps=10)
    w = O.contrastive_weights(params, seq, masks, cfg, step=9)
    assert not w.warm
    assert abs(w.norm.mean() - 1.0) < 1e-12
    assert np.all(w.raw >= cfg.clamp_lo) and np.all(w.raw <= cfg.clamp_hi)


def test_normalization_arithmetic():
    raw = np.array([2.0, 1.0, 1.0])
    norm = raw / raw.mean()
    assert np.allclose(norm, [1.5, 0.75, 0.75])


def test_extreme_ratio_clamped_before_normalization():
    cfg = O.WeightConfig(total_steps=10)
    logp_mm = np.array([np.log(50.0), 0.0])
    logp_text = np.array([0.0, 0.0])
    raw = np.clip(np.exp(logp_mm - logp_text), cfg.clamp_lo, cfg.clamp_hi)
    assert raw[0] == 10.0


def test_weights_gradient_free():
    params, seq, masks = _setup()
    cfg = O.WeightConfig(total_steps=10)
    for t in params.trainable():
        t.zero_grad()
    O.contrastive_weights(params, seq, masks, cfg, step=9)
    assert all(t.grad is None for t in params.trainable())


def test_no_ts_tokens_forces_unit_ratio():
    params, seq, masks = _setup()
    reduced, _ = S.drop_ts_tokens(seq)
    red_masks = S.build_masks(reduced)
    cfg = O.WeightConfig(total_steps=10)
    w = O.contrastive_weights(params, reduced, red_masks, cfg, step=9)
    assert np.allclose(w.raw, 1.0, atol=1e-12)
    assert np.allclose(w.norm, 1.0, atol=1e-12)


def test_mismatched_weights_rejected():
    params, seq, masks = _setup()
    w = O.uniform_weights(seq)
    bad = O.TokenWeights(w.positions[:-1], w.raw[:-1], w.norm[:-1],
                         w.logp_text[:-1], w.logp_mm[:-1], warm=True)
    with pytest.raises(O.ObjectiveError):
        O.dual_loss(params, seq, masks, weights=bad)


def test_loss_backward_reaches_adapters():
    params, seq, masks = _setup()
    params.freeze_text().apply_adapters(16)
    res = O.dual_loss(params, seq, masks)
    res.total.backward()
    grads = [a.grad is not None or b.grad is not None
             for a, b in params.adapters.values()]
    assert any(grads)
    assert all(params[n].grad is None for n in params.text_names)


def test_continuous_mode_uses_mse():
    params = M.ModelParams.init(toy_config(ts_embed_mode="linear"))
    seq, masks = toy_seq()
    res = O.dual_loss(params, seq, masks)
    assert res.ts_component is not None
    assert res.ts_component.data >= 0


def test_diagnostics_dump(tmp_path):
    params, seq, masks = _setup()
    vocab = S.Vocab([f"x{i}" for i in range(8)])
    cfg = O.WeightConfig(total_steps=10)
    w = O.contrastive_weights(params, seq, masks, cfg, step=9)
    path = tmp_path / "diag.csv"
    O.dump_token_diagnostics(path, seq, vocab, w)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == seq.length
    scored = [r for r in rows if r["weight_norm"]]
    assert len(scored) == len(w.positions)
    k = float(scored[0]["weight_raw"])
    assert 0.1 <= k <= 10.0
    assert {r["modality"] for r in rows} == {"text", "ts"}
