import numpy as np
import pytest

from layerslim.errors import ParameterError, StateError
from layerslim.model import ForwardTrace, ModelConfig, TokenStream, forward, init_model
from layerslim.token_importance import (
    TokenScoreSheet,
    score_records,
    score_tokens,
    select_top_p,
)


def make_trace(attn_per_layer, T, vocab=8):
    return ForwardTrace(
        logits=np.zeros((T, vocab), dtype=np.float32),
        hidden=[np.zeros((T, 2), dtype=np.float32)] * (len(attn_per_layer) + 1),
        attention=[np.asarray(a, dtype=np.float32) for a in attn_per_layer],
        attn_contrib=[],
        mlp_contrib=[],
    )


def causal_uniform(T):
    a = np.zeros((T, T))
    for i in range(T):
        a[i, : i + 1] = 1.0 / (i + 1)
    return a


class TestSelectTopP:
    def test_keep_count_and_tie_break(self):
        # scores [0.9, 0.9, 0.1], p=0.34 -> ceil(1.02)=2 kept, tie -> lower index
        keep = select_top_p(np.array([0.9, 0.9, 0.1]), p=0.34)
        assert keep.tolist() == [True, True, False]

    def test_minimum_one_token(self):
        keep = select_top_p(np.array([0.2, 0.8, 0.5]), p=0.01)
        assert keep.sum() == 1
        assert keep[1]

    def test_p_one_keeps_all(self):
        keep = select_top_p(np.array([0.2, 0.8, 0.5]), p=1.0)
        assert keep.all()

    def test_monotone_in_p(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(size=17)
        prev = np.zeros(17, dtype=bool)
        for p in np.linspace(0.05, 1.0, 20):
            keep = select_top_p(scores, float(p))
            assert keep[prev].all(), "larger p must keep a superset"
            prev = keep

    def test_ties_prefer_earlier_positions(self):
        keep = select_top_p(np.array([0.5, 0.5, 0.5, 0.5]), p=0.5)
        assert keep.tolist() == [True, True, False, False]

    def test_invalid_p(self):
        for p in (0.0, -0.2, 1.5):
            with pytest.raises(ParameterError):
                select_top_p(np.array([1.0]), p)


class TestScoreTokens:
    def test_single_visual_single_text(self):
        # T=2: one visual, one text; attention row 1 = [w, 1-w]
        w = 0.3
        a = np.array([[[1.0, 0.0], [w, 1.0 - w]]])
        trace = make_trace([a], T=2)
        s = TokenStream(visual=(4,), text=(5,))
        sheet = score_tokens(trace, s, layer=0, p=1.0)
        # visual token receives its own full self-attention and w from text
        assert np.isclose(sheet.intra[0], 1.0)
        assert np.isclose(sheet.cross[0], w)
        assert np.isclose(sheet.combined[0], (1.0 + w) / 2)
        # text token: intra = own attention only, no cross, not halved
        assert np.isclose(sheet.intra[1], 1.0 - w)
        assert sheet.cross[1] == 0.0
        assert np.isclose(sheet.combined[1], 1.0 - w)

    def test_uniform_attention_enumeration_oracle(self):
        # uniform causal attention over 4 visual + 2 text tokens: compare
        # against explicit enumeration of received attention
        T, vis = 6, 4
        a = causal_uniform(T)
        trace = make_trace([a[np.newaxis]], T=T)
        s = TokenStream(visual=(4, 5, 6, 7), text=(3, 2))
        sheet = score_tokens(trace, s, layer=0, p=1.0)
        for i in range(T):
            if i < vis:
                want_intra = np.mean([a[j, i] for j in range(i, vis)])
                want_cross = np.mean([a[j, i] for j in range(vis, T)])
                assert np.isclose(sheet.intra[i], want_intra)
                assert np.isclose(sheet.cross[i], want_cross)
                assert np.isclose(sheet.combined[i], (want_intra + want_cross) / 2)
            else:
                want_intra = np.mean([a[j, i] for j in range(i, T)])
                assert np.isclose(sheet.intra[i], want_intra)
                assert np.isclose(sheet.combined[i], want_intra)

    def test_head_mean_before_column_mean(self):
        # two heads with different maps; scoring must use the head average
        T = 2
        h1 = np.array([[1.0, 0.0], [0.8, 0.2]])
        h2 = np.array([[1.0, 0.0], [0.2, 0.8]])
        trace = make_trace([np.stack([h1, h2])], T=T)
        s = TokenStream(visual=(4,), text=(5,))
        sheet = score_tokens(trace, s, layer=0, p=1.0)
        assert np.isclose(sheet.cross[0], 0.5)  # mean of 0.8 and 0.2

    def test_identical_heads_match_single_head(self):
        T = 4
        a = causal_uniform(T)
        trace1 = make_trace([a[np.newaxis]], T=T)
        trace3 = make_trace([np.stack([a, a, a])], T=T)
        s = TokenStream(visual=(4, 5), text=(6, 2))
        one = score_tokens(trace1, s, layer=0, p=0.5)
        three = score_tokens(trace3, s, layer=0, p=0.5)
        assert np.allclose(one.combined, three.combined)
        assert np.array_equal(one.keep, three.keep)

    def test_scores_bounded_on_real_model(self):
        cfg = ModelConfig(
            vocab_size=16, dim=8, n_layers=2, n_heads=2, mlp_hidden=8, max_seq=10, seed=1
        )
        m = init_model(cfg)
        s = TokenStream(visual=(4, 5, 6, 7), text=(8, 2))
        tr = forward(m, s, capture=True)
        for layer in range(cfg.n_layers):
            sheet = score_tokens(tr, s, layer, p=0.25)
            for arr in (sheet.intra, sheet.cross, sheet.combined):
                assert np.all(arr >= 0.0) and np.all(arr <= 1.0)
            assert sheet.keep_count == max(1, int(np.ceil(0.25 * len(s))))

    def test_token_id_relabeling_leaves_selection_unchanged(self):
        # scores depend on the attention maps, not on the raw token ids
        T = 5
        a = causal_uniform(T)
        trace = make_trace([a[np.newaxis]], T=T)
        s1 = TokenStream(visual=(4, 5, 6), text=(7, 2))
        s2 = TokenStream(visual=(9, 10, 11), text=(12, 3))
        k1 = score_tokens(trace, s1, layer=0, p=0.4)
        k2 = score_tokens(trace, s2, layer=0, p=0.4)
        assert np.array_equal(k1.keep, k2.keep)
        assert np.allclose(k1.combined, k2.combined)

    def test_requires_capture(self):
        tr = ForwardTrace(logits=np.zeros((2, 8), dtype=np.float32))
        with pytest.raises(StateError):
            score_tokens(tr, TokenStream(visual=(4,), text=(5,)), 0)

    def test_layer_out_of_range(self):
        a = causal_uniform(2)
        trace = make_trace([a[np.newaxis]], T=2)
        s = TokenStream(visual=(4,), text=(5,))
        with pytest.raises(Exception):
            score_tokens(trace, s, layer=3)


def test_score_records_shape():
    a = causal_uniform(3)
    trace = make_trace([a[np.newaxis]], T=3)
    s = TokenStream(visual=(4, 5), text=(2,), sample_id="xyz")
    sheet = score_tokens(trace, s, 0, p=0.5)
    recs = score_records(sheet, s)
    assert len(recs) == 3
    assert recs[0]["sample"] == "xyz"
    assert recs[0]["modality"] == "visual"
    assert recs[2]["modality"] == "text"
    assert {"sample", "layer", "position", "modality", "score_intra", "score_cross", "kept"} <= set(
        recs[0]
    )
