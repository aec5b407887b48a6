import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlgen import tensor as T
from vlgen.data import generate_corpus
from vlgen.encoders import AttentionMaskKind, EncoderConfig, encode_image, encode_multimodal, encode_text, init_params
from vlgen.errors import ValidationError
from vlgen.objectives import itm_logits
from vlgen.retrieval import RetrievalConfig, format_rankings, recall_at_k, retrieve
from vlgen.train import TrainConfig, pretrain

CFG = EncoderConfig(hidden=16, n_heads=2, visual_layers=1, text_layers=1, multimodal_layers=1, patch=16,
                    contrastive_dim=8)
BI = AttentionMaskKind.BIDIRECTIONAL


@pytest.fixture(scope="module")
def gallery():
    return generate_corpus(21, 16)


def _params64(seed):
    with T.float64_mode():
        params = init_params(CFG, seed)
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.data = t.data.astype(np.float64)
        if t.data.ndim == 2:
            t.data[...] = rng.normal(0, 0.3, t.data.shape)
    return params


def _itm_prob_single(image, seq, params):
    # one pair at a time through the unbatched encoders
    z = encode_image(image, params)
    t = encode_text(seq, BI, params)
    fused = encode_multimodal(t, z, BI, params)
    logits = itm_logits(fused[0:1], params).data[0].astype(np.float64)
    p = np.exp(logits - logits.max())
    return p[1] / p.sum()


@pytest.mark.parametrize("direction", ["i2t", "t2i"])
def test_full_topk_equals_exhaustive_itm(gallery, direction):
    exs = list(gallery)[:10]
    with T.float64_mode():
        params = _params64(0)
        out = retrieve(np.stack([e.image for e in exs]), [e.caption for e in exs], params,
                       RetrievalConfig(top_k=len(exs)), direction)
        for q, r in enumerate(out.rankings):
            probs = []
            for g in range(len(exs)):
                i, t = (q, g) if direction == "i2t" else (g, q)
                probs.append(_itm_prob_single(exs[i].image, exs[t].caption, params))
            probs = np.array(probs)
            s1 = np.array(r.stage1)[np.argsort(r.items)]
            want = np.lexsort((np.arange(len(exs)), -s1, -np.round(probs, 12)))
            assert r.items == want.tolist()
            np.testing.assert_allclose(np.array(r.stage2), probs[r.items], rtol=1e-9)
    assert out.warnings == []


def test_topk_clamped_with_warning(gallery):
    exs = list(gallery)[:4]
    out = retrieve(np.stack([e.image for e in exs]), [e.caption for e in exs], init_params(CFG, 0),
                   RetrievalConfig(top_k=50))
    assert len(out.warnings) == 1 and "clamped" in out.warnings[0]
    assert all(sorted(r.items) == list(range(4)) for r in out.rankings)


def test_rankings_are_permutations_and_tail_in_stage1_order(gallery):
    exs = list(gallery)
    out = retrieve(np.stack([e.image for e in exs]), [e.caption for e in exs], init_params(CFG, 1),
                   RetrievalConfig(top_k=3), "t2i")
    for r in out.rankings:
        assert sorted(r.items) == list(range(len(exs)))
        assert all(v is not None for v in r.stage2[:3]) and all(v is None for v in r.stage2[3:])
        tail = r.stage1[3:]
        assert tail == sorted(tail, reverse=True)
    text = format_rankings(out)
    assert text.splitlines()[0] == "query\titems\tstage1\tstage2"
    assert len(text.splitlines()) == len(exs) + 1


def test_bad_direction(gallery):
    with pytest.raises(ValidationError):
        retrieve(gallery[0].image[None], [gallery[0].caption], init_params(CFG, 0), direction="x")
    with pytest.raises(ValidationError):
        RetrievalConfig(top_k=0)


# -- recall ---------------------------------------------------------------------------------------

def _brute_recall(rankings, truth, k):
    hits = 0
    for ranked, gt in zip(rankings, truth):
        gts = gt if isinstance(gt, (set, list, tuple)) else [gt]
        found = False
        for pos in range(min(k, len(ranked))):
            for g in gts:
                if ranked[pos] == g:
                    found = True
        hits += found
    return hits / len(rankings)


@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**31))
def test_recall_matches_brute_force(n_items, k, seed):
    rng = np.random.default_rng(seed)
    n_q = int(rng.integers(1, 10))
    rankings = [rng.permutation(n_items).tolist() for _ in range(n_q)]
    truth = [int(rng.integers(n_items)) for _ in range(n_q)]
    assert recall_at_k(rankings, truth, k) == _brute_recall(rankings, truth, k)
    multi = [set(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False).tolist())
             for _ in range(n_q)]
    assert recall_at_k(rankings, multi, k) == _brute_recall(rankings, multi, k)


def test_recall_perfect_and_random():
    perfect = [[i] + [j for j in range(10) if j != i] for i in range(10)]
    assert recall_at_k(perfect, list(range(10)), 1) == 1.0
    rng = np.random.default_rng(0)
    rand = [rng.permutation(10).tolist() for _ in range(1000)]
    assert abs(recall_at_k(rand, [0] * 1000, 1) - 0.1) <= 0.03


def test_recall_errors():
    with pytest.raises(ValidationError):
        recall_at_k([[0]], [0], 0)
    with pytest.raises(ValidationError):
        recall_at_k([[0]], [], 1)


def test_gallery_permutation_permutes_rankings(gallery):
    exs = list(gallery)[:12]
    images = np.stack([e.image for e in exs])
    params = init_params(CFG, 2)
    base = retrieve(images, [e.caption for e in exs], params, RetrievalConfig(top_k=5))
    perm = np.random.default_rng(0).permutation(len(exs))
    moved = retrieve(images, [exs[i].caption for i in perm], params, RetrievalConfig(top_k=5))
    for a, b in zip(base.rankings, moved.rankings):
        assert [int(perm[i]) for i in b.items] == a.items


def test_adversarial_ranking_recall_zero():
    rankings = [[j for j in range(20) if j != i] + [i] for i in range(20)]
    assert recall_at_k(rankings, list(range(20)), 10) == 0.0


def test_overfit_match_ranks_first():
    # the contrastive loss sits on a plateau near 2 ln B for a few hundred steps from the small init
    small = generate_corpus(22, 6)
    res = pretrain(small, CFG, steps=1500, seed=0, train=TrainConfig(batch_size=6, lr=5e-4))
    images = np.stack([e.image for e in small])
    out = retrieve(images, [e.caption for e in small], res.params, RetrievalConfig(top_k=3))
    assert recall_at_k(out.item_lists(), list(range(len(small))), 1) == 1.0
