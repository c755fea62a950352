import numpy as np
import pytest

from dasd import engine as E
from dasd.backbone import (
    NotFrozen,
    VocabOverflow,
    embed_tokens,
    encode_source,
    encode_vision,
    init_backbone,
    pad_batch,
    pretrain_backbone,
    transformer_layer,
)
from dasd.engine import Tensor
from dasd.evaluation import cosine_similarity
from dasd.rng import SplitMix64
from dasd.synthdata import EOS, SOS, SequenceTooLong

from conftest import tiny_config


@pytest.fixture(scope="module")
def cfg():
    return tiny_config()


@pytest.fixture(scope="module")
def store(cfg):
    ps = init_backbone(cfg.backbone, 0)
    ps.freeze()
    return ps


def test_empty_caption_embedding(cfg, store):
    batch = pad_batch([(SOS, EOS)])
    x = embed_tokens(store, cfg.backbone, batch, "source").data
    emb, pos = store["backbone.src_embed"].data, store["backbone.pos"].data
    assert x.shape == (1, 2, cfg.backbone.model_dim)
    np.testing.assert_array_equal(x[0], emb[[SOS, EOS]] + pos[:2])


def test_swapped_tokens_differ_by_positions(cfg, store):
    a = embed_tokens(store, cfg.backbone, pad_batch([(SOS, 10, 20, EOS)]), "source").data[0]
    b = embed_tokens(store, cfg.backbone, pad_batch([(SOS, 20, 10, EOS)]), "source").data[0]
    pos = store["backbone.pos"].data
    np.testing.assert_allclose(a[1] - b[2], pos[1] - pos[2], atol=1e-15)
    np.testing.assert_allclose(a[2] - b[1], pos[2] - pos[1], atol=1e-15)


def test_desk_embedding_shape():
    from dasd.config import preset

    desk = preset("desk")
    ps = init_backbone(desk.backbone, 0)
    x = embed_tokens(ps, desk.backbone, pad_batch([(SOS, *range(3, 10), EOS)]), "source")
    assert x.shape == (1, 9, 64)


def test_embedding_errors(cfg, store):
    with pytest.raises(VocabOverflow):
        embed_tokens(store, cfg.backbone, pad_batch([(SOS, 9999, EOS)]), "source")
    with pytest.raises(SequenceTooLong):
        pad_batch([(SOS, *[5] * 30, EOS)], max_len=cfg.backbone.max_seq_len)


def test_single_position_layer_is_ffn_path(cfg, store):
    # one position: attention weight 1, output = x + attn-out(v) + ffn
    X = Tensor(SplitMix64(1).normal((1, 1, cfg.backbone.model_dim)))
    out = transformer_layer(store, cfg.backbone, X, 0, np.ones((1, 1), bool)).data
    p = "backbone.layers.0."
    g = lambda n: store[p + n].data  # noqa: E731
    x = X.data[0, 0]
    xn = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * g("ln1_g") + g("ln1_b")
    v = g("wv") @ xn + g("bv")
    h = x + g("wo") @ v + g("bo")
    hn = (h - h.mean()) / np.sqrt(h.var() + 1e-5) * g("ln2_g") + g("ln2_b")
    ff = g("w2") @ np.maximum(g("w1") @ hn + g("b1"), 0) + g("b2")
    np.testing.assert_allclose(out[0, 0], h + ff, rtol=1e-12, atol=1e-12)


def test_padding_garbage_does_not_leak(cfg, store):
    d = cfg.backbone.model_dim
    X = SplitMix64(2).normal((2, 6, d))
    mask = np.array([[1, 1, 1, 0, 0, 0], [1] * 6], bool)
    out = transformer_layer(store, cfg.backbone, Tensor(X), 0, mask).data
    X2 = X.copy()
    X2[0, 3:] = 50.0
    out2 = transformer_layer(store, cfg.backbone, Tensor(X2), 0, mask).data
    np.testing.assert_allclose(out2[0, :3], out[0, :3], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out2[1], out[1])


def test_layer_index_checked(cfg, store):
    X = Tensor(np.zeros((1, 2, cfg.backbone.model_dim)))
    with pytest.raises(IndexError):
        transformer_layer(store, cfg.backbone, X, cfg.backbone.num_layers, np.ones((1, 2), bool))


def test_encode_source_deterministic_and_pad_invariant(cfg, store):
    cap = (SOS, 5, 6, 7, EOS)
    r1 = encode_source(store, cfg.backbone, pad_batch([cap, cap])).data
    assert r1[0].tobytes() == r1[1].tobytes()
    padded = encode_source(store, cfg.backbone, pad_batch([cap], pad_to=len(cap) + 3)).data
    np.testing.assert_allclose(padded[0], r1[0], rtol=0, atol=1e-12)
    assert np.isfinite(r1).all() and np.linalg.norm(r1[0]) > 0


def test_encode_source_requires_frozen(cfg):
    ps = init_backbone(cfg.backbone, 0)
    with pytest.raises(NotFrozen):
        encode_source(ps, cfg.backbone, pad_batch([(SOS, 5, EOS)]))


def test_vision_zero_input_and_nonlinearity(cfg, store):
    zero = encode_vision(store, cfg.backbone, np.zeros((1, cfg.backbone.visual_dim))).data[0]
    g = lambda n: store[n].data  # noqa: E731
    h = np.maximum(g("backbone.vis.b1"), 0)
    expected = g("backbone.vis.proj") @ (g("backbone.vis.w2") @ h + g("backbone.vis.b2"))
    np.testing.assert_allclose(zero, expected, rtol=1e-12)
    V = SplitMix64(3).normal((1, cfg.backbone.visual_dim))
    a = encode_vision(store, cfg.backbone, V).data
    b = encode_vision(store, cfg.backbone, 2 * V).data
    assert not np.allclose(b, 2 * a)
    with pytest.raises(E.ShapeMismatch):
        encode_vision(store, cfg.backbone, np.zeros((1, 5)))


def test_layer_gradient_finite_difference(cfg, store):
    # gradient w.r.t. an adapter-like weight placed after a frozen layer
    d = cfg.backbone.model_dim
    X = Tensor(SplitMix64(4).normal((2, 3, d)))
    mask = np.array([[1, 1, 0], [1, 1, 1]], bool)
    target = Tensor(SplitMix64(5).normal((2, 3, d)))

    def fn(x, w):
        h = transformer_layer(store, cfg.backbone, x, 0, mask)
        return E.tsum(E.mul(E.linear(h, w), target))

    w0 = Tensor(SplitMix64(6).normal((d, d), scale=0.1))
    res = E.finite_difference_check(fn, [X, w0], max_coords=120, rng=SplitMix64(7))
    assert res.max_rel_error < 1e-4


def test_pretraining_freezes_and_beats_chance(tiny_cfg, tiny_corpus, tiny_backbone):
    assert all(tiny_backbone.is_frozen(n) for n in tiny_backbone.names("backbone."))
    test = tiny_corpus.test
    rs = encode_source(tiny_backbone, tiny_cfg.backbone, pad_batch([t.source_tokens for t in test])).data
    rv = encode_vision(tiny_backbone, tiny_cfg.backbone, np.stack([t.visual for t in test])).data
    sim = cosine_similarity(rs, rv)
    matched = np.diag(sim).mean()
    mismatched = (sim.sum() - np.trace(sim)) / (sim.size - len(sim))
    assert matched > mismatched


def test_frozen_backbone_rejects_updates(tiny_backbone):
    name = "backbone.text_proj"
    with pytest.raises(E.FrozenWrite):
        E.adam_update(tiny_backbone, {name: np.zeros(tiny_backbone[name].shape)}, E.AdamState(), 1e-3)


def test_zero_step_pretraining_is_near_chance(cfg, tiny_corpus):
    from dasd.trainer import evaluate_retrieval
    from dasd.hypernet import DASDModel

    pc = cfg.pretrain
    ps, trace = pretrain_backbone(init_backbone(cfg.backbone, 0), cfg.backbone, tiny_corpus.train,
                                  type(pc)(**{**pc.__dict__, "steps": 0}), 0)
    assert trace == []
    m = evaluate_retrieval(DASDModel.create(cfg, ps), tiny_corpus.test, side="source")
    assert m.r1_tv <= 3.0 / m.n


def test_pretraining_records_trace(cfg, tiny_corpus):
    pc = type(cfg.pretrain)(**{**cfg.pretrain.__dict__, "steps": 3})
    _, trace = pretrain_backbone(init_backbone(cfg.backbone, 1), cfg.backbone, tiny_corpus.train, pc, 1)
    assert [r["step"] for r in trace] == [0, 1, 2]
    assert all(np.isfinite(r["loss"]) for r in trace)


def test_finetune_epochs_extend_pretraining(cfg, tiny_corpus):
    base = {**cfg.pretrain.__dict__, "steps": 3}
    train = tiny_corpus.train
    plain, t0 = pretrain_backbone(init_backbone(cfg.backbone, 2), cfg.backbone, train, type(cfg.pretrain)(**base), 2)
    tuned, t1 = pretrain_backbone(init_backbone(cfg.backbone, 2), cfg.backbone, train,
                                  type(cfg.pretrain)(**{**base, "finetune_epochs": 1, "finetune_lr": 1e-3}), 2)
    n_ft = -(-len(train) // cfg.pretrain.batch_size)
    assert t1[:3] == t0 and [r["stage"] for r in t1[3:]] == ["finetune"] * n_ft
    assert all(r["lr"] == 1e-3 for r in t1[3:])
    assert all(tuned.is_frozen(n) for n in tuned.names("backbone."))
    assert tuned["backbone.text_proj"].data.tobytes() != plain["backbone.text_proj"].data.tobytes()
