"""Desk-scale dual encoder: token embeddings, pre-norm transformer, vision MLP.

Weights are stored ``(out, in)``. All backbone parameters live under the
``backbone.`` prefix and are frozen after :func:`pretrain_backbone`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .config import BackboneConfig, PretrainConfig
from .engine import ParamStore, Tensor
from .rng import SplitMix64
from .synthdata import EOS, PAD, SequenceTooLong

log = logging.getLogger(__name__)


class VocabOverflow(ValueError):
    pass


class NotFrozen(RuntimeError):
    pass


class DivergedTraining(RuntimeError):
    pass


@dataclass
class TokenBatch:
    ids: np.ndarray  # (B, T) int64, PAD beyond each caption
    mask: np.ndarray  # (B, T) bool
    eos: np.ndarray  # (B,) position of [EOS]

    def __len__(self):
        return self.ids.shape[0]


def pad_batch(seqs, max_len: int | None = None, pad_to: int | None = None) -> TokenBatch:
    seqs = [tuple(s) for s in seqs]
    lengths = [len(s) for s in seqs]
    if max_len is not None and max(lengths) > max_len:
        raise SequenceTooLong(f"caption of {max(lengths)} tokens exceeds {max_len}")
    T = max(max(lengths), pad_to or 0)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = np.arange(T)[None, :] < np.array(lengths)[:, None]
    eos = np.array([s.index(EOS) if EOS in s else len(s) - 1 for s in seqs], dtype=np.int64)
    return TokenBatch(ids, mask, eos)


def _lin(rng: SplitMix64, out_dim: int, in_dim: int, scale: float = 1.0) -> np.ndarray:
    return rng.normal((out_dim, in_dim), scale=scale / math.sqrt(in_dim))


def init_backbone(cfg: BackboneConfig, seed: int) -> ParamStore:
    rng = SplitMix64(seed).spawn(101)
    d, L = cfg.model_dim, cfg.num_layers
    ps = ParamStore()
    ps.add("backbone.src_embed", rng.normal((cfg.source_vocab, d), scale=0.5))
    # stand-in for a multilingual embedding block: fixed from the start
    ps.add("backbone.tgt_embed", rng.normal((cfg.target_vocab, cfg.target_embed_dim), scale=0.5), frozen=True)
    ps.add("backbone.pos", rng.normal((cfg.max_seq_len, d), scale=0.1))
    resid = 1.0 / math.sqrt(2 * L)
    for i in range(L):
        p = f"backbone.layers.{i}."
        ps.add(p + "ln1_g", np.ones(d))
        ps.add(p + "ln1_b", np.zeros(d))
        for w in ("wq", "wk", "wv"):
            ps.add(p + w, _lin(rng, d, d))
            ps.add(p + "b" + w[1], np.zeros(d))
        ps.add(p + "wo", _lin(rng, d, d, resid))
        ps.add(p + "bo", np.zeros(d))
        ps.add(p + "ln2_g", np.ones(d))
        ps.add(p + "ln2_b", np.zeros(d))
        ps.add(p + "w1", _lin(rng, cfg.ffn_dim, d))
        ps.add(p + "b1", np.zeros(cfg.ffn_dim))
        ps.add(p + "w2", _lin(rng, d, cfg.ffn_dim, resid))
        ps.add(p + "b2", np.zeros(d))
    ps.add("backbone.lnf_g", np.ones(d))
    ps.add("backbone.lnf_b", np.zeros(d))
    ps.add("backbone.text_proj", _lin(rng, cfg.proj_dim, d))
    h = cfg.vision_hidden
    ps.add("backbone.vis.w1", _lin(rng, h, cfg.visual_dim, math.sqrt(2)))
    ps.add("backbone.vis.b1", rng.normal(h, scale=0.1))
    ps.add("backbone.vis.w2", _lin(rng, h, h))
    ps.add("backbone.vis.b2", np.zeros(h))
    ps.add("backbone.vis.proj", _lin(rng, cfg.proj_dim, h))
    return ps


def backbone_names(store: ParamStore) -> list[str]:
    return store.names("backbone.")


def require_frozen(store: ParamStore) -> None:
    loose = [n for n in backbone_names(store) if not store.is_frozen(n)]
    if loose:
        raise NotFrozen(f"backbone parameters still trainable: {loose[:3]}...")


def embed_tokens(
    store: ParamStore,
    cfg: BackboneConfig,
    batch: TokenBatch,
    side: str = "source",
    proj: str | None = None,
) -> Tensor:
    """Token embeddings plus positions, shape (B, T, d).

    On the target side the frozen table is mapped to model width by the
    trainable projection named ``proj``.
    """
    B, T = batch.ids.shape
    if T > cfg.max_seq_len:
        raise SequenceTooLong(f"{T} positions > max_seq_len {cfg.max_seq_len}")
    vocab = cfg.source_vocab if side == "source" else cfg.target_vocab
    if batch.ids.max() >= vocab or batch.ids.min() < 0:
        raise VocabOverflow(f"token id outside [0, {vocab})")
    table = store["backbone.src_embed" if side == "source" else "backbone.tgt_embed"]
    x = E.row_select(table, batch.ids.reshape(-1))
    if side == "target":
        if proj is None:
            raise ValueError("target-side embedding needs a projection")
        x = E.linear(x, store[proj])
    x = E.reshape(x, (B, T, cfg.model_dim))
    pos = E.row_select(store["backbone.pos"], np.arange(T))
    return E.add(x, pos)


def attention_mask(mask: np.ndarray) -> np.ndarray:
    """Key mask broadcastable over (B, heads, T_query, T_key)."""
    return mask[:, None, None, :]


def transformer_layer(store: ParamStore, cfg: BackboneConfig, X: Tensor, i: int, mask: np.ndarray) -> Tensor:
    if not 0 <= i < cfg.num_layers:
        raise IndexError(f"layer {i} outside [0, {cfg.num_layers})")
    if X.shape[-1] != cfg.model_dim or X.data.ndim != 3:
        raise E.ShapeMismatch(f"expected (B, T, {cfg.model_dim}), got {X.shape}")
    p = f"backbone.layers.{i}."
    B, T, d = X.shape
    H = cfg.num_heads
    dh = d // H
    xn = E.layer_norm(X, store[p + "ln1_g"], store[p + "ln1_b"])

    def heads(w, b):
        y = E.linear(xn, store[p + w], store[p + b])
        return E.transpose(E.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    scores = E.scalar_mul(E.matmul(q, E.transpose(k)), 1.0 / math.sqrt(dh))
    att = E.softmax(scores, axis=-1, mask=attention_mask(mask))
    ctx = E.transpose(E.matmul(att, v), (0, 2, 1, 3))
    ctx = E.reshape(ctx, (B, T, d))
    h = E.add(X, E.linear(ctx, store[p + "wo"], store[p + "bo"]))
    hn = E.layer_norm(h, store[p + "ln2_g"], store[p + "ln2_b"])
    ff = E.linear(E.relu(E.linear(hn, store[p + "w1"], store[p + "b1"])), store[p + "w2"], store[p + "b2"])
    return E.add(h, ff)


def project_eos(store: ParamStore, X: Tensor, eos: np.ndarray) -> Tensor:
    """Final layer norm on the [EOS] state, then the shared text projection."""
    x = E.row_select(X, eos)
    x = E.layer_norm(x, store["backbone.lnf_g"], store["backbone.lnf_b"])
    return E.linear(x, store["backbone.text_proj"])


def encode_source(store: ParamStore, cfg: BackboneConfig, batch: TokenBatch, check_frozen: bool = True) -> Tensor:
    """Sentence representation r^S, shape (B, proj_dim)."""
    if check_frozen:
        require_frozen(store)
    X = embed_tokens(store, cfg, batch, "source")
    for i in range(cfg.num_layers):
        X = transformer_layer(store, cfg, X, i, batch.mask)
    return project_eos(store, X, batch.eos)


def encode_vision(store: ParamStore, cfg: BackboneConfig, V) -> Tensor:
    V = E.as_tensor(V)
    if V.shape[-1] != cfg.visual_dim:
        raise E.ShapeMismatch(f"visual feature has {V.shape[-1]} dims, expected {cfg.visual_dim}")
    h = E.relu(E.linear(V, store["backbone.vis.w1"], store["backbone.vis.b1"]))
    h = E.linear(h, store["backbone.vis.w2"], store["backbone.vis.b2"])
    return E.linear(h, store["backbone.vis.proj"])


def nce_loss(r_text: Tensor, r_vis: Tensor, tau: float) -> Tensor:
    from .losses import cross_modal_nce

    return cross_modal_nce(r_text, r_vis, tau)


def pretrain_backbone(
    store: ParamStore,
    cfg: BackboneConfig,
    examples,
    pcfg: PretrainConfig,
    seed: int,
    log_every: int = 500,
) -> tuple[ParamStore, list[dict]]:
    """Contrastive source-text/visual pretraining, then freeze every backbone tensor.

    With ``pcfg.finetune_epochs > 0`` the pretrained encoders are further tuned
    for that many epochs at the constant ``finetune_lr`` (fresh optimiser state)
    before freezing.
    """
    if any(not hasattr(t, "source_tokens") for t in examples[:1]):
        raise TypeError("pretraining expects TripletExample items")
    rng = SplitMix64(seed).spawn(202)
    trace = []
    n = len(examples)
    B = min(pcfg.batch_size, n)

    def step_on(stage, step, srng, state, lr):
        idx = srng.permutation(n)[:B]
        batch = pad_batch([examples[i].source_tokens for i in idx], cfg.max_seq_len)
        V = np.stack([examples[i].visual for i in idx])
        try:
            with E.GradTape() as tape:
                loss = nce_loss(encode_source(store, cfg, batch, check_frozen=False), encode_vision(store, cfg, V), pcfg.tau)
            grads = E.backward(loss, tape)
        except E.NonFinite as exc:
            raise DivergedTraining(f"{stage} diverged at step {step}: {exc}") from None
        E.adam_update(store, grads, state, lr)
        trace.append({"stage": stage, "step": step, "loss": loss.item(), "lr": lr})
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.4f", stage, step, loss.item())

    state = E.AdamState()
    for step in range(pcfg.steps):
        step_on("pretrain", step, rng.spawn(step), state, E.warmup_lr(step, pcfg.steps, pcfg.lr, pcfg.warmup))
    state = E.AdamState()
    ft = rng.spawn(1 << 20)
    for step in range(pcfg.finetune_epochs * -(-n // B)):
        step_on("finetune", step, ft.spawn(step), state, pcfg.finetune_lr)
    store.freeze(backbone_names(store))
    return store, trace
