"""Input-conditional adapter generation and the target-language encoder.

For each caption the disentangled pair is mapped to a global code ``z`` by a
one-hidden-layer MLP; a per-layer linear map (no bias) turns ``z`` into a
``d_u x d_u`` matrix that sits between the down and up projections of that
layer's adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .backbone import (
    TokenBatch,
    embed_tokens,
    encode_source,
    encode_vision,
    init_backbone,
    project_eos,
    require_frozen,
    transformer_layer,
)
from .config import ExperimentConfig
from .disentangle import (
    DisentangledPair,
    discriminate,
    disentangle,
    init_discriminator,
    init_sdm,
)
from .engine import ParamStore, Tensor
from .rng import SplitMix64


class LayerOutOfRange(IndexError):
    pass


@dataclass
class DynamicParamSet:
    """Generated ``W^z`` per layer, each (B, d_u, d_u). Never checkpointed."""

    matrices: list[Tensor]


@dataclass
class TargetEncoding:
    r_t: Tensor
    pair: DisentangledPair | None = None
    params: DynamicParamSet | None = None
    extras: dict = field(default_factory=dict)


def init_target_branch(cfg: ExperimentConfig, seed: int) -> ParamStore:
    b, a = cfg.backbone, cfg.adapter
    rng = SplitMix64(seed).spawn(505)
    d, dt, du, p = b.model_dim, b.target_embed_dim, a.d_u, b.proj_dim
    ps = ParamStore()
    ps.add("target.embed_proj", rng.normal((d, dt), scale=1.0 / math.sqrt(dt)))
    for i in range(b.num_layers):
        ps.add(f"da.{i}.down", rng.normal((du, d), scale=1.0 / math.sqrt(d)))
        ps.add(f"da.{i}.up", np.zeros((d, du)))
    if a.dynamic:
        gh = a.generator_hidden
        ps.add("gen.w1", rng.normal((gh, 2 * p), scale=1.0 / math.sqrt(2 * p)))
        ps.add("gen.b1", np.zeros(gh))
        ps.add("gen.w2", rng.normal((a.d_z, gh), scale=1.0 / math.sqrt(gh)))
        ps.add("gen.b2", np.zeros(a.d_z))
        for i in range(b.num_layers):
            ps.add(f"gen.down.{i}", rng.normal((du * du, a.d_z), scale=a.init_std))
    return ps


def global_code(store: ParamStore, pair: DisentangledPair, use_fsr: bool = True, use_fsa: bool = True) -> Tensor:
    """z = MLP(f^sr ∘ f^sa). A disabled feature is replaced by zeros."""
    f_sr, f_sa = pair.f_sr, pair.f_sa
    if f_sr.shape != f_sa.shape:
        raise E.ShapeMismatch(f"{f_sr.shape} vs {f_sa.shape}")
    if not use_fsr:
        f_sr = Tensor(np.zeros(f_sr.shape))
    if not use_fsa:
        f_sa = Tensor(np.zeros(f_sa.shape))
    x = E.concat([f_sr, f_sa], axis=-1)
    if x.shape[-1] != store["gen.w1"].shape[1]:
        raise E.ShapeMismatch(f"code input width {x.shape[-1]} vs generator {store['gen.w1'].shape[1]}")
    h = E.relu(E.linear(x, store["gen.w1"], store["gen.b1"]))
    return E.linear(h, store["gen.w2"], store["gen.b2"])


def layer_params(store: ParamStore, z: Tensor, layer: int, num_layers: int, d_u: int) -> Tensor:
    """Row-major reshape of ``W_layer^down · z`` into (…, d_u, d_u)."""
    if not 0 <= layer < num_layers:
        raise LayerOutOfRange(f"layer {layer} outside [0, {num_layers})")
    flat = E.linear(z, store[f"gen.down.{layer}"])
    return E.reshape(flat, z.shape[:-1] + (d_u, d_u))


def dynamic_adapter(H: Tensor, down: Tensor, up: Tensor, Wz: Tensor | None) -> Tensor:
    """``up · relu(W^z · down · h) + h`` per row; ``Wz=None`` gives the static adapter."""
    if H.shape[-1] != down.shape[1] or up.shape != (down.shape[1], down.shape[0]):
        raise E.ShapeMismatch(f"adapter {down.shape}/{up.shape} vs input {H.shape}")
    u = E.linear(H, down)
    if Wz is not None:
        if Wz.shape[-2:] != (down.shape[0], down.shape[0]):
            raise E.ShapeMismatch(f"W^z {Wz.shape} vs bottleneck {down.shape[0]}")
        u = E.matmul(u, E.transpose(Wz))
    return E.add(E.linear(E.relu(u), up), H)


def parameter_counts(cfg: ExperimentConfig) -> dict[str, int]:
    """Frozen / trainable parameter totals derived from the config alone.

    Paper-scale stores hold ~0.2G floats, so this avoids allocating them.
    """
    b, a = cfg.backbone, cfg.adapter
    d, L, p, dt, du = b.model_dim, b.num_layers, b.proj_dim, b.target_embed_dim, a.d_u
    layer = 4 * d * d + 4 * d + 2 * d * b.ffn_dim + b.ffn_dim + d + 4 * d
    vis = b.vision_hidden * (b.visual_dim + 1) + b.vision_hidden * (b.vision_hidden + 1) + p * b.vision_hidden
    frozen = (
        b.source_vocab * d + b.target_vocab * dt + b.max_seq_len * d
        + L * layer + 2 * d + p * d + vis
    )
    sdm = 2 * (d * dt + 2 * a.sdm_hidden * d + p * d)
    branch = d * dt + L * 2 * du * d
    gen = 0
    if a.dynamic:
        gen = a.generator_hidden * (2 * p + 1) + a.d_z * (a.generator_hidden + 1) + L * du * du * a.d_z
    h1, h2 = a.disc_hidden
    disc = h1 * (2 * p + 1) + h2 * (h1 + 1) + (h2 + 1)
    return {"frozen": frozen, "sdm": sdm, "target_branch": branch, "generator": gen, "discriminator": disc,
            "trainable": sdm + branch + gen + disc}


class DASDModel:
    """Frozen backbone plus SDM, generator, adapters and discriminator."""

    def __init__(self, cfg: ExperimentConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: ExperimentConfig, backbone: ParamStore | None = None, seed: int | None = None):
        seed = cfg.seed if seed is None else seed
        store = ParamStore()
        if backbone is None:
            backbone = init_backbone(cfg.backbone, seed)
            backbone.freeze(backbone.names("backbone."))
        for n, t in backbone.items():
            if n.startswith("backbone."):
                store.add(n, t.data, frozen=True)
        store.merge(init_sdm(cfg.backbone, cfg.adapter, seed))
        store.merge(init_target_branch(cfg, seed))
        store.merge(init_discriminator(cfg.backbone, cfg.adapter, seed))
        return cls(cfg, store)

    # names -------------------------------------------------------------
    def discriminator_names(self) -> list[str]:
        return self.store.names("disc.")

    def main_names(self) -> list[str]:
        """Everything trained by the alignment objectives."""
        return [n for n in self.store.trainable() if not n.startswith("disc.")]

    def sa_names(self) -> list[str]:
        return self.store.names("sdm.sa.")

    # encoders ----------------------------------------------------------
    def encode_source(self, batch: TokenBatch) -> Tensor:
        return encode_source(self.store, self.cfg.backbone, batch)

    def encode_vision(self, V) -> Tensor:
        return encode_vision(self.store, self.cfg.backbone, V)

    def disentangle(self, batch: TokenBatch) -> DisentangledPair:
        return disentangle(self.store, self.cfg.backbone, batch)

    def generate(self, pair: DisentangledPair) -> DynamicParamSet:
        a, L = self.cfg.adapter, self.cfg.backbone.num_layers
        z = global_code(self.store, pair, a.use_fsr, a.use_fsa)
        return DynamicParamSet([layer_params(self.store, z, i, L, a.d_u) for i in range(L)])

    def encode_target(self, batch: TokenBatch, adapters: bool = True) -> TargetEncoding:
        """r^T for a padded batch. ``adapters=False`` runs the bare frozen pipeline."""
        require_frozen(self.store)
        b = self.cfg.backbone
        pair = params = None
        if adapters:
            pair = self.disentangle(batch)
            if self.cfg.adapter.dynamic:
                params = self.generate(pair)
        X = embed_tokens(self.store, b, batch, "target", proj="target.embed_proj")
        for i in range(b.num_layers):
            H = transformer_layer(self.store, b, X, i, batch.mask)
            if not adapters:
                X = H
                continue
            Wz = params.matrices[i] if params is not None else None
            X = dynamic_adapter(H, self.store[f"da.{i}.down"], self.store[f"da.{i}.up"], Wz)
        return TargetEncoding(project_eos(self.store, X, batch.eos), pair, params)

    def discriminate(self, f_sa, r, detach: bool = False) -> Tensor:
        return discriminate(self.store, f_sa, r, detach, self.cfg.adapter.logit_clamp)
