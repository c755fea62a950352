"""Semantics disentangling: f^sr / f^sa extraction and the pair discriminator.

Both extractors run the target caption through the *first* frozen backbone
layer only, each with its own trainable embedding projection, bottleneck
adapter and output projection. Trainable names live under ``sdm.sr.`` and
``sdm.sa.``; the discriminator under ``disc.``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .backbone import TokenBatch, embed_tokens, transformer_layer
from .config import AdapterConfig, BackboneConfig
from .engine import ParamStore, Tensor
from .rng import SplitMix64

SDM_LAYER = 0  # index of the only backbone layer the module may use


@dataclass
class StaticAdapterParams:
    down: Tensor  # (d_b, d)
    up: Tensor  # (d, d_b)

    def __post_init__(self):
        d_b, d = self.down.shape
        if self.up.shape != (d, d_b):
            raise E.ShapeMismatch(f"up {self.up.shape} does not match down {self.down.shape}")
        if not d_b < d:
            raise E.ShapeMismatch("bottleneck must be narrower than the model width")


@dataclass
class DisentangledPair:
    f_sr: Tensor
    f_sa: Tensor


def static_adapter(X: Tensor, params: StaticAdapterParams) -> Tensor:
    """``up · relu(down · x)`` per row. The residual is added by the caller."""
    if X.shape[-1] != params.down.shape[1]:
        raise E.ShapeMismatch(f"input width {X.shape[-1]} vs adapter {params.down.shape[1]}")
    return E.linear(E.relu(E.linear(X, params.down)), params.up)


def init_sdm(bcfg: BackboneConfig, acfg: AdapterConfig, seed: int) -> ParamStore:
    rng = SplitMix64(seed).spawn(303)
    d, dt, h, p = bcfg.model_dim, bcfg.target_embed_dim, acfg.sdm_hidden, bcfg.proj_dim
    ps = ParamStore()
    for branch in ("sr", "sa"):
        pre = f"sdm.{branch}."
        ps.add(pre + "embed_proj", rng.normal((d, dt), scale=1.0 / math.sqrt(dt)))
        ps.add(pre + "down", rng.normal((h, d), scale=1.0 / math.sqrt(d)))
        ps.add(pre + "up", np.zeros((d, h)))
        ps.add(pre + "proj", rng.normal((p, d), scale=1.0 / math.sqrt(d)))
    return ps


def init_discriminator(bcfg: BackboneConfig, acfg: AdapterConfig, seed: int) -> ParamStore:
    rng = SplitMix64(seed).spawn(404)
    h1, h2 = acfg.disc_hidden
    p = bcfg.proj_dim
    ps = ParamStore()
    ps.add("disc.w1", rng.normal((h1, 2 * p), scale=1.0 / math.sqrt(2 * p)))
    ps.add("disc.b1", np.zeros(h1))
    ps.add("disc.w2", rng.normal((h2, h1), scale=1.0 / math.sqrt(h1)))
    ps.add("disc.b2", np.zeros(h2))
    ps.add("disc.w3", rng.normal((1, h2), scale=1.0 / math.sqrt(h2)))
    ps.add("disc.b3", np.zeros(1))
    return ps


def _first_layer(store: ParamStore, bcfg: BackboneConfig, batch: TokenBatch, branch: str) -> Tensor:
    pre = f"sdm.{branch}."
    X0 = embed_tokens(store, bcfg, batch, "target", proj=pre + "embed_proj")
    H1 = transformer_layer(store, bcfg, X0, SDM_LAYER, batch.mask)
    adapter = StaticAdapterParams(store[pre + "down"], store[pre + "up"])
    return E.add(static_adapter(H1, adapter), H1)


def extract_semantic_related(store: ParamStore, bcfg: BackboneConfig, batch: TokenBatch) -> Tensor:
    """f^sr: projected [EOS] state of the adapted first layer, (B, proj_dim)."""
    X1 = _first_layer(store, bcfg, batch, "sr")
    return E.linear(E.row_select(X1, batch.eos), store["sdm.sr.proj"])


def extract_semantic_agnostic(store: ParamStore, bcfg: BackboneConfig, batch: TokenBatch) -> Tensor:
    """f^sa: projected mean over the unpadded states of the adapted first layer."""
    X1 = _first_layer(store, bcfg, batch, "sa")
    return E.linear(E.mean_pool_masked(X1, batch.mask), store["sdm.sa.proj"])


def disentangle(store: ParamStore, bcfg: BackboneConfig, batch: TokenBatch) -> DisentangledPair:
    return DisentangledPair(
        extract_semantic_related(store, bcfg, batch),
        extract_semantic_agnostic(store, bcfg, batch),
    )


def discriminator_logit(store: ParamStore, f_sa, r, detach: bool = False, clamp: float = 15.0) -> Tensor:
    get = store.constant if detach else store.__getitem__
    f_sa, r = E.as_tensor(f_sa), E.as_tensor(r)
    if f_sa.shape != r.shape:
        raise E.ShapeMismatch(f"f_sa {f_sa.shape} vs r {r.shape}")
    x = E.concat([f_sa, r], axis=-1)
    h = E.relu(E.linear(x, get("disc.w1"), get("disc.b1")))
    h = E.relu(E.linear(h, get("disc.w2"), get("disc.b2")))
    logit = E.linear(h, get("disc.w3"), get("disc.b3"))
    logit = E.reshape(logit, logit.shape[:-1])
    return E.clip(logit, -clamp, clamp)


def discriminate(store: ParamStore, f_sa, r, detach: bool = False, clamp: float = 15.0) -> Tensor:
    """Probability that ``(f_sa, r)`` is a matched pair, strictly inside (0, 1)."""
    return E.sigmoid(discriminator_logit(store, f_sa, r, detach, clamp))


def shuffled_negatives(concepts: np.ndarray, rng: SplitMix64, pool: np.ndarray | None = None,
                       max_tries: int = 16) -> np.ndarray:
    """In-batch permutation with no item paired to a caption of its own concept.

    Returns indices into the batch; positions that cannot be fixed by
    re-shuffling are filled from ``pool`` (concept ids of the wider corpus)
    and returned as ``B + k`` offsets into that pool.
    """
    B = len(concepts)
    perm = rng.permutation(B)
    for _ in range(max_tries):
        bad = np.flatnonzero(concepts[perm] == concepts)
        if bad.size == 0:
            return perm
        for i in bad:
            j = rng.integers(B)
            perm[i], perm[j] = perm[j], perm[i]
    bad = np.flatnonzero(concepts[perm] == concepts)
    if bad.size and pool is None:
        raise ValueError("cannot draw negatives: every item shares one concept")
    for i in bad:
        while True:
            k = rng.integers(len(pool))
            if pool[k] != concepts[i]:
                perm[i] = B + k
                break
    return perm
