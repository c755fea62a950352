"""End-to-end helpers: corpus -> pretrained backbone -> transferred model, with checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import init_backbone, pretrain_backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, from_dict
from .engine import ParamStore
from .evaluation import retrieval_metrics
from .hypernet import DASDModel
from .synthdata import Corpus, corpus_from_config
from .trainer import TransferTrainer, encode_split, evaluate_retrieval


def make_corpus(cfg: ExperimentConfig) -> Corpus:
    return corpus_from_config(cfg.world, cfg.backbone.visual_dim, cfg.backbone.max_seq_len, cfg.seed)[1]


def pretrain(cfg: ExperimentConfig, corpus: Corpus) -> tuple[ParamStore, list[dict]]:
    """Fresh backbone, contrastively pretrained on source captions and frozen."""
    store = init_backbone(cfg.backbone, cfg.seed)
    return pretrain_backbone(store, cfg.backbone, corpus.train, cfg.pretrain, cfg.seed, log_every=0)


def source_metrics(cfg: ExperimentConfig, backbone: ParamStore, examples):
    return evaluate_retrieval(DASDModel.create(cfg, backbone), examples, side="source")


def transfer(cfg: ExperimentConfig, backbone: ParamStore, corpus: Corpus):
    """Both transfer stages; returns (model, trainer, {stage: StageResult})."""
    model = DASDModel.create(cfg, backbone)
    trainer = TransferTrainer(model, corpus)
    return model, trainer, trainer.run()


def backbone_checkpoint(cfg: ExperimentConfig, store: ParamStore) -> Checkpoint:
    return Checkpoint(store, cfg.to_dict(), cfg.hash(), cfg.seed, meta={"kind": "backbone"})


def model_checkpoint(model: DASDModel, trainer: TransferTrainer | None = None) -> Checkpoint:
    cfg = model.cfg
    arrays, meta = {}, {"kind": "model"}
    rng_state = cfg.seed
    if trainer is not None:
        arrays = trainer.optimizer_arrays()
        meta["optimizer"] = trainer.optimizer_meta()
        rng_state = trainer.rng.state
    return Checkpoint(model.store, cfg.to_dict(), cfg.hash(), rng_state, arrays, meta)


def save_model(model: DASDModel, path, trainer: TransferTrainer | None = None) -> None:
    save_checkpoint(model_checkpoint(model, trainer), path)


def load_model(path, corpus: Corpus | None = None) -> tuple[DASDModel, TransferTrainer | None]:
    """Rebuild a model (and, given a corpus, a trainer ready to resume)."""
    ck = load_checkpoint(path)
    cfg = from_dict(ck.config)
    if ck.meta.get("kind") == "backbone":
        model = DASDModel.create(cfg, ck.store)
    else:
        model = DASDModel(cfg, ck.store)
    trainer = None
    if corpus is not None:
        trainer = TransferTrainer(model, corpus)
        if "optimizer" in ck.meta:
            trainer.restore_optimizer(ck.arrays, ck.meta["optimizer"])
    return model, trainer


def load_backbone(path) -> tuple[ExperimentConfig, ParamStore]:
    ck = load_checkpoint(path)
    store = ParamStore()
    for n, t in ck.store.items():
        if n.startswith("backbone."):
            store.add(n, t.data, frozen=ck.store.is_frozen(n))
    return from_dict(ck.config), store


def untrained_target_metrics(cfg: ExperimentConfig, backbone: ParamStore, examples):
    """Target-language retrieval of the freshly initialised branch (the chance baseline)."""
    model = DASDModel.create(cfg, backbone)
    return evaluate_retrieval(model, examples)


def mean_pair_distance(model: DASDModel, examples) -> tuple[float, float]:
    """Mean ||r^S - r^T||^2 over matched pairs and over all mismatched pairs."""
    f = encode_split(model, examples, ("r_s", "r_t"))
    d = ((f["r_s"][:, None, :] - f["r_t"][None, :, :]) ** 2).sum(-1)
    n = len(d)
    matched = float(np.trace(d) / n)
    mismatched = float((d.sum() - np.trace(d)) / (n * n - n))
    return matched, mismatched


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


__all__ = [
    "make_corpus", "pretrain", "transfer", "source_metrics", "save_model", "load_model", "load_backbone",
    "backbone_checkpoint", "model_checkpoint", "untrained_target_metrics", "mean_pair_distance",
    "retrieval_metrics", "write_jsonl", "read_jsonl",
]
