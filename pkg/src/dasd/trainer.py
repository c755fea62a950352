"""Two-stage transfer training, diagnostics and the ablation harness."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .backbone import DivergedTraining, pad_batch, require_frozen
from .config import ExperimentConfig, StageConfig
from .disentangle import init_discriminator, shuffled_negatives
from .engine import AdamState, GradTape, Tensor
from .evaluation import (
    RetrievalMetrics,
    cosine_similarity,
    pair_accuracy,
    retrieval_metrics,
    style_cluster_purity,
)
from .hypernet import DASDModel
from .losses import (
    adversarial_loss,
    cross_lingual,
    cross_modal_nce,
    discrimination_loss,
    semantic_consistency,
    total_loss,
)
from .rng import SplitMix64
from .synthdata import Corpus

log = logging.getLogger(__name__)

STAGES = ("cross_lingual", "cross_modal")
EVAL_CHUNK = 256


def encode_split(model: DASDModel, examples, parts=("r_s", "r_v", "r_t", "f_sr", "f_sa")) -> dict[str, np.ndarray]:
    """Evaluation-mode features for every example, in order."""
    if not examples:
        return {p: np.zeros((0, model.cfg.backbone.proj_dim)) for p in parts}
    out: dict[str, list] = {p: [] for p in parts}
    L = model.cfg.backbone.max_seq_len
    for lo in range(0, len(examples), EVAL_CHUNK):
        chunk = examples[lo:lo + EVAL_CHUNK]
        if "r_s" in parts:
            out["r_s"].append(model.encode_source(pad_batch([t.source_tokens for t in chunk], L)).data)
        if "r_v" in parts:
            out["r_v"].append(model.encode_vision(np.stack([t.visual for t in chunk])).data)
        if {"r_t", "f_sr", "f_sa"} & set(parts):
            tb = pad_batch([t.target_tokens for t in chunk], L)
            if "r_t" in parts:
                enc = model.encode_target(tb)
                pair = enc.pair
                out["r_t"].append(enc.r_t.data)
            else:
                pair = model.disentangle(tb)
            if "f_sr" in parts:
                out["f_sr"].append(pair.f_sr.data)
            if "f_sa" in parts:
                out["f_sa"].append(pair.f_sa.data)
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate_retrieval(model: DASDModel, examples, side: str = "target") -> RetrievalMetrics:
    """Text-visual retrieval over a whole split using cosine similarity."""
    if side not in ("target", "source"):
        raise ValueError(f"side must be 'target' or 'source', got {side!r}")
    key = {"target": "r_t", "source": "r_s"}[side]
    feats = encode_split(model, examples, (key, "r_v"))
    return retrieval_metrics(cosine_similarity(feats[key], feats["r_v"]))


@dataclass
class StageResult:
    stage: str
    trace: list[dict] = field(default_factory=list)

    def first(self, key="loss"):
        return self.trace[0][key] if self.trace else None

    def last(self, key="loss"):
        return self.trace[-1][key] if self.trace else None


class TransferTrainer:
    """Holds optimiser state and frozen-feature caches for one transfer run.

    Batches and negatives come from streams keyed by ``(seed, stage, step)``,
    so a run resumed from a checkpoint replays the same data.
    """

    def __init__(self, model: DASDModel, corpus: Corpus, seed: int | None = None):
        require_frozen(model.store)
        self.model = model
        self.corpus = corpus
        self.seed = model.cfg.seed if seed is None else seed
        self.rng = SplitMix64(self.seed).spawn(606)
        self.states = {s: AdamState() for s in STAGES}
        self.disc_state = AdamState()
        self.steps_done = {s: 0 for s in STAGES}
        train = corpus.train
        if not train:
            raise ValueError("corpus has no training examples")
        feats = encode_split(model, train, ("r_s", "r_v"))
        self.r_s = feats["r_s"]
        self.r_v = feats["r_v"]
        self.concepts = np.array([t.concept_id for t in train])

    # ------------------------------------------------------------------
    def _batch(self, stage_id: int, step: int, B: int):
        srng = self.rng.spawn(stage_id, step)
        idx = srng.permutation(len(self.corpus.train))[:B]
        tokens = pad_batch([self.corpus.train[i].target_tokens for i in idx], self.model.cfg.backbone.max_seq_len)
        return idx, tokens, srng

    def _negatives(self, idx: np.ndarray, srng: SplitMix64) -> np.ndarray:
        perm = shuffled_negatives(self.concepts[idx], srng, pool=self.concepts)
        B = len(idx)
        rows = np.where(perm < B, idx[np.minimum(perm, B - 1)], perm - B)
        return self.r_s[rows]

    def cross_lingual_step(self, cfg: StageConfig, step: int, total_steps: int) -> dict:
        return self._disentangling_step("cross_lingual", cfg, step, total_steps)

    def _disentangling_step(self, stage: str, cfg: StageConfig, step: int, total_steps: int) -> dict:
        """Discriminator update, then one step on the stage-1 objective (plus L_CM when joint)."""
        model, w = self.model, self.model.cfg.loss
        B = min(cfg.batch_size, len(self.corpus.train))
        idx, tokens, srng = self._batch(STAGES.index(stage), step, B)
        r_s = Tensor(self.r_s[idx])
        r_neg = Tensor(self._negatives(idx, srng))
        lr = E.warmup_lr(step, total_steps, cfg.lr, cfg.warmup)
        disc_lr = E.warmup_lr(step, total_steps, cfg.disc_lr or cfg.lr, cfg.warmup)
        rec = {"stage": stage, "step": step, "lr": lr}
        with GradTape() as tape:
            enc = model.encode_target(tokens)
            f_sa = enc.pair.f_sa
            with GradTape() as dtape:
                fsa_c = f_sa.detach()
                l_d = discrimination_loss(model.discriminate(fsa_c, r_s), model.discriminate(fsa_c, r_neg))
            E.adam_update(model.store, E.backward(l_d, dtape), self.disc_state, disc_lr)
            parts = {"cl": cross_lingual(r_s, enc.r_t)}
            if w.lambda_sc != 0:
                parts["sc"] = semantic_consistency(r_s, enc.pair.f_sr)
            if w.lambda_adv != 0:
                parts["adv"] = adversarial_loss(
                    model.discriminate(f_sa, r_s, detach=True), model.discriminate(f_sa, r_neg, detach=True)
                )
            if w.joint:
                parts["cm"] = cross_modal_nce(enc.r_t, Tensor(self.r_v[idx]), w.tau)
            loss = total_loss(parts, w, stage)
        grads = E.backward(loss, tape)
        E.adam_update(model.store, grads, self.states[stage], lr)
        rec.update({k: v.item() for k, v in parts.items()}, d=l_d.item(), loss=loss.item())
        return rec

    def cross_modal_step(self, cfg: StageConfig, step: int, total_steps: int) -> dict:
        model, w = self.model, self.model.cfg.loss
        if w.joint:
            return self._disentangling_step("cross_modal", cfg, step, total_steps)
        B = min(cfg.batch_size, len(self.corpus.train))
        idx, tokens, _ = self._batch(1, step, B)
        lr = E.warmup_lr(step, total_steps, cfg.lr, cfg.warmup)
        with GradTape() as tape:
            r_t = model.encode_target(tokens).r_t
            loss = total_loss({"cm": cross_modal_nce(r_t, Tensor(self.r_v[idx]), w.tau)}, w, "cross_modal")
        grads = E.backward(loss, tape)
        E.adam_update(model.store, grads, self.states["cross_modal"], lr)
        return {"stage": "cross_modal", "step": step, "lr": lr, "cm": loss.item(), "loss": loss.item()}

    def run_stage(self, stage: str, cfg: StageConfig, stop_at: int | None = None, log_every: int = 0) -> StageResult:
        """Run ``stage`` from where it stopped until ``stop_at`` (default: cfg.steps)."""
        step_fn = {"cross_lingual": self.cross_lingual_step, "cross_modal": self.cross_modal_step}[stage]
        result = StageResult(stage)
        end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
        while self.steps_done[stage] < end:
            step = self.steps_done[stage]
            try:
                rec = step_fn(cfg, step, cfg.steps)
            except E.NonFinite as exc:
                raise DivergedTraining(f"{stage} diverged at step {step}: {exc}") from None
            result.trace.append(rec)
            self.steps_done[stage] += 1
            if log_every and step % log_every == 0:
                log.info("%s step %d loss %.4f", stage, step, rec["loss"])
        return result

    def run(self, log_every: int = 0) -> dict[str, StageResult]:
        cfg = self.model.cfg
        return {
            "cross_lingual": self.run_stage("cross_lingual", cfg.cross_lingual, log_every=log_every),
            "cross_modal": self.run_stage("cross_modal", cfg.cross_modal, log_every=log_every),
        }

    # checkpoint support --------------------------------------------------
    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key, st in [*self.states.items(), ("disc", self.disc_state)]:
            for name, arr in st.m.items():
                out[f"optim.{key}.m/{name}"] = arr
            for name, arr in st.v.items():
                out[f"optim.{key}.v/{name}"] = arr
        return out

    def optimizer_meta(self) -> dict:
        return {
            "t": {k: st.t for k, st in [*self.states.items(), ("disc", self.disc_state)]},
            "steps_done": dict(self.steps_done),
            "rng_state": self.rng.state,
        }

    def restore_optimizer(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        states = {**self.states, "disc": self.disc_state}
        for key, arr in arrays.items():
            head, name = key.split("/", 1)
            _, which, moment = head.split(".")
            getattr(states[which], moment)[name] = np.array(arr)
        for k, t in meta["t"].items():
            states[k].t = t
        self.steps_done.update(meta["steps_done"])
        self.rng.state = int(meta["rng_state"])


def run_cross_lingual_stage(model: DASDModel, corpus: Corpus, cfg: StageConfig | None = None,
                            trainer: TransferTrainer | None = None) -> tuple[DASDModel, StageResult]:
    trainer = trainer or TransferTrainer(model, corpus)
    res = trainer.run_stage("cross_lingual", cfg or model.cfg.cross_lingual)
    return model, res


def run_cross_modal_stage(model: DASDModel, corpus: Corpus, cfg: StageConfig | None = None,
                          trainer: TransferTrainer | None = None) -> tuple[DASDModel, StageResult]:
    trainer = trainer or TransferTrainer(model, corpus)
    res = trainer.run_stage("cross_modal", cfg or model.cfg.cross_modal)
    return model, res


# --------------------------------------------------------------------------
# diagnostics


def _pair_probs(model: DASDModel, feat: np.ndarray, r_s: np.ndarray, concepts: np.ndarray, seed: int,
                store=None):
    rng = SplitMix64(seed).spawn(707)
    perm = shuffled_negatives(concepts, rng)
    from .disentangle import discriminate

    store = model.store if store is None else store
    clamp = model.cfg.adapter.logit_clamp
    p_pos = discriminate(store, feat, r_s, clamp=clamp).data
    p_neg = discriminate(store, feat, r_s[perm], clamp=clamp).data
    return p_pos, p_neg


def discriminator_accuracy(model: DASDModel, examples, seed: int = 0) -> float:
    """Held-out accuracy of the trained discriminator on (f^sa, r^S) vs (f^sa, r^S-)."""
    feats = encode_split(model, examples, ("r_s", "f_sa"))
    concepts = np.array([t.concept_id for t in examples])
    return pair_accuracy(*_pair_probs(model, feats["f_sa"], feats["r_s"], concepts, seed))


def probe_accuracy(model: DASDModel, train, test, feature: str = "f_sr", steps: int = 300,
                   lr: float = 1e-3, seed: int = 0) -> float:
    """Train a fresh discriminator-shaped probe on ``feature`` and report held-out accuracy."""
    tr = encode_split(model, train, ("r_s", feature))
    te = encode_split(model, test, ("r_s", feature))
    c_tr = np.array([t.concept_id for t in train])
    c_te = np.array([t.concept_id for t in test])
    probe = init_discriminator(model.cfg.backbone, model.cfg.adapter, seed + 1)
    from .disentangle import discriminate

    state = AdamState()
    rng = SplitMix64(seed).spawn(808)
    B = min(64, len(train))
    for step in range(steps):
        srng = rng.spawn(step)
        idx = srng.permutation(len(train))[:B]
        perm = shuffled_negatives(c_tr[idx], srng, pool=c_tr)
        rows = np.where(perm < B, idx[np.minimum(perm, B - 1)], perm - B)
        f = Tensor(tr[feature][idx])
        with GradTape() as tape:
            loss = discrimination_loss(
                discriminate(probe, f, Tensor(tr["r_s"][idx])), discriminate(probe, f, Tensor(tr["r_s"][rows]))
            )
        E.adam_update(probe, E.backward(loss, tape), state, lr)
    rng_eval = SplitMix64(seed).spawn(707)
    perm = shuffled_negatives(c_te, rng_eval)
    p_pos = discriminate(probe, te[feature], te["r_s"]).data
    p_neg = discriminate(probe, te[feature], te["r_s"][perm]).data
    return pair_accuracy(p_pos, p_neg)


def diagnostics(model: DASDModel, corpus: Corpus, seed: int = 0, probe_steps: int = 300) -> dict:
    test = corpus.test
    feats = encode_split(model, test, ("f_sa",))
    styles = [t.target_style for t in test]
    out = {
        "disc_accuracy": discriminator_accuracy(model, test, seed),
        "probe_fsr_accuracy": probe_accuracy(model, corpus.train, test, "f_sr", probe_steps, seed=seed),
    }
    k = len(set(styles))
    if k <= 1:
        out["style_purity_fsa"] = 1.0
    elif len(test) < 10 * k:
        out["style_purity_fsa"] = None  # too few items for a meaningful clustering
    else:
        out["style_purity_fsa"] = style_cluster_purity(feats["f_sa"], styles, k, seed)
    return out


# --------------------------------------------------------------------------
# ablations

ARMS: dict[str, dict] = {
    "full": {},
    "static": {"adapter": {"dynamic": False}},
    "fsr_only": {"adapter": {"use_fsa": False}},
    "fsa_only": {"adapter": {"use_fsr": False}},
    "no_sc": {"loss": {"lambda_sc": 0.0}},
    "no_adv": {"loss": {"lambda_adv": 0.0}},
    "no_losses": {"loss": {"lambda_sc": 0.0, "lambda_adv": 0.0}},
}

CSV_FIELDS = ["arm", "seed", "R@1_tv", "R@5_tv", "R@10_tv", "R@1_vt", "R@5_vt", "R@10_vt", "mAR"]


class UnknownArm(KeyError):
    pass


def arm_config(base: ExperimentConfig, arm: str, seed: int) -> ExperimentConfig:
    if arm not in ARMS:
        raise UnknownArm(arm)
    return base.replace(seed=seed, **ARMS[arm])


def train_and_evaluate(cfg: ExperimentConfig, backbone, corpus: Corpus, split: str = "test"):
    model = DASDModel.create(cfg, backbone)
    trainer = TransferTrainer(model, corpus)
    results = trainer.run()
    return model, results, evaluate_retrieval(model, corpus.split(split))


def _arm_job(args):
    base, arm, seed, backbone, corpus = args
    _, _, m = train_and_evaluate(arm_config(base, arm, seed), backbone, corpus)
    return arm, seed, m


def run_ablation_suite(base: ExperimentConfig, backbone, corpus: Corpus, seeds=(0, 1, 2),
                       arms=None, workers: int = 1) -> list[dict]:
    """Train every arm for every seed; one row per (arm, seed)."""
    arms = list(ARMS) if arms is None else list(arms)
    for a in arms:
        if a not in ARMS:
            raise UnknownArm(a)
    jobs = [(base, a, s, backbone, corpus) for a in arms for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            done = list(ex.map(_arm_job, jobs))
    else:
        done = [_arm_job(j) for j in jobs]
    rows = []
    for arm, seed, m in done:
        rows.append({
            "arm": arm, "seed": seed,
            "R@1_tv": m.r1_tv, "R@5_tv": m.r5_tv, "R@10_tv": m.r10_tv,
            "R@1_vt": m.r1_vt, "R@5_vt": m.r5_vt, "R@10_vt": m.r10_vt,
            "mAR": m.mAR,
        })
    return rows


def ablation_summary(rows: list[dict]) -> dict:
    """Mean mAR per arm, gap to the full arm, and per-seed wins of full over each arm."""
    by_arm: dict[str, dict[int, float]] = {}
    for r in rows:
        by_arm.setdefault(r["arm"], {})[r["seed"]] = r["mAR"]
    means = {a: float(np.mean(list(v.values()))) for a, v in by_arm.items()}
    out = {"mean_mAR": means}
    if "full" in by_arm:
        full = by_arm["full"]
        out["delta_vs_full"] = {a: means["full"] - m for a, m in means.items() if a != "full"}
        out["full_wins"] = {
            a: int(sum(full[s] > v[s] for s in v if s in full)) for a, v in by_arm.items() if a != "full"
        }
    return out


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
