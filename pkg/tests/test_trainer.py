import numpy as np
import pytest

from dasd import engine as E
from dasd.hypernet import DASDModel
from dasd.pipeline import load_model, save_model
from dasd.synthdata import Corpus
from dasd.trainer import (
    ARMS,
    TransferTrainer,
    UnknownArm,
    ablation_summary,
    arm_config,
    diagnostics,
    encode_split,
    evaluate_retrieval,
    run_ablation_suite,
    write_ablation_csv,
)

from conftest import tiny_config


def _snapshot(store, names=None):
    return {n: store[n].data.tobytes() for n in (names or store.names())}


def _model(tiny_backbone, **sections):
    return DASDModel.create(tiny_config(**sections), tiny_backbone)


def test_zero_steps_leaves_model_unchanged(tiny_backbone, tiny_corpus):
    m = _model(tiny_backbone, cross_lingual={"steps": 0}, cross_modal={"steps": 0})
    before = _snapshot(m.store)
    res = TransferTrainer(m, tiny_corpus).run()
    assert res["cross_lingual"].trace == [] and res["cross_modal"].trace == []
    assert _snapshot(m.store) == before


def test_training_keeps_backbone_bytes(tiny_model, tiny_corpus):
    frozen = tiny_model.store.frozen()
    before = _snapshot(tiny_model.store, frozen)
    trainable = _snapshot(tiny_model.store, tiny_model.store.trainable())
    TransferTrainer(tiny_model, tiny_corpus).run()
    assert _snapshot(tiny_model.store, frozen) == before
    assert _snapshot(tiny_model.store, tiny_model.store.trainable()) != trainable


def test_training_is_deterministic(tiny_backbone, tiny_corpus):
    runs = []
    for _ in range(2):
        m = _model(tiny_backbone, cross_lingual={"steps": 8}, cross_modal={"steps": 3})
        res = TransferTrainer(m, tiny_corpus).run()
        runs.append(([r["loss"] for r in res["cross_lingual"].trace + res["cross_modal"].trace], _snapshot(m.store)))
    assert runs[0] == runs[1]


def test_seed_changes_training(tiny_backbone, tiny_corpus):
    losses = []
    for seed in (0, 1):
        m = DASDModel.create(tiny_config(seed=seed, cross_lingual={"steps": 4}), tiny_backbone)
        losses.append([r["loss"] for r in TransferTrainer(m, tiny_corpus).run_stage("cross_lingual", m.cfg.cross_lingual).trace])
    assert losses[0] != losses[1]


def test_resume_from_checkpoint_is_bit_identical(tiny_backbone, tiny_corpus, tmp_path):
    kw = {"cross_lingual": {"steps": 10}, "cross_modal": {"steps": 4}}
    m = _model(tiny_backbone, **kw)
    straight = TransferTrainer(m, tiny_corpus).run()
    ref_losses = [r["loss"] for r in straight["cross_lingual"].trace[5:] + straight["cross_modal"].trace]

    m2 = _model(tiny_backbone, **kw)
    tr = TransferTrainer(m2, tiny_corpus)
    tr.run_stage("cross_lingual", m2.cfg.cross_lingual, stop_at=5)
    save_model(m2, tmp_path / "half.dasd", tr)
    m3, tr3 = load_model(tmp_path / "half.dasd", tiny_corpus)
    resumed = tr3.run()
    got = [r["loss"] for r in resumed["cross_lingual"].trace + resumed["cross_modal"].trace]
    assert got == ref_losses
    assert _snapshot(m3.store) == _snapshot(m.store)


def test_trace_records_all_parts(tiny_model, tiny_corpus):
    res = TransferTrainer(tiny_model, tiny_corpus).run()
    cl = res["cross_lingual"].trace
    assert {"cl", "sc", "adv", "d", "loss", "lr"} <= set(cl[0])
    for r in cl:
        assert r["adv"] <= 0 <= r["d"]
        w = tiny_model.cfg.loss
        assert r["loss"] == pytest.approx(r["cl"] + w.lambda_adv * r["adv"] + w.lambda_sc * r["sc"], rel=1e-12)
    assert all(set(r) >= {"cm", "loss"} for r in res["cross_modal"].trace)
    assert cl[0]["lr"] < cl[-1]["lr"] or len(cl) == 1


def test_cross_lingual_loss_decreases(tiny_backbone, tiny_corpus):
    m = _model(tiny_backbone, cross_lingual={"steps": 60, "lr": 3e-3}, cross_modal={"steps": 0})
    trace = TransferTrainer(m, tiny_corpus).run()["cross_lingual"].trace
    assert np.mean([r["cl"] for r in trace[-10:]]) < np.mean([r["cl"] for r in trace[:10]])


def test_cl_only_weights_reduce_to_mse(tiny_backbone, tiny_corpus):
    m = _model(tiny_backbone, loss={"lambda_adv": 0.0, "lambda_sc": 0.0}, cross_lingual={"steps": 3})
    trace = TransferTrainer(m, tiny_corpus).run_stage("cross_lingual", m.cfg.cross_lingual).trace
    assert all(r["loss"] == r["cl"] and "sc" not in r and "adv" not in r for r in trace)


def test_batch_of_one_cross_modal_is_zero(tiny_backbone, tiny_corpus):
    m = _model(tiny_backbone, cross_modal={"steps": 2, "batch_size": 1})
    before = _snapshot(m.store)
    trace = TransferTrainer(m, tiny_corpus).run_stage("cross_modal", m.cfg.cross_modal).trace
    assert [r["cm"] for r in trace] == [0.0, 0.0]
    assert _snapshot(m.store) == before


def test_gradient_routing_of_cross_lingual_step(tiny_model, tiny_corpus, monkeypatch):
    seen = []
    real = E.adam_update

    def spy(store, grads, state, lr):
        seen.append(set(grads))
        return real(store, grads, state, lr)

    monkeypatch.setattr(E, "adam_update", spy)
    tr = TransferTrainer(tiny_model, tiny_corpus)
    tr.cross_lingual_step(tiny_model.cfg.cross_lingual, 0, 10)
    disc, main = seen
    assert disc and all(n.startswith("disc.") for n in disc)
    assert not any(n.startswith(("disc.", "backbone.")) for n in main)
    assert any(n.startswith("sdm.sa.") for n in main) and any(n.startswith("gen.") for n in main)


def test_encode_split_shapes(tiny_model, tiny_corpus):
    f = encode_split(tiny_model, tiny_corpus.test)
    n, p = len(tiny_corpus.test), tiny_model.cfg.backbone.proj_dim
    assert all(v.shape == (n, p) for v in f.values())
    with pytest.raises(ValueError):
        evaluate_retrieval(tiny_model, tiny_corpus.test, side="sideways")


def test_arm_configs():
    base = tiny_config()
    assert not arm_config(base, "static", 1).adapter.dynamic
    assert arm_config(base, "no_losses", 0).loss.lambda_adv == 0 == arm_config(base, "no_losses", 0).loss.lambda_sc
    assert arm_config(base, "full", 2).seed == 2
    with pytest.raises(UnknownArm):
        arm_config(base, "mystery", 0)
    assert set(ARMS) >= {"full", "static", "fsr_only", "fsa_only", "no_sc", "no_adv", "no_losses"}


def test_ablation_suite_and_summary(tiny_backbone, tiny_corpus, tmp_path):
    base = tiny_config(cross_lingual={"steps": 3}, cross_modal={"steps": 1})
    rows = run_ablation_suite(base, tiny_backbone, tiny_corpus, seeds=(0, 1), arms=("full", "static"))
    assert [(r["arm"], r["seed"]) for r in rows] == [("full", 0), ("full", 1), ("static", 0), ("static", 1)]
    s = ablation_summary(rows)
    assert s["delta_vs_full"]["static"] == pytest.approx(s["mean_mAR"]["full"] - s["mean_mAR"]["static"])
    assert 0 <= s["full_wins"]["static"] <= 2
    write_ablation_csv(rows, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("arm,seed")


def test_diagnostics_ranges(tiny_model, tiny_corpus):
    # purity needs >= 10 items per style, more than the tiny test split holds
    corpus = Corpus(tiny_corpus.train[40:], [], tiny_corpus.train[:40] + tiny_corpus.test, {})
    d = diagnostics(tiny_model, corpus, probe_steps=20)
    assert set(d) == {"disc_accuracy", "probe_fsr_accuracy", "style_purity_fsa"}
    assert all(0 <= v <= 1 for v in d.values())


def test_joint_objective_runs_in_both_stages(tiny_backbone, tiny_corpus):
    m = _model(tiny_backbone, loss={"joint": True}, cross_lingual={"steps": 2}, cross_modal={"steps": 2})
    res = TransferTrainer(m, tiny_corpus).run()
    w = m.cfg.loss
    for stage in ("cross_lingual", "cross_modal"):
        for r in res[stage].trace:
            assert r["stage"] == stage
            total = r["cl"] + r["cm"] + w.lambda_adv * r["adv"] + w.lambda_sc * r["sc"]
            assert r["loss"] == pytest.approx(total, rel=1e-12)
