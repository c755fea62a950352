import json

import jsonschema
import pytest

from dasd.cli import main, summary_schema

from conftest import tiny_config


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1, out
    return code, json.loads(out[0])


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    cfg = tiny_config(cross_lingual={"steps": 6}, cross_modal={"steps": 2})
    path.write_text(cfg.to_json())
    return path


@pytest.fixture(scope="module")
def backbone_run(cfg_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out


def test_genworld(capsys, cfg_file, tmp_path):
    code, body = run(capsys, "genworld", "--config", str(cfg_file), "--out", str(tmp_path))
    assert code == 0
    jsonschema.validate(body, summary_schema("genworld"))
    assert body["sizes"] == {"train": 160, "val": 20, "test": 20}
    assert (tmp_path / "corpus.jsonl").exists() and (tmp_path / "config.json").exists()


def test_pretrain_summary(capsys, cfg_file, tmp_path):
    code, body = run(capsys, "pretrain", "--config", str(cfg_file), "--out", str(tmp_path))
    assert code == 0
    jsonschema.validate(body, summary_schema("pretrain"))
    assert (tmp_path / "backbone.dasd").exists() and (tmp_path / "trace_pretrain.jsonl").exists()


def test_transfer_eval_report_chain(capsys, cfg_file, backbone_run, tmp_path):
    ckpt = str(backbone_run / "backbone.dasd")
    code, body = run(capsys, "transfer", "--config", str(cfg_file), "--ckpt", ckpt, "--out", str(tmp_path))
    assert code == 0
    jsonschema.validate(body, summary_schema("transfer"))
    code, ev = run(capsys, "eval", "--ckpt", str(tmp_path / "model.dasd"), "--split", "train",
                   "--probe-steps", "5", "--out", str(tmp_path))
    assert code == 0
    jsonschema.validate(ev, summary_schema("eval"))
    assert ev["diagnostics"]["style_purity_fsa"] is None  # 20 test items < 10 per style
    code, rep = run(capsys, "report", "--run-dir", str(tmp_path))
    assert code == 0
    jsonschema.validate(rep, summary_schema("report"))
    assert any(f.endswith("loss_curves.svg") for f in rep["files"])


def test_transfer_is_deterministic(capsys, cfg_file, backbone_run, tmp_path):
    ckpt = str(backbone_run / "backbone.dasd")
    outs = []
    for name in ("a", "b"):
        code, body = run(capsys, "transfer", "--config", str(cfg_file), "--ckpt", ckpt, "--out", str(tmp_path / name))
        assert code == 0
        outs.append(body)
    assert (tmp_path / "a" / "model.dasd").read_bytes() == (tmp_path / "b" / "model.dasd").read_bytes()
    assert (tmp_path / "a" / "metrics.json").read_text() == (tmp_path / "b" / "metrics.json").read_text()
    assert outs[0]["target_metrics"] == outs[1]["target_metrics"]


def test_untrained_model_eval_near_chance(capsys, backbone_run, tmp_path):
    code, body = run(capsys, "eval", "--ckpt", str(backbone_run / "backbone.dasd"), "--probe-steps", "5",
                     "--split", "train", "--out", str(tmp_path))
    assert code == 0
    m = body["metrics"]
    assert m["r1_tv"] <= 3.0 / m["n"]


def test_ablate_unknown_arm(capsys, cfg_file, backbone_run, tmp_path):
    code, body = run(capsys, "ablate", "--config", str(cfg_file), "--ckpt", str(backbone_run / "backbone.dasd"),
                     "--arms", "full,bogus", "--out", str(tmp_path))
    assert code == 2 and body["ok"] is False
    jsonschema.validate(body, summary_schema("error"))
    assert body["error"]["code"] == "unknown_arm" and "bogus" in body["error"]["message"]


def test_ablate_small(capsys, cfg_file, backbone_run, tmp_path):
    code, body = run(capsys, "ablate", "--config", str(cfg_file), "--ckpt", str(backbone_run / "backbone.dasd"),
                     "--arms", "full,static", "--seeds", "0", "--out", str(tmp_path))
    assert code == 0
    jsonschema.validate(body, summary_schema("ablate"))
    assert set(body["direction_checks"]) == {"static"}


@pytest.mark.parametrize("argv,code,err", [
    (["pretrain", "--config", "/nonexistent.json"], 2, "missing_input"),
    (["transfer", "--profile", "desk"], 2, "missing_input"),
    (["report", "--run-dir", "/nonexistent"], 2, "missing_input"),
])
def test_missing_inputs(capsys, tmp_path, argv, code, err):
    got, body = run(capsys, *argv, "--out", str(tmp_path))
    assert got == code and body["error"]["code"] == err


def test_bad_config(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"loss": {"tau": 0}}')
    code, body = run(capsys, "genworld", "--config", str(path), "--out", str(tmp_path))
    assert code == 2 and body["error"]["code"] == "bad_config"


def test_config_mismatch(capsys, backbone_run, tmp_path):
    code, body = run(capsys, "transfer", "--profile", "desk", "--ckpt", str(backbone_run / "backbone.dasd"),
                     "--out", str(tmp_path))
    assert code == 2 and body["error"]["code"] == "config_mismatch"


def test_bad_checkpoint(capsys, cfg_file, tmp_path):
    bad = tmp_path / "x.dasd"
    bad.write_bytes(b"garbage")
    code, body = run(capsys, "transfer", "--config", str(cfg_file), "--ckpt", str(bad), "--out", str(tmp_path))
    assert code == 1 and body["error"]["code"] == "bad_checkpoint"


def test_bad_thread_env(capsys, cfg_file, backbone_run, tmp_path, monkeypatch):
    monkeypatch.setenv("DASD_THREADS", "many")
    code, body = run(capsys, "ablate", "--config", str(cfg_file), "--ckpt", str(backbone_run / "backbone.dasd"),
                     "--arms", "full", "--seeds", "0", "--out", str(tmp_path))
    assert code == 2 and body["error"]["code"] == "bad_env"
