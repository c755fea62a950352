"""Command-line entry point: ``dasd {genworld,pretrain,transfer,eval,ablate,report}``.

Every command prints one JSON object on stdout (logs go to stderr) and writes
its artifacts plus a copy of the resolved config into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

SCHEMA_VERSION = 1
log = logging.getLogger("dasd")

_METRICS = {
    "type": "object",
    "required": ["r1_tv", "r5_tv", "r10_tv", "r1_vt", "r5_vt", "r10_vt", "mAR", "n"],
}
_BASE = {
    "type": "object",
    "required": ["schema_version", "command", "ok"],
    "properties": {"schema_version": {"const": SCHEMA_VERSION}, "ok": {"type": "boolean"}},
}
SUMMARY_SCHEMAS = {
    "genworld": {"required": ["corpus", "sizes", "config_hash"]},
    "pretrain": {"required": ["checkpoint", "source_metrics", "final_loss"],
                 "properties": {"source_metrics": _METRICS}},
    "transfer": {"required": ["checkpoint", "final_losses", "target_metrics", "source_metrics"],
                 "properties": {"target_metrics": _METRICS, "source_metrics": _METRICS}},
    "eval": {"required": ["metrics", "diagnostics", "split"], "properties": {"metrics": _METRICS}},
    "ablate": {"required": ["csv", "summary", "direction_checks"]},
    "report": {"required": ["files"]},
    "error": {"required": ["error"],
              "properties": {"error": {"type": "object", "required": ["code", "message"]}}},
}


def summary_schema(command: str) -> dict:
    """JSON Schema for the stdout summary of ``command`` (or ``"error"``)."""
    extra = SUMMARY_SCHEMAS[command]
    props = {**_BASE["properties"], **extra.get("properties", {})}
    return {**_BASE, "required": _BASE["required"] + extra["required"], "properties": props}


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


# --------------------------------------------------------------------------
# helpers


def _resolve_config(args):
    from .config import ConfigError, from_dict, preset

    try:
        if args.config:
            text = Path(args.config).read_text()
            data = json.loads(text) if text.strip() else {}
            if args.profile and "profile" not in data:
                data["profile"] = args.profile
            cfg = from_dict(data)
        else:
            cfg = preset(args.profile or "desk")
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except FileNotFoundError:
        raise CliError("missing_input", f"config file not found: {args.config}", 2) from None
    except json.JSONDecodeError as exc:
        raise CliError("bad_config", f"invalid JSON: {exc}", 2) from None
    except ConfigError as exc:
        raise CliError("bad_config", "; ".join(exc.problems), 2) from None
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path, what: str) -> Path:
    if not path:
        raise CliError("missing_input", f"--{what} is required", 2)
    p = Path(path)
    if not p.exists():
        raise CliError("missing_input", f"{what} not found: {p}", 2)
    return p


def _corpus(args, cfg):
    from .pipeline import make_corpus
    from .synthdata import load_corpus

    if args.corpus:
        return load_corpus(_need(args.corpus, "corpus"))
    return make_corpus(cfg)


def _threads() -> int:
    raw = os.environ.get("DASD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError("bad_env", f"DASD_THREADS must be an integer, got {raw!r}", 2) from None
    if n < 1:
        raise CliError("bad_env", "DASD_THREADS must be >= 1", 2)
    return n


def _thread_limit():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(_threads())


def _write_config(out: Path, cfg) -> None:
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _load_ckpt(path, what="ckpt"):
    from .checkpoint import CheckpointError

    p = _need(path, what)
    try:
        from .checkpoint import load_checkpoint

        return load_checkpoint(p)
    except CheckpointError as exc:
        raise CliError("bad_checkpoint", f"{p}: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_genworld(args) -> dict:
    from .synthdata import save_corpus

    cfg = _resolve_config(args)
    out = _out_dir(args)
    corpus = _corpus(args, cfg)
    path = out / "corpus.jsonl"
    save_corpus(corpus, path)
    _write_config(out, cfg)
    return {"corpus": str(path), "sizes": corpus.metadata["sizes"], "config_hash": cfg.hash()}


def cmd_pretrain(args) -> dict:
    from .checkpoint import save_checkpoint
    from .pipeline import backbone_checkpoint, pretrain, source_metrics, write_jsonl

    cfg = _resolve_config(args)
    out = _out_dir(args)
    corpus = _corpus(args, cfg)
    store, trace = pretrain(cfg, corpus)
    ckpt = out / "backbone.dasd"
    save_checkpoint(backbone_checkpoint(cfg, store), ckpt)
    write_jsonl(trace, out / "trace_pretrain.jsonl")
    with _thread_limit():
        m = source_metrics(cfg, store, corpus.test)
    (out / "metrics.json").write_text(json.dumps({"source": m.to_dict()}, indent=2, sort_keys=True))
    _write_config(out, cfg)
    return {"checkpoint": str(ckpt), "source_metrics": m.to_dict(),
            "final_loss": trace[-1]["loss"] if trace else None}


def _backbone_from(args, cfg):
    from .config import from_dict

    ck = _load_ckpt(args.ckpt)
    saved = from_dict(ck.config) if ck.config else None
    if saved is not None and saved.backbone != cfg.backbone:
        raise CliError("config_mismatch", "checkpoint backbone differs from the requested config", 2)
    from .engine import ParamStore

    store = ParamStore()
    for n, t in ck.store.items():
        if n.startswith("backbone."):
            store.add(n, t.data, frozen=ck.store.is_frozen(n))
    return store


def cmd_transfer(args) -> dict:
    from .backbone import DivergedTraining
    from .pipeline import save_model, source_metrics, transfer, write_jsonl
    from .trainer import evaluate_retrieval

    cfg = _resolve_config(args)
    out = _out_dir(args)
    corpus = _corpus(args, cfg)
    backbone = _backbone_from(args, cfg)
    try:
        model, trainer, results = transfer(cfg, backbone, corpus)
    except DivergedTraining as exc:
        raise CliError("diverged", str(exc)) from None
    ckpt = out / "model.dasd"
    save_model(model, ckpt, trainer)
    for stage, res in results.items():
        write_jsonl(res.trace, out / f"trace_{stage}.jsonl")
    with _thread_limit():
        tm = evaluate_retrieval(model, corpus.test)
        sm = source_metrics(cfg, backbone, corpus.test)
    metrics = {"target": tm.to_dict(), "source": sm.to_dict()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    _write_config(out, cfg)
    return {
        "checkpoint": str(ckpt),
        "final_losses": {s: r.last() for s, r in results.items()},
        "target_metrics": tm.to_dict(),
        "source_metrics": sm.to_dict(),
    }


def cmd_eval(args) -> dict:
    from .config import from_dict
    from .hypernet import DASDModel
    from .trainer import diagnostics, evaluate_retrieval

    ck = _load_ckpt(args.ckpt)
    cfg = from_dict(ck.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = _out_dir(args)
    corpus = _corpus(args, cfg)
    if ck.meta.get("kind") == "backbone":
        model = DASDModel.create(cfg, ck.store)
    else:
        model = DASDModel(cfg, ck.store)
    examples = corpus.split(args.split)
    with _thread_limit():
        m = evaluate_retrieval(model, examples)
        diag = diagnostics(model, corpus, seed=cfg.seed, probe_steps=args.probe_steps)
    result = {"metrics": m.to_dict(), "diagnostics": diag, "split": args.split}
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def cmd_ablate(args) -> dict:
    from .trainer import ARMS, ablation_summary, run_ablation_suite, write_ablation_csv

    arms = [a.strip() for a in args.arms.split(",")] if args.arms else list(ARMS)
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise CliError("unknown_arm", f"unknown arm(s): {', '.join(bad)}; choose from {', '.join(ARMS)}", 2)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise CliError("bad_argument", f"--seeds must be comma-separated integers, got {args.seeds!r}", 2) from None
    cfg = _resolve_config(args)
    out = _out_dir(args)
    corpus = _corpus(args, cfg)
    backbone = _backbone_from(args, cfg)
    rows = run_ablation_suite(cfg, backbone, corpus, seeds, arms, workers=_threads())
    path = out / "ablation.csv"
    write_ablation_csv(rows, path)
    summ = ablation_summary(rows)
    checks = {}
    if "full" in summ["mean_mAR"]:
        for arm, gap in summ.get("delta_vs_full", {}).items():
            checks[arm] = {"mean_gap": gap, "full_wins": summ["full_wins"][arm], "seeds": len(seeds)}
    _write_config(out, cfg)
    (out / "ablation_summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True))
    return {"csv": str(path), "summary": summ, "direction_checks": checks}


def cmd_report(args) -> dict:
    from .report import render_run

    run = args.run_dir or args.out
    if not run or not Path(run).is_dir():
        raise CliError("missing_input", f"run directory not found: {run}", 2)
    return {"files": render_run(run)}


COMMANDS = {
    "genworld": cmd_genworld,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dasd", description="Dynamic adapters with semantics disentangling, desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True, ckpt=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--profile", choices=["paper", "desk"], help="preset used for missing keys")
        sp.add_argument("--out", default="runs/latest", help="run directory")
        if corpus:
            sp.add_argument("--corpus", help="corpus JSONL (generated from the config if omitted)")
        if ckpt:
            sp.add_argument("--ckpt", help="input checkpoint (.dasd)")

    common(sub.add_parser("genworld", help="write a synthetic corpus"))
    common(sub.add_parser("pretrain", help="pretrain and freeze the backbone"))
    common(sub.add_parser("transfer", help="run both transfer stages"), ckpt=True)
    ev = sub.add_parser("eval", help="retrieval metrics and disentangling diagnostics")
    common(ev, ckpt=True)
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    ev.add_argument("--probe-steps", type=int, default=300)
    ab = sub.add_parser("ablate", help="train every ablation arm")
    common(ab, ckpt=True)
    ab.add_argument("--arms", help="comma-separated arm names (default: all)")
    ab.add_argument("--seeds", default="0,1,2")
    rp = sub.add_parser("report", help="render SVG/CSV from a run directory")
    common(rp, corpus=False)
    rp.add_argument("--run-dir")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    base = {"schema_version": SCHEMA_VERSION, "command": args.command}
    try:
        body = COMMANDS[args.command](args)
        print(json.dumps({**base, "ok": True, **body}, sort_keys=True, default=float))
        return 0
    except CliError as exc:
        err, code = {"code": exc.code, "message": str(exc)}, exc.exit_code
    except Exception as exc:  # noqa: BLE001 - every failure must still yield JSON
        log.debug("unhandled error", exc_info=True)
        err, code = {"code": "internal", "message": f"{type(exc).__name__}: {exc}"}, 1
    print(json.dumps({**base, "ok": False, "error": err}, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
