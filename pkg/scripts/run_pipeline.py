"""Corpus -> pretrained backbone -> both transfer stages -> eval -> report, via the CLI.

    python3 scripts/run_pipeline.py --out runs/main            # lean acceptance profile
    python3 scripts/run_pipeline.py --out runs/desk --desk     # full desk preset (slow)
"""

import argparse
import json
import sys
from pathlib import Path

from dasd.acceptance import main_config
from dasd.cli import main as cli


def step(*argv):
    code = cli(list(argv))
    if code:
        sys.exit(code)


def run():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/main")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--desk", action="store_true", help="use the desk preset instead of the lean profile")
    ap.add_argument("--probe-steps", default="300")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "run_config.json"
    if args.desk:
        cfg_path.write_text(json.dumps({"profile": "desk", "seed": args.seed}))
    else:
        cfg_path.write_text(main_config(args.seed).to_json())
    common = ["--config", str(cfg_path), "--out", str(out)]
    step("genworld", *common)
    step("pretrain", *common, "--corpus", str(out / "corpus.jsonl"))
    step("transfer", *common, "--corpus", str(out / "corpus.jsonl"), "--ckpt", str(out / "backbone.dasd"))
    step("eval", "--out", str(out), "--corpus", str(out / "corpus.jsonl"), "--ckpt", str(out / "model.dasd"),
         "--probe-steps", args.probe_steps)
    step("report", "--run-dir", str(out))


if __name__ == "__main__":
    run()
