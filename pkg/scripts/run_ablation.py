"""Train every ablation arm over three seeds on the colour-shift world and render the report.

    python3 scripts/run_ablation.py --out runs/ablation
    DASD_THREADS=4 python3 scripts/run_ablation.py --arms full,static --seeds 0,1,2
"""

import argparse
import sys
from pathlib import Path

from dasd.acceptance import ABLATION_ARMS, ablation_config
from dasd.cli import main as cli


def run():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--arms", default=",".join(ABLATION_ARMS))
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "run_config.json"
    cfg_path.write_text(ablation_config(0).to_json())
    common = ["--config", str(cfg_path), "--out", str(out)]
    for argv in (
        ["genworld", *common],
        ["pretrain", *common, "--corpus", str(out / "corpus.jsonl")],
        ["ablate", *common, "--corpus", str(out / "corpus.jsonl"), "--ckpt", str(out / "backbone.dasd"),
         "--arms", args.arms, "--seeds", args.seeds],
        ["report", "--run-dir", str(out)],
    ):
        code = cli(argv)
        if code:
            sys.exit(code)


if __name__ == "__main__":
    run()
