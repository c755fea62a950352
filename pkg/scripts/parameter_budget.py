"""Print frozen vs trainable parameter counts for the "paper" and "desk" profiles."""

from dasd.config import preset
from dasd.hypernet import parameter_counts

for name in ("paper", "desk"):
    c = parameter_counts(preset(name))
    share = c["trainable"] / c["frozen"]
    print(f"{name:6s} frozen {c['frozen']:>12,d}  trainable {c['trainable']:>10,d}  ({share:.1%} of frozen)")
    for part in ("sdm", "target_branch", "generator", "discriminator"):
        print(f"       {part:14s} {c[part]:>10,d}")
