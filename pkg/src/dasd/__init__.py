"""Dynamic adapters with semantics disentangling (DASD) at desk scale.

A frozen dual encoder is pretrained on synthetic source-language captions and
visual features; a target-language branch is then attached through adapters
whose inner matrices are generated per caption from disentangled
semantic-related / semantic-agnostic features.
"""

import os as _os

# single-threaded BLAS keeps reductions, and therefore every loss, bit-stable
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
