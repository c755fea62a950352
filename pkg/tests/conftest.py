import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dasd.config import preset  # noqa: E402
from dasd.hypernet import DASDModel  # noqa: E402
from dasd.pipeline import make_corpus, pretrain  # noqa: E402


def tiny_config(seed=0, **sections):
    """Two-layer desk variant, small enough for per-test training runs."""
    base = {
        "backbone": {"num_layers": 2, "model_dim": 32, "num_heads": 2, "ffn_dim": 64, "proj_dim": 16,
                     "target_embed_dim": 32, "vision_hidden": 32},
        "adapter": {"d_u": 4, "d_z": 16, "generator_hidden": 32, "sdm_hidden": 16, "disc_hidden": [16, 8]},
        "world": {"n_concepts": 40},
        "pretrain": {"steps": 150, "batch_size": 32, "lr": 3e-3},
        "cross_lingual": {"steps": 40, "lr": 1e-3, "batch_size": 16},
        "cross_modal": {"steps": 10, "lr": 1e-4, "batch_size": 16},
    }
    for k, v in sections.items():
        base[k] = {**base.get(k, {}), **v} if isinstance(v, dict) else v
    return preset("desk").replace(seed=seed, **base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg):
    return make_corpus(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_cfg, tiny_corpus):
    store, _ = pretrain(tiny_cfg, tiny_corpus)
    return store


@pytest.fixture
def tiny_model(tiny_cfg, tiny_backbone):
    return DASDModel.create(tiny_cfg, tiny_backbone)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def randomize_trainable(model, seed=0, scale=0.3):
    """Replace every trainable tensor by small random values (moves adapters off identity)."""
    from dasd.rng import SplitMix64

    rng = SplitMix64(seed)
    for name in model.store.trainable():
        shape = model.store[name].shape
        model.store.set_data(name, rng.normal(shape, scale=scale / np.sqrt(max(1, shape[-1]))))
    return model


def bind_and_call(model, names, fn):
    """Wrap ``fn(model)`` as a function of the named parameter tensors, for gradient checks."""

    def wrapped(*tensors):
        for n, t in zip(names, tensors):
            model.store.bind(n, t)
        return fn(model)

    return wrapped


# --------------------------------------------------------------------------
# acceptance report: one line per criterion, repeated in the terminal summary

ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
