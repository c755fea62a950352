"""Experiment configuration: dataclasses, presets and JSON parsing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised with every violation found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class UnknownKey(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass


@dataclass
class BackboneConfig:
    num_layers: int = 12
    model_dim: int = 512
    num_heads: int = 8
    ffn_dim: int = 2048
    max_seq_len: int = 77
    source_vocab: int = 49408
    target_vocab: int = 119547
    target_embed_dim: int = 768
    visual_dim: int = 48
    vision_hidden: int = 512
    proj_dim: int = 512


@dataclass
class AdapterConfig:
    d_u: int = 32
    d_z: int = 128
    generator_hidden: int = 256
    sdm_hidden: int = 256
    disc_hidden: tuple[int, int] = (64, 32)
    init_std: float = 0.02
    logit_clamp: float = 15.0
    # ablation switches
    dynamic: bool = True
    use_fsr: bool = True
    use_fsa: bool = True


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_sc: float = 0.1
    tau: float = 0.01
    joint: bool = False


@dataclass
class StageConfig:
    steps: int = 45000
    lr: float = 2e-4
    warmup: float = 0.1
    batch_size: int = 128
    disc_lr: float | None = None


@dataclass
class PretrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    warmup: float = 0.1
    batch_size: int = 64
    tau: float = 0.05
    finetune_epochs: int = 0
    finetune_lr: float = 3e-6


@dataclass
class WorldConfig:
    n_concepts: int = 200
    k_styles: int = 4
    captions_per_concept: int = 5
    noise: float = 0.3
    mt_noise: float = 0.0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    zero_shot: bool = False
    colour_shift: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "paper"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    cross_lingual: StageConfig = field(default_factory=StageConfig)
    cross_modal: StageConfig = field(default_factory=lambda: StageConfig(steps=6000, lr=6e-6))
    world: WorldConfig = field(default_factory=WorldConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with nested overrides, e.g. ``replace(adapter={"dynamic": False})``."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                d[key].update(val)
            else:
                d[key] = val
        return from_dict(d)


PRESETS: dict[str, dict] = {
    "paper": {},
    "desk": {
        "backbone": {
            "num_layers": 4,
            "model_dim": 64,
            "num_heads": 4,
            "ffn_dim": 128,
            "max_seq_len": 24,
            "source_vocab": 256,
            "target_vocab": 256,
            "target_embed_dim": 64,
            "visual_dim": 48,
            "vision_hidden": 64,
            "proj_dim": 32,
        },
        "adapter": {"d_u": 8, "d_z": 32, "generator_hidden": 64, "sdm_hidden": 32},
        "pretrain": {"steps": 3000, "batch_size": 64},
        "cross_lingual": {"steps": 2000, "lr": 2e-4, "batch_size": 32},
        "cross_modal": {"steps": 500, "lr": 6e-6, "batch_size": 32},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise InvalidValue([f"profile: unknown preset {name!r}"])
    return from_dict({**PRESETS[name], "profile": name})


_SECTIONS = ("backbone", "adapter", "loss", "pretrain", "cross_lingual", "cross_modal", "world")


def _coerce(base, data: dict, path: str, unknown: list, problems: list):
    cls = type(base)
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in data.items():
        if key not in names:
            unknown.append(f"{path}{key}")
            continue
        default = getattr(base, key)
        if isinstance(default, tuple) and isinstance(val, list):
            val = tuple(val)
        if isinstance(default, bool):
            if not isinstance(val, bool):
                problems.append(f"{path}{key}: expected bool, got {val!r}")
                continue
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, int):
                problems.append(f"{path}{key}: expected int, got {val!r}")
                continue
        elif isinstance(default, float) or (default is None and key.endswith("lr")):
            if val is not None and (isinstance(val, bool) or not isinstance(val, (int, float))):
                problems.append(f"{path}{key}: expected number, got {val!r}")
                continue
            val = None if val is None else float(val)
        kwargs[key] = val
    return dataclasses.replace(base, **kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise InvalidValue(["config must be a JSON object"])
    data = dict(data)
    profile = data.get("profile", "paper")
    if profile not in PRESETS:
        raise InvalidValue([f"profile: unknown preset {profile!r}"])
    data = _merge(PRESETS[profile], data)
    unknown: list[str] = []
    problems: list[str] = []
    kwargs = {}
    defaults = ExperimentConfig()
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, val in data.items():
        if key not in top:
            unknown.append(key)
        elif key in _SECTIONS:
            if not isinstance(val, dict):
                problems.append(f"{key}: expected object")
                continue
            kwargs[key] = _coerce(getattr(defaults, key), val, f"{key}.", unknown, problems)
        elif key == "seed":
            if isinstance(val, bool) or not isinstance(val, int) or val < 0:
                problems.append(f"seed: expected non-negative int, got {val!r}")
            else:
                kwargs[key] = val
        else:
            kwargs[key] = val
    if unknown:
        raise UnknownKey([f"unknown key: {k}" for k in unknown] + problems)
    cfg = ExperimentConfig(**kwargs)
    problems += validate(cfg)
    if problems:
        raise InvalidValue(problems)
    return cfg


def validate(cfg: ExperimentConfig) -> list[str]:
    p: list[str] = []
    b, a, lw, w = cfg.backbone, cfg.adapter, cfg.loss, cfg.world
    for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "source_vocab",
                 "target_vocab", "target_embed_dim", "visual_dim", "vision_hidden", "proj_dim"):
        if getattr(b, name) <= 0:
            p.append(f"backbone.{name}: must be positive")
    if b.num_heads > 0 and b.model_dim % b.num_heads:
        p.append("backbone.model_dim: must be divisible by num_heads")
    if b.max_seq_len < 3:
        p.append("backbone.max_seq_len: must be >= 3")
    if not 0 < a.d_u < b.model_dim:
        p.append("adapter.d_u: must satisfy 0 < d_u < model_dim")
    if not 0 < a.sdm_hidden < b.model_dim:
        p.append("adapter.sdm_hidden: must satisfy 0 < sdm_hidden < model_dim")
    if a.d_z <= 0 or a.generator_hidden <= 0:
        p.append("adapter.d_z/generator_hidden: must be positive")
    if cfg.profile == "desk" and a.d_u * a.d_u > 4 * a.d_z:
        p.append("adapter.d_u: desk profile requires d_u**2 <= 4 * d_z")
    if len(a.disc_hidden) != 2 or min(a.disc_hidden) <= 0:
        p.append("adapter.disc_hidden: two positive sizes required")
    if not a.use_fsr and not a.use_fsa:
        p.append("adapter: at least one of use_fsr/use_fsa must be set")
    if a.logit_clamp <= 0:
        p.append("adapter.logit_clamp: must be positive")
    if not lw.tau > 0:
        p.append("loss.tau: must be > 0")
    if lw.lambda_adv < 0 or lw.lambda_sc < 0:
        p.append("loss.lambda_adv/lambda_sc: must be >= 0")
    for sname in ("cross_lingual", "cross_modal"):
        s = getattr(cfg, sname)
        if s.steps < 0:
            p.append(f"{sname}.steps: must be >= 0")
        if not s.lr > 0:
            p.append(f"{sname}.lr: must be > 0")
        if not 0 <= s.warmup < 1:
            p.append(f"{sname}.warmup: must lie in [0, 1)")
        if s.batch_size < 1:
            p.append(f"{sname}.batch_size: must be >= 1")
        if s.disc_lr is not None and not s.disc_lr > 0:
            p.append(f"{sname}.disc_lr: must be > 0")
    pt = cfg.pretrain
    if pt.steps < 0 or not pt.lr > 0 or pt.batch_size < 2 or not pt.tau > 0:
        p.append("pretrain: steps >= 0, lr > 0, batch_size >= 2, tau > 0 required")
    if not 0 <= pt.warmup < 1:
        p.append("pretrain.warmup: must lie in [0, 1)")
    if pt.finetune_epochs < 0 or not pt.finetune_lr > 0:
        p.append("pretrain: finetune_epochs >= 0 and finetune_lr > 0 required")
    if w.n_concepts < 10:
        p.append("world.n_concepts: must be >= 10")
    if w.k_styles < 1:
        p.append("world.k_styles: must be >= 1")
    if w.captions_per_concept < 1:
        p.append("world.captions_per_concept: must be >= 1")
    if w.noise < 0:
        p.append("world.noise: must be >= 0")
    if not 0 <= w.mt_noise <= 1:
        p.append("world.mt_noise: must lie in [0, 1]")
    if len(w.split) != 3 or min(w.split) < 0 or abs(sum(w.split) - 1) > 1e-9:
        p.append("world.split: three non-negative fractions summing to 1")
    if cfg.profile not in PRESETS:
        p.append(f"profile: unknown preset {cfg.profile!r}")
    return p


def parse_config(text: str) -> ExperimentConfig:
    """Parse JSON text; missing keys fall back to the selected profile's defaults."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise InvalidValue([f"invalid JSON: {exc}"]) from None
    return from_dict(data)
