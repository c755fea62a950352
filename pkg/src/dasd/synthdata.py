"""Deterministic bilingual, multi-style image-caption world.

A concept is an (object, colour, location) triple with a latent visual vector
equal to the sum of per-attribute vectors. Source captions use one canonical
template; target captions are rendered in one of ``K`` style families that
differ in word order, filler words and length. Token ids ``0, 1, 2`` are
``[SOS]``, ``[EOS]`` and padding in both languages; source words live in
``[3, 128)`` and target words in ``[128, 256)`` of their own tables, so no id
is shared between the two lexicons.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64, mix64

SOS, EOS, PAD = 0, 1, 2
SOURCE_RANGE = (3, 128)
TARGET_RANGE = (128, 256)
N_COLORS = 5
N_LOCATIONS = 4
LANGS = ("source", "target")


class InvalidConfig(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


@dataclass
class Concept:
    id: int
    obj: int
    color: int
    location: int
    latent: np.ndarray


@dataclass
class Lexicon:
    """Token ids for one language."""

    objects: list[int]
    colors: list[int]
    locations: list[int]
    function: dict[str, int]
    synonyms: dict[int, int] = field(default_factory=dict)


@dataclass
class World:
    seed: int
    concepts: list[Concept]
    k_styles: int
    noise: float
    visual_dim: int
    source: Lexicon
    target: Lexicon
    styles: list[dict]
    max_seq_len: int = 24
    colour_shift: bool = False

    def lexicon(self, language: str) -> Lexicon:
        if language not in LANGS:
            raise InvalidConfig(f"unknown language {language!r}")
        return self.source if language == "source" else self.target


@dataclass
class TripletExample:
    source_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]
    target_style: int
    visual: np.ndarray
    concept_id: int


@dataclass
class Corpus:
    train: list[TripletExample]
    val: list[TripletExample]
    test: list[TripletExample]
    metadata: dict

    def split(self, name: str) -> list[TripletExample]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


# --------------------------------------------------------------------------
# style families for the target language
#
# slot names: C colour, O object, L location; any other slot is a filler drawn
# from the style's private pool. Four hand-written families mirror the caption
# groups seen in real data (quantifier first, location first, quantifier plus
# modifier, long two-part); further families are generated.

_BASE_STYLES = [
    ["q", "C", "O", "p", "L"],
    ["p", "L", "f", "C", "O"],
    ["q", "m", "C", "O", "p", "L"],
    ["O", "C", "f", "f", "s", "f", "L", "f"],
]


def _make_styles(k: int, rng: SplitMix64) -> list[list[str]]:
    styles = [list(s) for s in _BASE_STYLES[:k]]
    while len(styles) < k:
        content = ["C", "O", "L"]
        order = [content[i] for i in rng.permutation(3)]
        n_fill = 1 + len(styles) % 4
        tmpl = list(order)
        for _ in range(n_fill):
            pos = rng.integers(len(tmpl) + 1)
            tmpl.insert(pos, "f")
        styles.append(tmpl)
    return styles


def gen_world(
    seed: int,
    n_concepts: int = 200,
    k_styles: int = 4,
    noise: float = 0.3,
    visual_dim: int = 48,
    max_seq_len: int = 24,
    colour_shift: bool = False,
) -> World:
    if n_concepts < 10:
        raise InvalidConfig("n_concepts must be >= 10")
    if k_styles < 1:
        raise InvalidConfig("k_styles must be >= 1")
    if noise < 0:
        raise InvalidConfig("noise must be >= 0")
    rng = SplitMix64(seed)
    n_obj = math.ceil(n_concepts / (N_COLORS * N_LOCATIONS))

    # source lexicon: objects, colours, locations, then function words
    nxt = SOURCE_RANGE[0]
    src_obj = list(range(nxt, nxt + n_obj)); nxt += n_obj
    src_col = list(range(nxt, nxt + N_COLORS)); nxt += N_COLORS
    src_loc = list(range(nxt, nxt + N_LOCATIONS)); nxt += N_LOCATIONS
    src_fn = {"a": nxt, "in": nxt + 1, "the": nxt + 2}
    if nxt + 3 > SOURCE_RANGE[1]:
        raise InvalidConfig("too many concepts for the source vocabulary range")
    source = Lexicon(src_obj, src_col, src_loc, src_fn)

    # target lexicon: content words with one near-synonym each, then style fillers
    styles = _make_styles(k_styles, rng.spawn(1))
    n_content = n_obj + N_COLORS + N_LOCATIONS
    nxt = TARGET_RANGE[0]
    tgt_content = list(range(nxt, nxt + n_content)); nxt += n_content
    synonyms = {w: nxt + i for i, w in enumerate(tgt_content)}; nxt += n_content
    style_defs = []
    for s, tmpl in enumerate(styles):
        pools = {}
        for slot in sorted(set(tmpl) - {"C", "O", "L"}):
            size = 2 if slot in ("q", "m", "f") else 1
            pools[slot] = list(range(nxt, nxt + size)); nxt += size
        style_defs.append({"template": tmpl, "fillers": pools})
    if nxt > TARGET_RANGE[1]:
        raise InvalidConfig("too many concepts/styles for the target vocabulary range")
    target = Lexicon(
        tgt_content[:n_obj],
        tgt_content[n_obj:n_obj + N_COLORS],
        tgt_content[n_obj + N_COLORS:],
        {},
        synonyms,
    )

    crng = rng.spawn(2)
    obj_vec = crng.normal((n_obj, visual_dim))
    col_vec = crng.normal((N_COLORS, visual_dim))
    loc_vec = crng.normal((N_LOCATIONS, visual_dim))
    combos = [(o, c, l) for o in range(n_obj) for c in range(N_COLORS) for l in range(N_LOCATIONS)]
    pick = sorted(crng.permutation(len(combos))[:n_concepts])
    concepts = []
    for cid, k in enumerate(pick):
        o, c, l = combos[k]
        latent = obj_vec[o] + col_vec[c] + loc_vec[l]
        concepts.append(Concept(cid, o, c, l, latent))
    return World(seed, concepts, k_styles, noise, visual_dim, source, target, style_defs, max_seq_len, colour_shift)


def render_caption(
    world: World,
    concept: Concept | int,
    language: str,
    style: int = 0,
    seed: int = 0,
    mt_noise: float = 0.0,
) -> tuple[int, ...]:
    """Token ids including ``[SOS]``/``[EOS]``."""
    if isinstance(concept, int):
        concept = world.concepts[concept]
    lex = world.lexicon(language)
    rng = SplitMix64(mix64(world.seed, concept.id, style, seed, 7))
    colour = concept.color
    if language == "target" and world.colour_shift:
        # register-dependent sense: style s names colour c with the word for c + s
        colour = (colour + style) % N_COLORS
    words = {"C": lex.colors[colour], "O": lex.objects[concept.obj], "L": lex.locations[concept.location]}
    if language == "source":
        body = [lex.function["a"], words["C"], words["O"], lex.function["in"], lex.function["the"], words["L"]]
    else:
        if not 0 <= style < world.k_styles:
            raise InvalidConfig(f"style {style} outside [0, {world.k_styles})")
        sdef = world.styles[style]
        body = []
        for slot in sdef["template"]:
            if slot in words:
                w = words[slot]
                if mt_noise > 0 and rng.uniform() < mt_noise:
                    w = lex.synonyms[w]
                body.append(w)
            else:
                body.append(rng.choice(sdef["fillers"][slot]))
    tokens = (SOS, *body, EOS)
    if len(tokens) > world.max_seq_len:
        raise SequenceTooLong(f"{len(tokens)} tokens > {world.max_seq_len}")
    return tokens


def render_visual(world: World, concept: Concept | int, noise: float | None = None, seed: int = 0) -> np.ndarray:
    if isinstance(concept, int):
        concept = world.concepts[concept]
    sigma = world.noise if noise is None else noise
    if sigma < 0:
        raise InvalidConfig("noise must be >= 0")
    if sigma == 0:
        return concept.latent.copy()
    rng = SplitMix64(mix64(world.seed, concept.id, seed, 11))
    return concept.latent + rng.normal(world.visual_dim, scale=sigma)


def make_triplets(world: World, captions_per_concept: int = 5, mt_noise: float = 0.0) -> list[TripletExample]:
    out = []
    for c in world.concepts:
        for j in range(captions_per_concept):
            style = (c.id * captions_per_concept + j) % world.k_styles
            out.append(
                TripletExample(
                    render_caption(world, c, "source", seed=j),
                    render_caption(world, c, "target", style, seed=j, mt_noise=mt_noise),
                    style,
                    render_visual(world, c, seed=j),
                    c.id,
                )
            )
    return out


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_corpus(
    world: World,
    split=(0.8, 0.1, 0.1),
    zero_shot: bool = False,
    captions_per_concept: int = 5,
    mt_noise: float = 0.0,
) -> Corpus:
    """Split triplets into train/val/test.

    The ordinary split is stratified by style so every split sees a uniform
    style mix. ``zero_shot`` splits by concept instead, so test concepts never
    occur in training.
    """
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1) > 1e-9:
        raise InvalidConfig("split must be three non-negative fractions summing to 1")
    triplets = make_triplets(world, captions_per_concept, mt_noise)
    rng = SplitMix64(mix64(world.seed, 99))
    parts: dict[str, list[TripletExample]] = {"train": [], "val": [], "test": []}
    if zero_shot:
        n_train, n_val, _ = _split_counts(len(world.concepts), split)
        order = rng.permutation(len(world.concepts))
        owner = {}
        for rank, cid in enumerate(order):
            owner[int(cid)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        for t in triplets:
            parts[owner[t.concept_id]].append(t)
    else:
        for s in range(world.k_styles):
            group = [t for t in triplets if t.target_style == s]
            n_train, n_val, _ = _split_counts(len(group), split)
            order = rng.permutation(len(group))
            for rank, idx in enumerate(order):
                name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
                parts[name].append(group[idx])
    for name in parts:
        if not parts[name] and split[("train", "val", "test").index(name)] > 0:
            raise InvalidConfig(f"split {name} would be empty")
        parts[name].sort(key=lambda t: (t.concept_id, t.target_style, t.target_tokens))
    meta = {
        "seed": world.seed,
        "n_concepts": len(world.concepts),
        "k_styles": world.k_styles,
        "noise": world.noise,
        "mt_noise": mt_noise,
        "captions_per_concept": captions_per_concept,
        "zero_shot": zero_shot,
        "sizes": {k: len(v) for k, v in parts.items()},
        "visual_dim": world.visual_dim,
        "colour_shift": world.colour_shift,
    }
    return Corpus(parts["train"], parts["val"], parts["test"], meta)


def corpus_from_config(wcfg, visual_dim: int, max_seq_len: int, seed: int) -> tuple[World, Corpus]:
    world = gen_world(seed, wcfg.n_concepts, wcfg.k_styles, wcfg.noise, visual_dim, max_seq_len, wcfg.colour_shift)
    corpus = build_corpus(world, wcfg.split, wcfg.zero_shot, wcfg.captions_per_concept, wcfg.mt_noise)
    return world, corpus


# --------------------------------------------------------------------------
# JSON-lines serialisation


def _encode_visual(v: np.ndarray) -> str:
    return base64.b64encode(np.asarray(v, dtype="<f8").tobytes()).decode("ascii")


def _decode_visual(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def dumps_corpus(corpus: Corpus) -> str:
    lines = [json.dumps({"kind": "corpus", "version": 1, **corpus.metadata}, sort_keys=True)]
    for name in ("train", "val", "test"):
        for t in corpus.split(name):
            lines.append(json.dumps({
                "split": name,
                "concept_id": t.concept_id,
                "source_tokens": list(t.source_tokens),
                "target_tokens": list(t.target_tokens),
                "style": t.target_style,
                "visual": _encode_visual(t.visual),
            }, sort_keys=True))
    return "\n".join(lines) + "\n"


def loads_corpus(text: str) -> Corpus:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidConfig("empty corpus file")
    meta = json.loads(lines[0])
    if meta.pop("kind", None) != "corpus":
        raise InvalidConfig("first line must be the corpus metadata header")
    meta.pop("version", None)
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    for ln in lines[1:]:
        r = json.loads(ln)
        parts[r["split"]].append(TripletExample(
            tuple(r["source_tokens"]), tuple(r["target_tokens"]), r["style"],
            _decode_visual(r["visual"]), r["concept_id"],
        ))
    return Corpus(parts["train"], parts["val"], parts["test"], meta)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_corpus(corpus))


def load_corpus(path) -> Corpus:
    with open(path) as fh:
        return loads_corpus(fh.read())
