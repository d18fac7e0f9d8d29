"""Seeded generation of RefEx examples, dataset bundles and JSONL files.

Every example is drawn from its own generator keyed by ``(seed, stream, index)``,
so any subset of a dataset can be regenerated without replaying the rest.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    COLORS, N_CELLS, RELATIONS, SHAPES, SIZE_WORDS, SIZES, SPLITS_FOR_VARIANT,
    VARIANTS, Example, GridWorld, ObjDesc, Resolution, ThreeAttr, ThreeAttrRel,
    TwoAttr, WorldObject, make_example, parse_command, resolve_target,
    surface_tokens, tag_splits,
)

MAX_ATTEMPTS = 1000

# stream ids for the per-example generators
STREAMS = {"train": 0, "val": 1, "random": 2, "A1": 3, "A2": 4, "A3": 5, "A4": 6,
           "val_A1": 7, "val_A2": 8, "val_A3": 9, "val_A4": 10}

PAIRS = [(c, s) for c in COLORS for s in SHAPES]
GREEN_SQUARE = ("green", "square")


class GenerationError(RuntimeError):
    """Raised when a constraint cannot be met within the resampling cap."""


@dataclass(frozen=True)
class GenSpec:
    variant: str
    seed: int = 0
    train_count: int = 90_000
    val_count: int = 2_500
    test_count: int = 2_500
    min_objects: int = 3
    max_objects: int = 10
    green_square_distractor_scale: float = 1.0
    partial_match_fraction: float = 0.0
    holdout: frozenset = None  # None -> every split applicable to the variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.train_count, self.val_count, self.test_count) <= 0:
            raise ValueError("dataset counts must be positive")
        if self.min_objects < 2 or self.max_objects > N_CELLS:
            raise ValueError("object range must lie within 2..36")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        if not 0.0 <= self.partial_match_fraction <= 1.0:
            raise ValueError("partial_match_fraction must lie in [0, 1]")
        if not 0.0 <= self.green_square_distractor_scale <= 1.0:
            raise ValueError("green_square_distractor_scale must lie in [0, 1]")
        if self.holdout is None:
            object.__setattr__(self, "holdout", frozenset(SPLITS_FOR_VARIANT[self.variant]))
        else:
            bad = set(self.holdout) - set(SPLITS_FOR_VARIANT[self.variant])
            if bad:
                raise ValueError(f"splits {sorted(bad)} do not apply to {self.variant}")
            object.__setattr__(self, "holdout", frozenset(self.holdout))


@dataclass
class DatasetBundle:
    spec: GenSpec
    train: list
    val: list
    random_test: list
    split_tests: dict = field(default_factory=dict)


def example_rng(seed: int, stream: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, STREAMS[stream], index])


# --- object sampling ------------------------------------------------------

def _pair(rng):
    return PAIRS[rng.integers(len(PAIRS))]


def _distractor_pair(rng, spec, target_pair, banned=()):
    """Non-target (color, shape) pair for a distractor.

    With probability ``spec.partial_match_fraction`` the distractor shares exactly
    one attribute with ``target_pair``; otherwise it is uniform over the other
    pairs. A green square is kept with probability
    ``spec.green_square_distractor_scale`` and otherwise redrawn from the same
    pool without it, so its marginal rate scales by exactly that factor.
    """
    if target_pair is not None and rng.random() < spec.partial_match_fraction:
        color, shape = target_pair
        if rng.random() < 0.5:
            pool = [(color, s) for s in SHAPES if s != shape]
        else:
            pool = [(c, shape) for c in COLORS if c != color]
    else:
        pool = [p for p in PAIRS if p != target_pair]
    pool = [p for p in pool if p not in banned] or [p for p in PAIRS if p != target_pair and p not in banned]
    p = pool[rng.integers(len(pool))]
    scale = spec.green_square_distractor_scale
    if p == GREEN_SQUARE and scale < 1.0 and rng.random() >= scale:
        rest = [q for q in pool if q != GREEN_SQUARE]
        if rest:
            p = rest[rng.integers(len(rest))]
    return p


def _size(rng):
    return int(SIZES[rng.integers(len(SIZES))])


def _cells(rng, n):
    return [int(c) for c in rng.choice(N_CELLS, size=n, replace=False)]


def _n_objects(spec, rng, at_least=1):
    lo = max(spec.min_objects, at_least)
    if lo > spec.max_objects:
        raise GenerationError(f"need {at_least} objects but max_objects={spec.max_objects}")
    return int(rng.integers(lo, spec.max_objects + 1))


def _two_attr(spec, rng, force):
    n = _n_objects(spec, rng)
    tpair = force.get("target_pair") or _pair(rng)
    objs = [WorldObject(*tpair)]
    for _ in range(n - 1):
        objs.append(WorldObject(*_distractor_pair(rng, spec, tpair, force.get("banned", ()))))
    cells = _cells(rng, n)
    return GridWorld("two-attr", dict(zip(cells, objs))), TwoAttr(*tpair)


def _three_attr(spec, rng, force):
    n = _n_objects(spec, rng, at_least=2)
    color, shape = force.get("target_pair") or _pair(rng)
    size_word = force.get("size_word") or SIZE_WORDS[rng.integers(2)]
    k = int(rng.integers(2, min(4, n) + 1))
    sizes = sorted(int(s) for s in rng.choice(SIZES, size=k, replace=False))
    if "target_size" in force:
        # target must be the extremum the size word selects
        t = force["target_size"]
        pool = [s for s in SIZES if (s > t if size_word == "small" else s < t)]
        if len(pool) < k - 1:
            k = len(pool) + 1
        sizes = sorted([t] + [int(s) for s in rng.choice(pool, size=k - 1, replace=False)])
    objs = [WorldObject(color, shape, s) for s in sizes]
    for _ in range(n - k):
        pair = _distractor_pair(rng, spec, (color, shape), force.get("banned", ()))
        objs.append(WorldObject(*pair, _size(rng)))
    cells = _cells(rng, len(objs))
    return (GridWorld("three-attr", dict(zip(cells, objs))),
            ThreeAttr(size_word, color, shape))


def _descriptions(obj: WorldObject):
    out = []
    for color in (None, obj.color):
        for size_word in (None,) + SIZE_WORDS:
            out.append(ObjDesc(obj.shape, color, size_word))
    return out


def _selects(items, desc, cell):
    """Does ``desc`` pick exactly ``cell`` among ``items``?"""
    cands = [(c, o) for c, o in items
             if o.shape == desc.shape and (desc.color is None or o.color == desc.color)]
    if not cands:
        return False
    if desc.size_word is None:
        return len(cands) == 1 and cands[0][0] == cell
    pick = min if desc.size_word == "small" else max
    best = pick(o.size for _, o in cands)
    winners = [c for c, o in cands if o.size == best]
    return winners == [cell]


def _three_attr_rel(spec, rng, force):
    n = _n_objects(spec, rng, at_least=3)
    rel = RELATIONS[rng.integers(len(RELATIONS))]
    ref_attrs = dict(zip(("color", "shape"), _pair(rng)), size=_size(rng))
    tpair = force.get("target_pair") or _pair(rng)
    tgt = WorldObject(*tpair, _size(rng))
    if force.get("target_pair"):
        ref_attrs[rel] = tgt.attr(rel)
        ref = WorldObject(**ref_attrs)
    else:
        ref = WorldObject(**ref_attrs)
        tgt_attrs = {"color": tgt.color, "shape": tgt.shape, "size": tgt.size}
        tgt_attrs[rel] = ref.attr(rel)
        tgt = WorldObject(**tgt_attrs)
    # a rival that shares the target's colour and shape, so the relation or size word must decide
    rival_attrs = {"color": tgt.color, "shape": tgt.shape, "size": _size(rng)}
    rival = WorldObject(**rival_attrs)
    objs = [ref, tgt, rival]
    for _ in range(n - 3):
        objs.append(WorldObject(*_distractor_pair(rng, spec, (tgt.color, tgt.shape),
                                                   force.get("banned", ())), _size(rng)))
    cells = _cells(rng, n)
    world = GridWorld("three-attr-rel", dict(zip(cells, objs)))
    items = list(world.cells.items())
    ref_cell, tgt_cell = cells[0], cells[1]

    ref_opts = [d for d in _descriptions(ref) if _selects(items, d, ref_cell)]
    if not ref_opts:
        return None
    cands = [(c, o) for c, o in items
             if c != ref_cell and o.attr(rel) == ref.attr(rel)]
    tgt_opts = []
    for d in _descriptions(tgt):
        loose = [c for c, o in items if c != ref_cell and o.shape == d.shape
                 and (d.color is None or o.color == d.color)]
        if len(loose) >= 2 and _selects(cands, d, tgt_cell):
            tgt_opts.append(d)
    if not tgt_opts:
        return None
    cmd = ThreeAttrRel(tgt_opts[rng.integers(len(tgt_opts))], rel,
                       ref_opts[rng.integers(len(ref_opts))])
    return world, cmd


_SAMPLERS = {"two-attr": _two_attr, "three-attr": _three_attr,
             "three-attr-rel": _three_attr_rel}


def generate_example(spec: GenSpec, rng: np.random.Generator, *, exclude=frozenset(),
                     require=None, force=None) -> Example:
    """Draw one example, resampling until it resolves uniquely.

    ``exclude``: tags the example must not carry. ``require``: a tag it must carry.
    ``force``: sampler hints (``target_pair``, ``size_word``, ``target_size``).
    """
    force = force or {}
    sampler = _SAMPLERS[spec.variant]
    failure = "unique target"
    for _ in range(MAX_ATTEMPTS):
        drawn = sampler(spec, rng, force)
        if drawn is None:
            failure = "unique referent and target description"
            continue
        world, cmd = drawn
        target = resolve_target(world, cmd)
        if isinstance(target, Resolution):
            failure = f"unique target ({target.value})"
            continue
        ex = make_example(world, cmd)
        if ex.tags & exclude:
            failure = f"holdout exclusion of {sorted(ex.tags & exclude)}"
            continue
        if require is not None and require not in ex.tags:
            failure = f"required tag {require}"
            continue
        return ex
    raise GenerationError(
        f"{spec.variant}: gave up after {MAX_ATTEMPTS} attempts; failing constraint: {failure}")


# targeted proposals for the split test sets
SPLIT_FORCE = {
    "A1": {"target_pair": ("green", "square")},
    "A2": {"target_pair": ("red", "circle")},
    "A3": {"target_pair": ("green", "circle"), "size_word": "small", "target_size": 2},
    "A4": {"target_pair": ("blue", "cylinder"), "size_word": "small"},
}


def _test_spec(spec):
    from dataclasses import replace
    return replace(spec, green_square_distractor_scale=1.0)


def generate_split(spec: GenSpec, split: str, count: int, stream: str | None = None) -> list:
    stream = stream or split
    test = _test_spec(spec)
    # A2 bars red circles from the whole world, so drop them per object rather than per example
    ban = {"banned": (("red", "circle"),)} if "A2" in spec.holdout else {}
    if split == "train":
        return [generate_example(spec, example_rng(spec.seed, "train", i), exclude=spec.holdout,
                                 force=ban) for i in range(count)]
    if split == "val":
        # compositional validation: an in-distribution part plus a few targeted
        # examples from every held-out split, each on its own stream
        splits = SPLITS_FOR_VARIANT[spec.variant]
        per_split = count // (len(splits) + 1)
        out = [generate_example(spec, example_rng(spec.seed, "val", i), exclude=spec.holdout,
                                force=ban) for i in range(count - per_split * len(splits))]
        for sp in splits:
            out += generate_split(spec, sp, per_split, stream=f"val_{sp}")
        return out
    if split == "random":
        return [generate_example(test, example_rng(spec.seed, "random", i), exclude=spec.holdout,
                                 force=ban) for i in range(count)]
    if split not in SPLITS_FOR_VARIANT[spec.variant]:
        raise ValueError(f"split {split} does not apply to {spec.variant}")
    # each split set isolates one held-out composition: the others stay excluded
    others = spec.holdout - {split}
    force = dict(SPLIT_FORCE[split])
    if split != "A2" and "A2" in spec.holdout:
        force.update(ban)
    return [generate_example(test, example_rng(spec.seed, stream, i), require=split,
                             exclude=others, force=force) for i in range(count)]


def generate_bundle(spec: GenSpec) -> DatasetBundle:
    return DatasetBundle(
        spec=spec,
        train=generate_split(spec, "train", spec.train_count),
        val=generate_split(spec, "val", spec.val_count),
        random_test=generate_split(spec, "random", spec.test_count),
        split_tests={s: generate_split(spec, s, spec.test_count)
                     for s in SPLITS_FOR_VARIANT[spec.variant]},
    )


# --- JSONL ----------------------------------------------------------------

def example_to_dict(ex: Example) -> dict:
    objects = []
    for cell, o in ex.world.cells.items():
        d = {"cell": cell, "color": o.color, "shape": o.shape}
        if o.size is not None:
            d["size"] = o.size
        objects.append(d)
    tags = sorted(ex.tags, key=lambda t: ("random", "A1", "A2", "A3", "A4").index(t))
    return {"variant": ex.variant, "command": surface_tokens(ex.command),
            "objects": objects, "target": ex.target, "tags": tags}


def example_from_dict(d: dict) -> Example:
    variant = d["variant"]
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cells = {}
    for o in d["objects"]:
        if o["cell"] in cells:
            raise ValueError(f"two objects in cell {o['cell']}")
        cells[int(o["cell"])] = WorldObject(o["color"], o["shape"], o.get("size"))
    world = GridWorld(variant, cells)
    cmd = parse_command(variant, d["command"])
    target = int(d["target"])
    if target not in world.cells:
        raise ValueError(f"target cell {target} is empty")
    return Example(world, cmd, target, frozenset(d["tags"]))


def dumps(ex: Example) -> str:
    return json.dumps(example_to_dict(ex), separators=(",", ":"))


def write_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(dumps(ex) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(example_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    return out


# --- statistics -------------------------------------------------------------

def _key(o: WorldObject) -> str:
    parts = ([str(o.size)] if o.size is not None else []) + [o.color, o.shape]
    return "_".join(parts)


def dataset_stats(examples) -> dict:
    if not examples:
        raise ValueError("dataset_stats needs at least one example")
    as_target, as_distractor = Counter(), Counter()
    tag_counts = Counter()
    n_objects = 0
    gs_distractors = 0
    for ex in examples:
        n_objects += len(ex.world.cells)
        tag_counts.update(ex.tags)
        for cell, o in ex.world.cells.items():
            if cell == ex.target:
                as_target[_key(o)] += 1
            else:
                as_distractor[_key(o)] += 1
                gs_distractors += (o.color, o.shape) == GREEN_SQUARE
    n = len(examples)
    pair_target, pair_distractor = Counter(), Counter()
    for table, src in ((pair_target, as_target), (pair_distractor, as_distractor)):
        for k, v in src.items():
            table["_".join(k.split("_")[-2:])] += v
    return {
        "examples": n,
        "mean_objects": n_objects / n,
        "mean_green_square_distractors": gs_distractors / n,
        "tag_counts": dict(sorted(tag_counts.items())),
        "as_target": dict(sorted(as_target.items())),
        "as_distractor": dict(sorted(as_distractor.items())),
        "pair_as_target": dict(sorted(pair_target.items())),
        "pair_as_distractor": dict(sorted(pair_distractor.items())),
    }
