"""Vocabulary, world/command types, the target resolver and split tagging.

Cells are indexed row-major on a 6x6 grid: ``row = idx // 6``, ``col = idx % 6``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Union

GRID_SIDE = 6
N_CELLS = GRID_SIDE * GRID_SIDE

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "cylinder")
SIZE_WORDS = ("small", "big")
SIZES = (1, 2, 3, 4)
RELATIONS = ("size", "color", "shape")  # surface form: "same" + kind
SAME = "same"
PAD = "PAD"

VARIANTS = ("two-attr", "three-attr", "three-attr-rel")
SPLIT_TAGS = ("random", "A1", "A2", "A3", "A4")
SPLITS_FOR_VARIANT = {
    "two-attr": ("A1", "A2"),
    "three-attr": ("A1", "A2", "A3", "A4"),
    "three-attr-rel": ("A1", "A2"),
}


class Resolution(enum.Enum):
    """Non-cell outcomes of :func:`resolve_target`."""

    NO_MATCH = "no-match"
    AMBIGUOUS = "ambiguous"


NO_MATCH = Resolution.NO_MATCH
AMBIGUOUS = Resolution.AMBIGUOUS


def cell_rowcol(idx: int) -> tuple[int, int]:
    if not 0 <= idx < N_CELLS:
        raise ValueError(f"cell index {idx} outside 0..{N_CELLS - 1}")
    return divmod(idx, GRID_SIDE)


@dataclass(frozen=True)
class WorldObject:
    color: str
    shape: str
    size: int | None = None

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.size is not None and self.size not in SIZES:
            raise ValueError(f"size {self.size} outside 1..4")

    def attr(self, kind: str):
        return getattr(self, kind)


@dataclass(frozen=True)
class GridWorld:
    variant: str
    cells: Mapping[int, WorldObject]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 1 <= len(self.cells) <= N_CELLS:
            raise ValueError("a world holds between 1 and 36 objects")
        sized = self.variant != "two-attr"
        for idx, obj in self.cells.items():
            cell_rowcol(idx)
            if (obj.size is not None) != sized:
                raise ValueError(
                    f"cell {idx}: size must be {'present' if sized else 'absent'} "
                    f"in a {self.variant} world"
                )
        # canonical order keeps equality and serialization independent of insertion order
        object.__setattr__(self, "cells", dict(sorted(self.cells.items())))


@dataclass(frozen=True)
class ObjDesc:
    """``$SIZ? $COL? $SHP`` with the shape word mandatory."""

    shape: str
    color: str | None = None
    size_word: str | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color is not None and self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size_word is not None and self.size_word not in SIZE_WORDS:
            raise ValueError(f"unknown size word {self.size_word!r}")

    def slots(self) -> list[str]:
        return [self.size_word or PAD, self.color or PAD, self.shape]

    def words(self) -> list[str]:
        return [w for w in (self.size_word, self.color, self.shape) if w is not None]


@dataclass(frozen=True)
class TwoAttr:
    color: str
    shape: str
    variant = "two-attr"

    def __post_init__(self):
        ObjDesc(self.shape, self.color)


@dataclass(frozen=True)
class ThreeAttr:
    size_word: str
    color: str
    shape: str
    variant = "three-attr"

    def __post_init__(self):
        ObjDesc(self.shape, self.color, self.size_word)


@dataclass(frozen=True)
class ThreeAttrRel:
    target_desc: ObjDesc
    relation: str
    referent_desc: ObjDesc
    variant = "three-attr-rel"

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation kind {self.relation!r}")


Command = Union[TwoAttr, ThreeAttr, ThreeAttrRel]
COMMAND_LENGTH = {"two-attr": 2, "three-attr": 3, "three-attr-rel": 8}


@dataclass(frozen=True)
class Example:
    world: GridWorld
    command: Command
    target: int
    tags: frozenset = field(default_factory=lambda: frozenset({"random"}))

    @property
    def variant(self) -> str:
        return self.world.variant

    @property
    def target_object(self) -> WorldObject:
        return self.world.cells[self.target]


def command_tokens(command: Command) -> list[str]:
    """Model-facing token list: 2, 3 or 8 tokens (PAD fills omitted slots)."""
    if isinstance(command, TwoAttr):
        return [command.color, command.shape]
    if isinstance(command, ThreeAttr):
        return [command.size_word, command.color, command.shape]
    return (command.target_desc.slots() + [SAME, command.relation]
            + command.referent_desc.slots())


def surface_tokens(command: Command) -> list[str]:
    """Unpadded surface form, as stored in JSONL."""
    if isinstance(command, ThreeAttrRel):
        return (command.target_desc.words() + [SAME, command.relation]
                + command.referent_desc.words())
    return command_tokens(command)


def _parse_desc(words: list[str]) -> ObjDesc:
    words = list(words)
    size_word = words.pop(0) if words and words[0] in SIZE_WORDS else None
    color = words.pop(0) if words and words[0] in COLORS else None
    if len(words) != 1:
        raise ValueError(f"malformed object description {words!r}")
    return ObjDesc(words[0], color, size_word)


def parse_command(variant: str, tokens: list[str]) -> Command:
    """Inverse of :func:`surface_tokens` (PAD tokens are ignored)."""
    tokens = [t for t in tokens if t != PAD]
    if variant == "two-attr":
        if len(tokens) != 2:
            raise ValueError(f"two-attr command needs 2 tokens, got {tokens!r}")
        return TwoAttr(*tokens)
    if variant == "three-attr":
        if len(tokens) != 3:
            raise ValueError(f"three-attr command needs 3 tokens, got {tokens!r}")
        return ThreeAttr(*tokens)
    if variant == "three-attr-rel":
        if tokens.count(SAME) != 1:
            raise ValueError(f"relational command needs one 'same', got {tokens!r}")
        k = tokens.index(SAME)
        if k + 1 >= len(tokens):
            raise ValueError("relation kind missing after 'same'")
        return ThreeAttrRel(_parse_desc(tokens[:k]), tokens[k + 1],
                            _parse_desc(tokens[k + 2:]))
    raise ValueError(f"unknown variant {variant!r}")


def _select(cands: list[tuple[int, WorldObject]], size_word: str | None):
    """Unique element of ``cands`` (or its unique size extremum)."""
    if not cands:
        return NO_MATCH
    if size_word is None:
        return cands[0][0] if len(cands) == 1 else AMBIGUOUS
    pick = min if size_word == "small" else max
    best = pick(o.size for _, o in cands)
    winners = [c for c, o in cands if o.size == best]
    return winners[0] if len(winners) == 1 else AMBIGUOUS


def _matching(items, color, shape):
    return [(c, o) for c, o in items
            if o.shape == shape and (color is None or o.color == color)]


def resolve_target(world: GridWorld, command: Command) -> int | Resolution:
    """Ground-truth cell of the object ``command`` refers to in ``world``.

    Returns :data:`NO_MATCH` when a candidate set is empty and
    :data:`AMBIGUOUS` when a uniqueness requirement fails.
    """
    if world.variant != command.variant:
        raise ValueError(f"{command.variant} command on a {world.variant} world")
    items = list(world.cells.items())
    if isinstance(command, TwoAttr):
        return _select(_matching(items, command.color, command.shape), None)
    if isinstance(command, ThreeAttr):
        return _select(_matching(items, command.color, command.shape),
                       command.size_word)

    ref = command.referent_desc
    referent = _select(_matching(items, ref.color, ref.shape), ref.size_word)
    if isinstance(referent, Resolution):
        return referent
    ref_obj = world.cells[referent]
    tgt = command.target_desc
    cands = [(c, o) for c, o in _matching(items, tgt.color, tgt.shape)
             if c != referent and o.attr(command.relation) == ref_obj.attr(command.relation)]
    return _select(cands, tgt.size_word)


def tag_splits(example: Example) -> frozenset:
    """Split tags implied by the example's contents; "random" is always present."""
    tags = {"random"}
    world, cmd = example.world, example.command
    tgt = world.cells[example.target]
    if (tgt.color, tgt.shape) == ("green", "square"):
        tags.add("A1")
    if any((o.color, o.shape) == ("red", "circle") for o in world.cells.values()):
        tags.add("A2")
    if isinstance(cmd, ThreeAttr):
        if (cmd.size_word, cmd.color, cmd.shape) == ("small", "green", "circle") and tgt.size == 2:
            tags.add("A3")
        if (cmd.size_word, cmd.color, cmd.shape) == ("small", "blue", "cylinder"):
            tags.add("A4")
    return frozenset(tags)


def make_example(world: GridWorld, command: Command) -> Example:
    """Resolve and tag; raises if the command does not pick a unique object."""
    target = resolve_target(world, command)
    if isinstance(target, Resolution):
        raise ValueError(f"command does not resolve: {target.value}")
    ex = Example(world, command, target)
    return Example(world, command, target, tag_splits(ex))
