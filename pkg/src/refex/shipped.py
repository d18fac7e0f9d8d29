"""Trained checkpoints bundled with the package and the data that scores them.

Each entry records how its checkpoint was produced (``refex reproduce``
presets), so its test sets can be regenerated bit-for-bit from the seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from . import tensor as T
from .datagen import GenSpec, generate_split
from .domain import SPLITS_FOR_VARIANT
from .model import ModelConfig


@dataclass(frozen=True)
class Shipped:
    name: str
    variant: str
    layers: int
    gen_seed: int
    scale: float  # green-square distractor scale of the training data
    preset: str

    @property
    def filename(self) -> str:
        return f"{self.name}.ckpt"


SHIPPED = {s.name: s for s in (
    Shipped("two-attr_L1", "two-attr", 1, 101, 0.25, "table6"),
    Shipped("three-attr_L1", "three-attr", 1, 102, 0.25, "table6"),
    Shipped("three-attr-rel_L1", "three-attr-rel", 1, 103, 0.25, "table6"),
    Shipped("three-attr-rel_L2", "three-attr-rel", 2, 103, 0.25, "table6"),
    Shipped("two-attr_L1_scale1", "two-attr", 1, 101, 1.0, "a1-distractor"),
)}


def checkpoint_path(name: str):
    return resources.files("refex") / "checkpoints" / SHIPPED[name].filename


def available() -> list:
    return [n for n in SHIPPED if checkpoint_path(n).is_file()]


def load(name: str) -> tuple[dict, ModelConfig]:
    with resources.as_file(checkpoint_path(name)) as path:
        header, tensors = T.load_checkpoint(path)
    return tensors, ModelConfig.from_meta(header)


def split_sets(name: str, count: int = 2500) -> dict:
    """Split label -> examples, identical to the preset's test_*.jsonl files."""
    s = SHIPPED[name]
    spec = GenSpec(s.variant, seed=s.gen_seed, green_square_distractor_scale=s.scale,
                   test_count=count)
    out = {"R": generate_split(spec, "random", count)}
    for split in SPLITS_FOR_VARIANT[s.variant]:
        out[split] = generate_split(spec, split, count)
    return out
