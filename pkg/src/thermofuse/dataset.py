"""Dataset index and train/val/test assignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_COUNTS = (26, 6, 6)
INDEX_NAME = "index.json"


@dataclass(frozen=True)
class Entry:
    sequence: str
    ground_truth: str  # stem; see fileio.ground_truth_paths
    split: str | None = None


@dataclass
class DatasetIndex:
    entries: list[Entry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        return json.dumps({"entries": [e.__dict__ for e in self.entries]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        return cls([Entry(**e) for e in json.loads(text)["entries"]])

    def save(self, directory) -> Path:
        path = Path(directory) / INDEX_NAME
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, directory) -> "DatasetIndex":
        return cls.from_json((Path(directory) / INDEX_NAME).read_text())

    def resolve(self, directory, entry: Entry) -> tuple[Path, Path]:
        base = Path(directory)
        return base / entry.sequence, base / entry.ground_truth


def default_counts(n: int) -> tuple[int, int, int]:
    """26/6/6 for the 38-sequence setting, the same proportions otherwise."""
    if n == sum(DEFAULT_SPLIT_COUNTS):
        return DEFAULT_SPLIT_COUNTS
    val = test = round(n * DEFAULT_SPLIT_COUNTS[1] / sum(DEFAULT_SPLIT_COUNTS))
    return n - val - test, val, test


def split_dataset(index: DatasetIndex, counts: tuple[int, int, int] | None = None, seed: int = 0) -> DatasetIndex:
    n = len(index)
    counts = default_counts(n) if counts is None else tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0 or sum(counts) != n:
        raise ValueError(f"split counts {counts} do not partition {n} entries")
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    bounds = np.cumsum((0,) + counts)
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        labels[order[lo:hi]] = name
    return DatasetIndex([replace(e, split=str(s)) for e, s in zip(index.entries, labels)])
