"""Directory-per-class corpus catalog, stratified splits and k-fold plans.

Shuffling uses numpy's PCG64 bit generator (a documented, platform-stable
algorithm); ``Generator.permutation`` is a Fisher-Yates shuffle. Per-class
streams are derived with ``SeedSequence`` so each class's membership depends
only on (seed, class position, class size).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .imageprep import IMAGE_SUFFIXES

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.80, 0.05, 0.15)


@dataclass(frozen=True)
class ClassIndexMap:
    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValueError("class map needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    @property
    def index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.index[name]


def encode_labels(names: Sequence[str]) -> ClassIndexMap:
    if not names:
        raise ValueError("cannot encode an empty list of class names")
    return ClassIndexMap(tuple(sorted(set(names))))


@dataclass(frozen=True)
class Sample:
    path: str
    label: str
    index: int


@dataclass(frozen=True)
class DatasetIndex:
    classes: ClassIndexMap
    samples: tuple[Sample, ...]
    root: str = ""

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {n: 0 for n in self.classes.names}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def by_class(self) -> list[list[int]]:
        """Sample positions grouped by class index."""
        groups: list[list[int]] = [[] for _ in self.classes.names]
        for i, s in enumerate(self.samples):
            groups[s.index].append(i)
        return groups

    def __len__(self):
        return len(self.samples)


def make_index(entries: Sequence[tuple[str, str]], classes: ClassIndexMap | None = None,
               root: str = "") -> DatasetIndex:
    """Build an index from (path, class name) pairs."""
    classes = classes or encode_labels([c for _, c in entries])
    lookup = classes.index
    samples = []
    for path, name in entries:
        if name not in lookup:
            raise DataError(f"class {name!r} is not in the class map")
        samples.append(Sample(path, name, lookup[name]))
    return DatasetIndex(classes, tuple(samples), root)


def scan_dataset(root, classes: ClassIndexMap | None = None) -> DatasetIndex:
    """Catalog ``root/<class>/<image>`` files. Sample paths are relative to root."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist or is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no classes found under {root}")
    found = [d.name for d in class_dirs]
    if classes is None:
        classes = encode_labels(found)
    else:
        missing = [c for c in classes.names if c not in found]
        if missing:
            raise DataError(f"classes in the class map are absent on disk: {missing}")
    entries = []
    for d in class_dirs:
        if d.name not in classes.index:
            continue
        for f in sorted(d.iterdir()):
            if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if not os.access(f, os.R_OK):
                raise DataError(f"unreadable image file {f}")
            entries.append((f"{d.name}/{f.name}", d.name))
    if not entries:
        raise DataError(f"no image files found under {root}")
    return make_index(entries, classes, str(root))


def _as_fraction(f: float) -> Fraction:
    return Fraction(f).limit_denominator(10**9)


def apportion_counts(class_counts: Sequence[int], fractions: Sequence[float]) -> list[list[int]]:
    """Split per-class counts into buckets, returning ``out[bucket][class]``.

    Every bucket but the last gets floor(total * fraction) samples, shared out
    across classes by largest remainder (ties go to the smaller class, then the
    earlier one). The last bucket takes whatever each class has left.
    """
    if any(c < 0 for c in class_counts):
        raise ValueError("class counts must be non-negative")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if not fractions or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {list(fractions)}")
    counts = [int(c) for c in class_counts]
    total = sum(counts)
    left = list(counts)
    out: list[list[int]] = []
    for f in fractions[:-1]:
        frac = _as_fraction(f)
        target = math.floor(total * frac)
        ideal = [c * frac for c in counts]
        alloc = [min(math.floor(q), r) for q, r in zip(ideal, left)]
        order = sorted(range(len(counts)),
                       key=lambda i: (-(ideal[i] - math.floor(ideal[i])), counts[i], i))
        short = target - sum(alloc)
        for i in order:
            if short <= 0:
                break
            if alloc[i] < left[i]:
                alloc[i] += 1
                short -= 1
        out.append(alloc)
        left = [r - a for r, a in zip(left, alloc)]
    out.append(left)
    return out


@dataclass(frozen=True)
class SplitAssignment:
    index: DatasetIndex
    assignment: tuple[str, ...]
    fractions: tuple[float, ...]
    seed: int

    def members(self, split: str) -> list[int]:
        if split not in SPLIT_NAMES:
            raise DataError(f"unknown split {split!r}; valid names: {', '.join(SPLIT_NAMES)}")
        return [i for i, a in enumerate(self.assignment) if a == split]

    def counts(self) -> dict[str, dict[str, int]]:
        """counts[class][split]"""
        table = {n: {s: 0 for s in SPLIT_NAMES} for n in self.index.classes.names}
        for s, a in zip(self.index.samples, self.assignment):
            table[s.label][a] += 1
        return table

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "classes": list(self.index.classes.names),
            "root": self.index.root,
            "entries": [{"path": s.path, "class": s.label, "split": a}
                        for s, a in zip(self.index.samples, self.assignment)],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "SplitAssignment":
        try:
            classes = ClassIndexMap(tuple(d["classes"]))
            index = make_index([(e["path"], e["class"]) for e in d["entries"]], classes, d.get("root", ""))
            assignment = tuple(e["split"] for e in d["entries"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed split manifest: {exc}") from exc
        bad = set(assignment) - set(SPLIT_NAMES)
        if bad:
            raise DataError(f"manifest has unknown split names {sorted(bad)}")
        return cls(index, assignment, tuple(d["fractions"]), int(d["seed"]))


def _class_rng(seed: int, position: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), position])))


def stratified_split(index: DatasetIndex, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     seed: int = 0) -> SplitAssignment:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("need (train, val, test) fractions")
    groups = index.by_class()
    needed = sum(1 for f in fractions if f > 0)
    for name, members in zip(index.classes.names, groups):
        if len(members) < needed:
            raise DataError(f"class {name!r} has {len(members)} samples, fewer than the {needed} non-empty splits")
    table = apportion_counts([len(g) for g in groups], fractions)
    assignment = [""] * len(index)
    for c, members in enumerate(groups):
        order = _class_rng(seed, c).permutation(len(members))
        start = 0
        for b, split in enumerate(SPLIT_NAMES):
            n = table[b][c]
            for j in order[start:start + n]:
                assignment[members[j]] = split
            start += n
    return SplitAssignment(index, tuple(assignment), fractions, seed)


@dataclass(frozen=True)
class FoldPlan:
    index: DatasetIndex
    folds: tuple[int, ...]
    k: int
    seed: int

    def members(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f == fold]

    def sizes(self) -> dict[str, list[int]]:
        """Per-class fold sizes."""
        table = {n: [0] * self.k for n in self.index.classes.names}
        for s, f in zip(self.index.samples, self.folds):
            table[s.label][f] += 1
        return table

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "classes": list(self.index.classes.names),
            "root": self.index.root,
            "entries": [{"path": s.path, "class": s.label, "fold": f}
                        for s, f in zip(self.index.samples, self.folds)],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "FoldPlan":
        classes = ClassIndexMap(tuple(d["classes"]))
        index = make_index([(e["path"], e["class"]) for e in d["entries"]], classes, d.get("root", ""))
        return cls(index, tuple(int(e["fold"]) for e in d["entries"]), int(d["k"]), int(d["seed"]))


def stratified_kfold(index: DatasetIndex, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class, then deal its samples round-robin over the folds.

    The dealing offset carries over between classes so overall fold sizes
    stay balanced too.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    groups = index.by_class()
    for name, members in zip(index.classes.names, groups):
        if len(members) < k:
            raise DataError(f"class {name!r} has {len(members)} samples, fewer than k={k}")
    folds = [0] * len(index)
    offset = 0
    for c, members in enumerate(groups):
        order = _class_rng(seed, c).permutation(len(members))
        for pos, j in enumerate(order):
            folds[members[j]] = (offset + pos) % k
        offset = (offset + len(members)) % k
    return FoldPlan(index, tuple(folds), k, seed)


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def format_split_table(split: SplitAssignment) -> str:
    """Per-class train/val/test/total table, largest class first."""
    counts = split.counts()
    rows = sorted(counts.items(), key=lambda kv: (-sum(kv[1].values()), kv[0]))
    width = max(len("Class Name"), *(len(n) for n in counts))
    lines = [f"{'Class Name':<{width}}  {'Training':>8}  {'Validation':>10}  {'Testing':>7}  {'Total':>5}"]
    for name, c in rows:
        lines.append(f"{name:<{width}}  {c['train']:>8}  {c['val']:>10}  {c['test']:>7}  {sum(c.values()):>5}")
    return "\n".join(lines)
