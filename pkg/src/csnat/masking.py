"""Vocabulary/language tags and training-time mask planning.

Strategies:

``R``  random: mask count uniform in [1, N], positions uniform without replacement
``F``  first member of every code-switching pair
``S``  second member of every code-switching pair
``M``  Mandarin member of every code-switching pair
``E``  English member of every code-switching pair

A code-switching strategy that finds nothing to mask (monolingual
utterance) falls back to ``R``.  ``C`` (complementary) is not a planning
strategy; it is an ``R`` plan trained together with its complement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

BLANK = 0
EN, CN, SPECIAL = "EN", "CN", "SPECIAL"
PAIR1, PAIR2 = "Pair1", "Pair2"  # (CN, EN) and (EN, CN)
STRATEGIES = ("R", "F", "S", "M", "E")


class MaskingError(ValueError):
    pass


class Vocabulary:
    """Token ids: 0 = blank, 1..V = real tokens, V+1 = MASK, V+2 = EOS."""

    def __init__(self, surfaces: Sequence[str], langs: Sequence[str]):
        if len(surfaces) != len(langs):
            raise MaskingError("surfaces and languages differ in length")
        bad = [lg for lg in langs if lg not in (EN, CN)]
        if bad:
            raise MaskingError(f"unknown language tag {bad[0]!r}")
        if len(set(surfaces)) != len(surfaces):
            raise MaskingError("duplicate token surface")
        self.surfaces = list(surfaces)
        self.size = len(surfaces)
        self.mask_id = self.size + 1
        self.eos_id = self.size + 2
        self.langmap = LanguageMap([SPECIAL] + list(langs) + [SPECIAL, SPECIAL])
        self._ids = {s: i + 1 for i, s in enumerate(self.surfaces)}

    def __len__(self) -> int:
        return self.size

    def surface(self, tok: int) -> str:
        if tok == BLANK:
            return "<blank>"
        if tok == self.mask_id:
            return "<mask>"
        if tok == self.eos_id:
            return "<eos>"
        return self.surfaces[tok - 1]

    def encode(self, surfaces: Sequence[str]) -> list[int]:
        try:
            return [self._ids[s] for s in surfaces]
        except KeyError as exc:
            raise MaskingError(f"unknown token surface {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.surface(int(t)) for t in ids]

    def write(self, path) -> None:
        """One ``surface<TAB>lang`` line per token; line k holds id k."""
        lines = [f"{s}\t{lg}\n" for s, lg in zip(self.surfaces, self.langmap.tags[1:self.size + 1])]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        surfaces, langs = [], []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MaskingError(f"{path}:{n}: expected 'surface<TAB>lang'")
            surfaces.append(parts[0])
            langs.append(parts[1].strip())
        return cls(surfaces, langs)


@dataclass(frozen=True)
class LanguageMap:
    tags: Sequence[str]

    def lang(self, tok: int) -> str:
        if not 0 <= tok < len(self.tags):
            raise MaskingError(f"token {tok} missing from language map")
        return self.tags[tok]


@dataclass(frozen=True)
class CsPair:
    first: int
    second: int
    kind: str


@dataclass(frozen=True)
class MaskPlan:
    length: int
    positions: tuple[int, ...]

    def __post_init__(self):
        pos = tuple(sorted(set(int(p) for p in self.positions)))
        if pos and (pos[0] < 0 or pos[-1] >= self.length):
            raise MaskingError(f"mask position out of range for length {self.length}")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.int64)


def detect_cs_pairs(labels: Sequence[int], langmap: LanguageMap) -> list[CsPair]:
    tags = [langmap.lang(int(t)) for t in labels]
    pairs = []
    for i in range(len(tags) - 1):
        a, b = tags[i], tags[i + 1]
        if a != b and SPECIAL not in (a, b):
            pairs.append(CsPair(i, i + 1, PAIR1 if a == CN else PAIR2))
    return pairs


def random_plan(n: int, rng: np.random.Generator) -> MaskPlan:
    if n < 1:
        raise MaskingError("cannot plan a mask over an empty sequence")
    k = int(rng.integers(1, n + 1))
    return MaskPlan(n, tuple(rng.choice(n, size=k, replace=False).tolist()))


def plan_mask(strategy: str, labels: Sequence[int], langmap: LanguageMap,
              rng: np.random.Generator) -> MaskPlan:
    n = len(labels)
    if n < 1:
        raise MaskingError("cannot plan a mask over an empty sequence")
    if strategy == "R":
        return random_plan(n, rng)
    if strategy not in STRATEGIES:
        raise MaskingError(f"unknown mask strategy {strategy!r}")
    chosen: set[int] = set()
    for p in detect_cs_pairs(labels, langmap):
        if strategy == "F":
            chosen.add(p.first)
        elif strategy == "S":
            chosen.add(p.second)
        else:
            want = CN if strategy == "M" else EN
            chosen.add(p.first if langmap.lang(int(labels[p.first])) == want else p.second)
    if not chosen:
        log.debug("mask strategy %s found no code-switch positions; using R", strategy)
        return random_plan(n, rng)
    return MaskPlan(n, tuple(chosen))


def complement(plan: MaskPlan) -> MaskPlan:
    taken = set(plan.positions)
    return MaskPlan(plan.length, tuple(i for i in range(plan.length) if i not in taken))


def apply_mask(labels: Sequence[int], plan: MaskPlan, mask_id: int) -> list[int]:
    if len(labels) != plan.length:
        raise MaskingError(f"plan covers {plan.length} positions, sequence has {len(labels)}")
    out = [int(t) for t in labels]
    for p in plan.positions:
        out[p] = mask_id
    return out


def overlay(masked: Sequence[int], plan: MaskPlan, fill: Sequence[int]) -> list[int]:
    """Write ``fill`` back over the plan positions of ``masked``."""
    out = list(masked)
    for p in plan.positions:
        out[p] = int(fill[p])
    return out
