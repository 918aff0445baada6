"""Edit-distance alignment and error rates.

MER pools edit operations over the whole corpus.  English words and
Mandarin characters are both single tokens here, so token-level Levenshtein
distance gives the mixed word/character rate directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masking import LanguageMap, MaskPlan, detect_cs_pairs

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class EditOp:
    kind: str
    ref: int | None  # ref position, None for insertions
    hyp: int | None  # hyp position, None for deletions


@dataclass
class Alignment:
    ops: list[EditOp]

    def counts(self) -> dict[str, int]:
        c = {MATCH: 0, SUB: 0, DEL: 0, INS: 0}
        for op in self.ops:
            c[op.kind] += 1
        return c

    @property
    def cost(self) -> int:
        c = self.counts()
        return c[SUB] + c[DEL] + c[INS]

    def replay(self, ref: Sequence, hyp: Sequence) -> list:
        """Rebuild the hypothesis by applying the operations to ``ref``."""
        out = []
        for op in self.ops:
            if op.kind == MATCH:
                out.append(ref[op.ref])
            elif op.kind in (SUB, INS):
                out.append(hyp[op.hyp])
        return out


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, Alignment]:
    """Unit-cost Levenshtein distance plus one minimal alignment.

    The backtrace prefers match, then substitution, deletion, insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (0 if ri == hyp[j - 1] else 1)
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)

    ops: list[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i - 1, j - 1] == here:
            ops.append(EditOp(MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and ref[i - 1] != hyp[j - 1] and d[i - 1, j - 1] + 1 == here:
            ops.append(EditOp(SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i - 1, j] + 1 == here:
            ops.append(EditOp(DEL, i - 1, None))
            i -= 1
        else:
            ops.append(EditOp(INS, None, j - 1))
            j -= 1
    ops.reverse()
    return int(d[n, m]), Alignment(ops)


def _check_parallel(refs, hyps):
    if len(refs) != len(hyps):
        raise ScoringError(f"{len(refs)} references but {len(hyps)} hypotheses")


def mer(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """Corpus-pooled mixed error rate in percent."""
    _check_parallel(refs, hyps)
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ScoringError("reference corpus is empty")
    errors = sum(edit_distance(r, h)[0] for r, h in zip(refs, hyps))
    return 100.0 * errors / total


def cs_flags(ref: Sequence[int], langmap: LanguageMap) -> list[bool]:
    flags = [False] * len(ref)
    for p in detect_cs_pairs(ref, langmap):
        flags[p.first] = flags[p.second] = True
    return flags


def cs_point_counts(ref: Sequence[int], hyp: Sequence[int], langmap: LanguageMap) -> tuple[int, int]:
    """(errors, flagged tokens) at code-switching points of one utterance.

    Substitutions and deletions count when their reference token is flagged;
    an insertion counts when the last reference token consumed before it is
    flagged.
    """
    flags = cs_flags(ref, langmap)
    _, ali = edit_distance(ref, hyp)
    errors = 0
    last_ref = None
    for op in ali.ops:
        if op.kind in (SUB, DEL) and flags[op.ref]:
            errors += 1
        elif op.kind == INS and last_ref is not None and flags[last_ref]:
            errors += 1
        if op.ref is not None:
            last_ref = op.ref
    return errors, sum(flags)


def cs_point_mer(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]],
                 langmap: LanguageMap) -> float:
    _check_parallel(refs, hyps)
    errors = flagged = 0
    for r, h in zip(refs, hyps):
        e, f = cs_point_counts(r, h, langmap)
        errors += e
        flagged += f
    if flagged == 0:
        raise ScoringError("no code-switching points in the reference corpus")
    return 100.0 * errors / flagged


def mask_accuracy(dists, targets: Sequence[int], plan: MaskPlan) -> float:
    """Share of masked positions whose argmax equals the target.

    ``dists`` rows score token ids ``1..V`` in columns ``0..V-1``.
    """
    if len(plan) == 0:
        raise ScoringError("mask accuracy needs a non-empty plan")
    arr = getattr(dists, "data", dists)
    pos = plan.as_array()
    pred = np.argmax(np.asarray(arr)[pos], axis=-1) + 1
    tgt = np.asarray(targets, dtype=np.int64)[pos]
    return float(np.mean(pred == tgt))


def format_report(metrics: dict) -> str:
    """``key=value`` lines, one metric per line."""
    lines = []
    for k, v in metrics.items():
        lines.append(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
