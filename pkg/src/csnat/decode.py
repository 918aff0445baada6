"""Inference: mask-predict refinement of CTC greedy output, AR beam search, RTF."""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .ctc import greedy_decode

FRAME_SHIFT = 0.01  # seconds per feature frame


class DecodeError(ValueError):
    pass


@dataclass
class DecodeConfig:
    threshold: float = 0.9
    max_iterations: int = 10
    beam_size: int = 10
    max_len_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise DecodeError("threshold must lie in [0, 1]")
        if self.max_iterations < 1:
            raise DecodeError("max_iterations must be >= 1")
        if self.beam_size < 1:
            raise DecodeError("beam_size must be >= 1")
        if self.max_len_factor <= 0:
            raise DecodeError("max_len_factor must be positive")


@dataclass
class TimedResult:
    hypothesis: list[int]
    wall_seconds: float
    audio_seconds: float
    greedy: list[int] = field(default_factory=list)
    passes: int = 0
    commits: list[list[int]] = field(default_factory=list)
    score: float | None = None
    flagged: bool = False


@contextlib.contextmanager
def single_thread():
    """Pin BLAS/OpenMP pools to one thread for the duration of the block."""
    with threadpool_limits(limits=1):
        yield


def _as_frames(features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DecodeError("features must be a non-empty (T, d) matrix")
    return x


def maskctc_decode(model, features, cfg: DecodeConfig | None = None) -> TimedResult:
    """CTC greedy output with low-confidence tokens masked and re-predicted.

    Each round the decoder predicts every still-masked position and the
    ``ceil(M0 / K)`` most probable predictions are committed and frozen; the
    last allowed round commits whatever remains.
    """
    cfg = cfg or DecodeConfig()
    x = _as_frames(features)
    start = time.perf_counter()
    with nx.no_grad():
        hidden = model.encode(x)
        grid = model.ctc_head(hidden).data[0]
        greedy, conf = greedy_decode(grid)
        tokens = list(greedy)
        pending = [i for i, c in enumerate(conf) if c < cfg.threshold]
        commits: list[list[int]] = []
        if pending:
            per_round = math.ceil(len(pending) / cfg.max_iterations)
            for p in pending:
                tokens[p] = model.config.mask_id
            for it in range(cfg.max_iterations):
                dists = model.cmlm_decode([tokens], hidden).data[0]
                rows = dists[pending]
                best = np.argmax(rows, axis=-1)
                prob = rows[np.arange(len(pending)), best]
                if it == cfg.max_iterations - 1 or len(pending) <= per_round:
                    chosen = list(range(len(pending)))
                else:
                    # stable sort keeps lower positions first among equal scores
                    chosen = sorted(np.argsort(-prob, kind="stable")[:per_round].tolist())
                for j in chosen:
                    tokens[pending[j]] = int(best[j]) + 1
                commits.append([pending[j] for j in chosen])
                keep = set(chosen)
                pending = [p for j, p in enumerate(pending) if j not in keep]
                if not pending:
                    break
    wall = time.perf_counter() - start
    return TimedResult(tokens, wall, x.shape[0] * FRAME_SHIFT, greedy=greedy,
                       passes=len(commits), commits=commits)


def at_beam_decode(model, features, cfg: DecodeConfig | None = None) -> TimedResult:
    """Length-synchronous beam search over the causal decoder.

    Scores are summed token log-probabilities.  Search stops once no open
    hypothesis can beat the best finished one, or at ``max_len_factor * T``
    tokens; if nothing finished, the best partial hypothesis is returned
    with ``flagged`` set.
    """
    cfg = cfg or DecodeConfig()
    x = _as_frames(features)
    c = model.config
    eos_col = c.vocab_size
    max_len = max(1, int(cfg.max_len_factor * x.shape[0]))
    start = time.perf_counter()
    finished: list[tuple[float, tuple[int, ...]]] = []
    with nx.no_grad():
        hidden = model.encode(x)
        beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        for _ in range(max_len):
            batch = np.array([(c.eos_id,) + toks for _, toks in beams])
            mem = nx.add(hidden, np.zeros((len(beams), 1, 1)))
            lp = model.causal_logits(batch, mem).data[:, -1, :]
            scores = np.array([s for s, _ in beams])[:, None] + lp
            flat = scores.reshape(-1)
            # primary key score desc; EOS column sorts before others at equal score; then lower id
            col = np.tile(np.arange(lp.shape[1]), len(beams))
            col_key = np.where(col == eos_col, -1, col)
            order = np.lexsort((col_key, -flat))[:cfg.beam_size]
            nxt = []
            for k in order:
                b, v = divmod(int(k), lp.shape[1])
                if v == eos_col:
                    finished.append((float(flat[k]), beams[b][1]))
                else:
                    nxt.append((float(flat[k]), beams[b][1] + (v + 1,)))
            beams = nxt
            if not beams:
                break
            if finished and max(s for s, _ in finished) >= beams[0][0]:
                break
    wall = time.perf_counter() - start
    flagged = not finished
    pool = finished if finished else beams
    score, best = min(pool, key=lambda h: (-h[0], len(h[1]), h[1]))
    return TimedResult(list(best), wall, x.shape[0] * FRAME_SHIFT, score=score, flagged=flagged)


def measure_rtf(results: Sequence[TimedResult]) -> float:
    """Total decoding wall-clock over total audio duration."""
    if not results:
        raise DecodeError("no results to measure")
    audio = sum(r.audio_seconds for r in results)
    if audio <= 0:
        raise DecodeError("total audio duration is zero")
    return sum(r.wall_seconds for r in results) / audio


def write_hypotheses(path, items: Sequence[tuple[str, Sequence[str]]]) -> None:
    """One ``utt-id<TAB>space-separated tokens`` line per utterance."""
    lines = [f"{utt}\t{' '.join(toks)}\n" for utt, toks in items]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_hypotheses(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt, _, rest = line.partition("\t")
        if utt in out:
            raise DecodeError(f"duplicate utterance id {utt!r} in {path}")
        out[utt] = rest.split()
    return out
