"""Connectionist temporal classification: loss, collapse, greedy decoding.

A posterior grid is a ``(T, V + 1)`` array of per-frame log-probabilities
with the blank symbol at column 0; label ids live in ``[1, V]``.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .numerics import Tensor, as_tensor, custom_op

BLANK = 0
NEG_INF = -np.inf


class CTCError(ValueError):
    pass


class InfeasibleAlignmentError(CTCError):
    def __init__(self, n_labels: int, required: int, frames: int):
        self.required = required
        self.frames = frames
        super().__init__(
            f"{n_labels} labels need at least {required} frames, grid has {frames}"
        )


def collapse(frame_tokens: Sequence[int]) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in frame_tokens:
        tok = int(tok)
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return out


def required_frames(labels: Sequence[int]) -> int:
    """Shortest grid that can emit ``labels`` (repeats need a blank between)."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _check_labels(labels, vocab_plus_blank: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.size and (lab.min() < 1 or lab.max() >= vocab_plus_blank):
        raise CTCError(f"label ids must lie in [1, {vocab_plus_blank - 1}]")
    return lab


def _forward_backward(lp: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. ``lp`` (shape ``(T, V+1)``)."""
    T = lp.shape[0]
    n = labels.size
    need = required_frames(labels)
    if need > T:
        raise InfeasibleAlignmentError(n, need, T)

    ext = np.zeros(2 * n + 1, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    if n > 1:
        skip[3::2] = labels[1:] != labels[:-1]
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    shifted = np.full(S, NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            shifted[:] = NEG_INF
            shifted[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
            alpha[t] = np.logaddexp(acc, shifted) + emit[t]

        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = emit[T - 1, S - 1]
        if S > 1:
            beta[T - 1, S - 2] = emit[T - 1, S - 2]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            shifted[:] = NEG_INF
            shifted[:-2] = np.where(skip[2:], nxt[2:], NEG_INF)
            beta[t] = np.logaddexp(acc, shifted) + emit[t]

    log_z = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - emit - log_z)
    occ = np.nan_to_num(occ, nan=0.0)
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return -float(log_z), grad


def ctc_loss(grid, labels: Sequence[int]) -> Tensor:
    """-log of the summed probability of every frame path collapsing to ``labels``.

    Differentiable with respect to the grid entries.  Empty ``labels`` give
    the all-blank path probability.
    """
    grid = as_tensor(grid)
    lab = _check_labels(labels, grid.shape[-1])
    nll, g = _forward_backward(grid.data, lab)

    def bw(up):
        return (up * g,)

    return custom_op("ctc_loss", np.array(nll), (grid,), bw)


def ctc_loss_batch(grid, frame_lens: Sequence[int], label_seqs: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance losses ``(B,)`` for a padded ``(B, T_max, V+1)`` grid.

    Frames past ``frame_lens[b]`` are ignored and receive zero gradient.
    """
    grid = as_tensor(grid)
    B = grid.shape[0]
    if len(frame_lens) != B or len(label_seqs) != B:
        raise CTCError("batch size mismatch between grid, lengths and labels")
    losses = np.zeros(B)
    grads = np.zeros_like(grid.data)
    for b in range(B):
        T = int(frame_lens[b])
        lab = _check_labels(label_seqs[b], grid.shape[-1])
        losses[b], grads[b, :T] = _forward_backward(grid.data[b, :T], lab)

    def bw(up):
        return (up[:, None, None] * grads,)

    return custom_op("ctc_loss_batch", losses, (grid,), bw)


def greedy_decode(grid) -> tuple[list[int], list[float]]:
    """Frame-wise argmax followed by collapse.

    Each emitted token's confidence is the largest frame probability within
    the contiguous argmax run that produced it.  Ties go to the lowest id.
    """
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=float)
    best = np.argmax(lp, axis=-1)
    peak = np.exp(lp[np.arange(lp.shape[0]), best])
    tokens: list[int] = []
    confs: list[float] = []
    prev = None
    for t, tok in enumerate(best.tolist()):
        if tok == prev:
            if tok != BLANK:
                confs[-1] = max(confs[-1], float(peak[t]))
        elif tok != BLANK:
            tokens.append(tok)
            confs.append(float(peak[t]))
        prev = tok
    return tokens, confs


def brute_force_ctc(grid, labels: Sequence[int]) -> float:
    """Enumerate every frame path; only for tiny grids ((V+1)^T <= 1e6)."""
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=float)
    T, K = lp.shape
    if K ** T > 10**6:
        raise CTCError(f"brute force over {K}^{T} paths is too large")
    target = list(labels)
    total = 0.0
    cols = np.arange(T)
    for path in itertools.product(range(K), repeat=T):
        if collapse(path) == target:
            total += float(np.exp(lp[cols, list(path)].sum()))
    if total == 0.0:
        return float("inf")
    return -float(np.log(total))
