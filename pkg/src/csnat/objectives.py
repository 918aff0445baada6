"""Training criteria and N-best generation.

All interpolations act on negative log-likelihoods.  Decoder distributions
score token ids ``1..V`` in columns ``0..V-1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .masking import MaskPlan, apply_mask, random_plan
from .numerics import Tensor
from .scoring import edit_distance

ALPHA = 0.3
GAMMA = 0.01


class ObjectiveError(ValueError):
    pass


@dataclass
class LossBreakdown:
    ctc: float
    cmlm: float
    combined: float
    enforced: float | None = None
    mwe: float | None = None


@dataclass
class NBestList:
    hypotheses: list[tuple[int, ...]]
    log_posteriors: Tensor
    distances: np.ndarray
    plans: list[MaskPlan]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.hypotheses)


def _targets_as_columns(targets: Sequence[int]) -> np.ndarray:
    return np.asarray(targets, dtype=np.int64) - 1


def cmlm_ce_loss(dists: Tensor, targets: Sequence[int], plan: MaskPlan) -> Tensor:
    """Mean negative log-probability of the targets at the masked positions."""
    if len(targets) != plan.length or dists.shape[0] != plan.length:
        raise ObjectiveError(
            f"plan length {plan.length}, {len(targets)} targets, {dists.shape[0]} distributions"
        )
    if len(plan) == 0:
        raise ObjectiveError("CMLM loss needs at least one masked position")
    pos = plan.as_array()
    picked = nx.take_last(nx.index(dists, pos), _targets_as_columns(targets)[pos])
    return nx.mul(nx.tsum(picked), -1.0 / len(plan))


def cmlm_ce_batch(dists: Tensor, targets: Sequence[Sequence[int]], plans: Sequence[MaskPlan]) -> Tensor:
    """Per-utterance :func:`cmlm_ce_loss` for a padded ``(B, N, V)`` batch.

    An empty plan contributes exactly zero.
    """
    B, N, _ = dists.shape
    cols = np.zeros((B, N), dtype=np.int64)
    weight = np.zeros((B, N))
    for b, (tgt, plan) in enumerate(zip(targets, plans)):
        if len(tgt) != plan.length:
            raise ObjectiveError("plan/target length mismatch")
        cols[b, :len(tgt)] = _targets_as_columns(tgt)
        if len(plan):
            weight[b, plan.as_array()] = -1.0 / len(plan)
    return nx.tsum(nx.mul(nx.take_last(dists, cols), weight), axis=1)


def joint_nat_loss(ctc, cmlm, alpha: float = ALPHA):
    return alpha * ctc + (1.0 - alpha) * cmlm


def enforced_nat_loss(ctc, cmlm_on_plan, cmlm_on_complement, alpha: float = ALPHA):
    """Joint loss with the complementary prediction term added to the CMLM part."""
    return alpha * ctc + (1.0 - alpha) * (cmlm_on_plan + cmlm_on_complement)


def combined_mwe_loss(nat_loss, mwe, gamma: float = GAMMA):
    return gamma * nat_loss + (1.0 - gamma) * mwe


def hypothesis_posterior(dists, hyp: Sequence[int], plan: MaskPlan) -> Tensor:
    """log P(hyp | X): sum of the decoder log-probabilities at the masked positions."""
    dists = nx.as_tensor(dists)
    if len(hyp) != plan.length or dists.shape[0] != plan.length:
        raise ObjectiveError(f"hypothesis length {len(hyp)} vs plan length {plan.length}")
    if len(plan) == 0:
        return Tensor(0.0)
    pos = plan.as_array()
    return nx.tsum(nx.take_last(nx.index(dists, pos), _targets_as_columns(hyp)[pos]))


def mwe_loss(nbest: NBestList | None = None, *, log_posteriors=None, distances=None) -> Tensor:
    """Expected centred edit distance under the renormalised N-best posterior.

    Posteriors are softmax-normalised over the list; distances are centred
    on their uniform mean, so a list of equal distances costs exactly 0.
    """
    if nbest is not None:
        log_posteriors, distances = nbest.log_posteriors, nbest.distances
    lp = nx.as_tensor(log_posteriors)
    dist = np.asarray(distances, dtype=float)
    if lp.shape != dist.shape or lp.ndim != 1:
        raise ObjectiveError("log-posteriors and distances must be matching vectors")
    if dist.size < 2:
        raise ObjectiveError("MWE needs at least two hypotheses")
    return expected_centred_distance(nx.softmax(lp), dist)


def expected_centred_distance(posteriors, distances) -> Tensor:
    """``sum_i P_i (D_i - mean(D))`` for already normalised posteriors ``P``."""
    post = nx.as_tensor(posteriors)
    dist = np.asarray(distances, dtype=float)
    if post.shape != dist.shape:
        raise ObjectiveError("posteriors and distances must be matching vectors")
    return nx.tsum(nx.mul(post, dist - dist.mean()))


def _top_fills(lp: np.ndarray, positions: np.ndarray, n: int) -> list[tuple[float, tuple[int, ...]]]:
    """Width-``n`` beam over ``positions`` (ascending) of an ``(N, V)`` log-prob table.

    Per-position distributions are independent, so the beam is exact.  Ties
    go to the lexicographically smaller token tuple.
    """
    V = lp.shape[1]
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for p in positions:
        row = lp[p]
        cand = [(s + row[v], toks + (v + 1,)) for s, toks in beams for v in range(V)]
        cand.sort(key=lambda c: (-c[0], c[1]))
        beams = cand[:n]
    return beams


def gen_output_nbest(dists, plan: MaskPlan, targets: Sequence[int], n: int = 4) -> NBestList:
    """The ``n`` most probable joint fill-ins of the masked positions.

    Each fill is spliced into ``targets`` (the observed tokens).  When fewer
    than ``n`` assignments exist, all are returned and ``truncated`` is set.
    """
    if len(plan) == 0:
        raise ObjectiveError("Output-Nbest needs a non-empty plan")
    if n < 1:
        raise ObjectiveError("n must be positive")
    dists = nx.as_tensor(dists)
    if dists.shape[0] != plan.length or len(targets) != plan.length:
        raise ObjectiveError("plan/target/distribution lengths differ")
    V = dists.shape[1]
    total = V ** len(plan)
    truncated = n > total
    pos = plan.as_array()
    fills = _top_fills(dists.data, pos, min(n, total))
    hyps, posts = [], []
    ref = [int(t) for t in targets]
    for _, toks in fills:
        hyp = list(ref)
        for p, t in zip(pos, toks):
            hyp[p] = t
        hyps.append(tuple(hyp))
        posts.append(hypothesis_posterior(dists, hyp, plan))
    distances = np.array([edit_distance(ref, h)[0] for h in hyps], dtype=float)
    return NBestList(hyps, nx.stack(posts), distances, [plan] * len(hyps), truncated)


def gen_input_nbest(model, hidden: Tensor, ctc_greedy: Sequence[int], targets: Sequence[int],
                    n: int = 4, rng: np.random.Generator | None = None, src_len: int | None = None,
                    training: bool = False, dropout_rng=None) -> NBestList:
    """Re-mask the CTC greedy output ``n`` times at random and fill each by argmax.

    All ``n`` masked copies go through the decoder as one batch.  Duplicate
    hypotheses are kept.
    """
    greedy = [int(t) for t in ctc_greedy]
    if not greedy:
        raise ObjectiveError("Input-Nbest needs a non-empty CTC greedy sequence")
    if rng is None:
        raise ObjectiveError("Input-Nbest needs an rng")
    plans = [random_plan(len(greedy), rng) for _ in range(n)]
    masked = np.array([apply_mask(greedy, p, model.config.mask_id) for p in plans])
    mem = nx.add(hidden, np.zeros((n, 1, 1)))
    src = None if src_len is None else [src_len] * n
    dists = model.cmlm_decode(masked, mem, src_lens=src, training=training, rng=dropout_rng)
    hyps, posts = [], []
    for i, plan in enumerate(plans):
        pos = plan.as_array()
        best = np.argmax(dists.data[i][pos], axis=-1) + 1
        hyp = list(greedy)
        for p, t in zip(pos, best.tolist()):
            hyp[p] = t
        hyps.append(tuple(hyp))
        posts.append(hypothesis_posterior(nx.index(dists, i), hyp, plan))
    ref = [int(t) for t in targets]
    distances = np.array([edit_distance(ref, h)[0] for h in hyps], dtype=float)
    return NBestList(hyps, nx.stack(posts), distances, plans)
