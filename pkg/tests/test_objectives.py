import itertools
import math

import numpy as np
import pytest

from csnat import numerics as nx
from csnat.ctc import ctc_loss
from csnat.masking import MaskPlan, complement
from csnat.model import ModelConfig, Transformer
from csnat.numerics import Tensor, make_rng
from csnat.objectives import (ObjectiveError, cmlm_ce_batch, cmlm_ce_loss, combined_mwe_loss, enforced_nat_loss,
                              expected_centred_distance, gen_input_nbest, gen_output_nbest, hypothesis_posterior, joint_nat_loss, mwe_loss)
from csnat.scoring import edit_distance


def log_rows(*rows):
    return np.log(np.array(rows, dtype=float))


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def test_cmlm_ce_examples():
    perfect = log_rows([1.0, 1e-300], [1e-300, 1.0])
    assert cmlm_ce_loss(Tensor(perfect), [1, 2], MaskPlan(2, (0, 1))).item() == pytest.approx(0.0, abs=1e-12)
    uniform = np.full((3, 10), -math.log(10))
    assert cmlm_ce_loss(Tensor(uniform), [1, 5, 9], MaskPlan(3, (1,))).item() == pytest.approx(math.log(10))
    d = log_rows([0.5, 0.5, 0.0 + 1e-9], [0.25, 0.5, 0.25], [0.1, 0.1, 0.8])
    got = cmlm_ce_loss(Tensor(d), [1, 1, 3], MaskPlan(3, (0, 1))).item()
    assert got == pytest.approx((math.log(2) + math.log(4)) / 2, rel=1e-12)
    with pytest.raises(ObjectiveError):
        cmlm_ce_loss(Tensor(d), [1, 1], MaskPlan(3, (0,)))
    with pytest.raises(ObjectiveError):
        cmlm_ce_loss(Tensor(d), [1, 1, 1], MaskPlan(3, ()))


def test_cmlm_ce_batch_matches_single_and_zero_for_empty_plan():
    rng = np.random.default_rng(0)
    d = nx.log_softmax(Tensor(rng.normal(size=(2, 4, 5))))
    targets = [[1, 2, 3], [5, 4, 3, 2]]
    plans = [MaskPlan(3, (0, 2)), MaskPlan(4, ())]
    out = cmlm_ce_batch(d, targets, plans)
    single = cmlm_ce_loss(Tensor(d.data[0, :3]), targets[0], plans[0]).item()
    assert out.data[0] == pytest.approx(single, rel=1e-14)
    assert out.data[1] == 0.0


def test_interpolations():
    assert joint_nat_loss(0.0, 0.0) == 0.0
    assert joint_nat_loss(1.0, 0.0) == pytest.approx(0.3)
    assert joint_nat_loss(2.0, 4.0) == pytest.approx(3.4)
    assert enforced_nat_loss(2.0, 0.0, 0.0) == pytest.approx(0.6)
    assert enforced_nat_loss(1.0, 1.5, 1.5) == pytest.approx(0.3 + 2 * 0.7 * 1.5)
    assert combined_mwe_loss(3.0, 0.0) == pytest.approx(0.03)
    assert combined_mwe_loss(3.0, -7.0, gamma=1.0) == 3.0
    assert combined_mwe_loss(2.0, -0.5) == pytest.approx(-0.475, abs=1e-15)
    rng = np.random.default_rng(1)
    for _ in range(50):
        c, a, b, m = rng.uniform(0, 5, size=4)
        al, ga = rng.uniform(0, 1, size=2)
        assert joint_nat_loss(c, a, al) == al * c + (1 - al) * a
        assert enforced_nat_loss(c, a, b, al) == al * c + (1 - al) * (a + b)
        assert combined_mwe_loss(c, m, ga) == ga * c + (1 - ga) * m


def test_hypothesis_posterior_examples():
    d = log_rows([0.5, 0.5], [0.2, 0.8], [0.9, 0.1])
    assert hypothesis_posterior(d, [1, 1, 2], MaskPlan(3, (0,))).item() == pytest.approx(math.log(0.5))
    assert hypothesis_posterior(d, [1, 1, 1], MaskPlan(3, ())).item() == 0.0
    assert hypothesis_posterior(d, [1, 1, 1], MaskPlan(3, (0, 1))).item() == pytest.approx(math.log(0.1))
    with pytest.raises(ObjectiveError):
        hypothesis_posterior(d, [1, 1], MaskPlan(3, (0,)))


def test_mwe_examples_and_invariances():
    assert expected_centred_distance([0.75, 0.25], [1, 3]).item() == -0.5
    assert mwe_loss(log_posteriors=np.log([0.75, 0.25]), distances=[1, 3]).item() == pytest.approx(-0.5, abs=1e-15)
    assert mwe_loss(log_posteriors=np.log([0.5, 0.5]), distances=[1, 3]).item() == 0.0
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        lp = rng.normal(size=n) * 3
        dist = rng.integers(0, 6, size=n).astype(float)
        assert mwe_loss(log_posteriors=lp, distances=np.full(n, dist[0])).item() == 0.0
        base = mwe_loss(log_posteriors=lp, distances=dist).item()
        shift_d = mwe_loss(log_posteriors=lp, distances=dist + 7.0).item()
        shift_p = mwe_loss(log_posteriors=lp - 11.0, distances=dist).item()
        assert abs(base - shift_d) <= 1e-12 and abs(base - shift_p) <= 1e-12
        assert abs(np.exp(nx.log_softmax(Tensor(lp)).data).sum() - 1.0) <= 1e-12
    with pytest.raises(ObjectiveError):
        mwe_loss(log_posteriors=[0.0], distances=[1.0])


def exhaustive_top(dists, plan, targets, n):
    V = dists.shape[1]
    pos = list(plan.positions)
    scored = []
    for fill in itertools.product(range(1, V + 1), repeat=len(pos)):
        s = sum(dists[p, t - 1] for p, t in zip(pos, fill))
        scored.append((-s, fill))
    scored.sort()
    out = []
    for _, fill in scored[:n]:
        hyp = list(targets)
        for p, t in zip(pos, fill):
            hyp[p] = t
        out.append(tuple(hyp))
    return out


def test_output_nbest_matches_exhaustive_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(100):
        V = int(rng.integers(2, 7))
        N = int(rng.integers(1, 6))
        k = int(rng.integers(1, N + 1))
        while V ** k > 10_000:
            k -= 1
        plan = MaskPlan(N, tuple(rng.choice(N, size=k, replace=False).tolist()))
        dists = np.log(rng.dirichlet(np.ones(V), size=N))
        targets = rng.integers(1, V + 1, size=N).tolist()
        n = int(rng.integers(1, 6))
        nb = gen_output_nbest(dists, plan, targets, n)
        expected = exhaustive_top(dists, plan, targets, n)
        assert nb.hypotheses == expected
        assert nb.truncated == (n > V ** k)
        for h, lp, dist in zip(nb.hypotheses, nb.log_posteriors.data, nb.distances):
            assert lp == pytest.approx(hypothesis_posterior(dists, h, plan).item(), rel=1e-12)
            assert dist == edit_distance(targets, h)[0]


def test_output_nbest_small_cases():
    d = log_rows([0.1, 0.6, 0.3], [0.5, 0.25, 0.25])
    nb = gen_output_nbest(d, MaskPlan(2, (0,)), [1, 1], n=2)
    assert nb.hypotheses == [(2, 1), (3, 1)]
    nb = gen_output_nbest(d, MaskPlan(2, (0, 1)), [1, 1], n=1)
    assert nb.hypotheses == [(2, 1)]
    nb = gen_output_nbest(d, MaskPlan(2, (1,)), [2, 2], n=5)
    assert len(nb) == 3 and nb.truncated


def tiny_model(seed=0, **kw):
    cfg = dict(vocab_size=4, feat_dim=3, enc_layers=1, dec_layers=1, d_model=8, heads=2, ffn_dim=16, dropout=0.0)
    cfg.update(kw)
    return Transformer(ModelConfig(**cfg), seed=seed)


def test_input_nbest_reproducible_and_keeps_duplicates():
    model = tiny_model()
    feats = np.random.default_rng(0).normal(size=(5, 3))
    hidden = model.encode(feats)
    a = gen_input_nbest(model, hidden, [1, 2, 3], [1, 2, 4], n=4, rng=make_rng(9))
    b = gen_input_nbest(model, hidden, [1, 2, 3], [1, 2, 4], n=4, rng=make_rng(9))
    assert a.hypotheses == b.hypotheses and np.array_equal(a.log_posteriors.data, b.log_posteriors.data)
    assert all(len(p) >= 1 for p in a.plans)
    # a single-token greedy output can only produce the argmax fill: every hypothesis collides
    c = gen_input_nbest(model, hidden, [2], [2], n=4, rng=make_rng(1))
    assert len(c) == 4 and len(set(c.hypotheses)) == 1
    with pytest.raises(ObjectiveError):
        gen_input_nbest(model, hidden, [], [1], n=4, rng=make_rng(0))


def test_input_nbest_matches_single_passes():
    model = tiny_model(seed=4)
    hidden = model.encode(np.random.default_rng(1).normal(size=(6, 3)))
    nb = gen_input_nbest(model, hidden, [1, 3, 2, 4], [1, 3, 2, 4], n=3, rng=make_rng(2))
    for hyp, plan, lp in zip(nb.hypotheses, nb.plans, nb.log_posteriors.data):
        masked = [model.config.mask_id if i in plan.positions else t for i, t in enumerate([1, 3, 2, 4])]
        d = model.cmlm_decode(masked, hidden).data[0]
        assert lp == pytest.approx(hypothesis_posterior(d, hyp, plan).item(), rel=1e-10)


# gradient checks

def test_cmlm_and_interpolated_gradients():
    rng = np.random.default_rng(5)
    logits = nx.parameter(rng.normal(size=(4, 5)))
    grid = nx.parameter(rng.normal(size=(6, 4)))
    plan = MaskPlan(4, (0, 2))
    targets = [1, 4, 5, 2]

    def losses():
        d = nx.log_softmax(logits)
        ctc = ctc_loss(nx.log_softmax(grid), [1, 2])
        on = cmlm_ce_loss(d, targets, plan)
        off = cmlm_ce_loss(d, targets, complement(plan))
        return [on, joint_nat_loss(ctc, on), enforced_nat_loss(ctc, on, off)]

    for i in range(3):
        logits.grad = grid.grad = None
        nx.backward(losses()[i])
        got = [logits.grad, np.zeros(grid.shape) if grid.grad is None else grid.grad]
        fd = nx.finite_diff_grad(lambda: losses()[i], [logits, grid])
        for g, f in zip(got, fd):
            assert rel_err(g, f) < 1e-4


def test_mwe_gradient_through_decoder_logits():
    rng = np.random.default_rng(6)
    logits = nx.parameter(rng.normal(size=(3, 4)))
    plan = MaskPlan(3, (0, 2))
    targets = [1, 2, 3]

    def loss():
        d = nx.log_softmax(logits)
        nb = gen_output_nbest(d, plan, targets, n=2)
        return mwe_loss(log_posteriors=nb.log_posteriors, distances=nb.distances + np.array([0.0, 1.0]))

    nx.backward(loss())
    (fd,) = nx.finite_diff_grad(loss, [logits])
    assert rel_err(logits.grad, fd) < 1e-4
    assert np.any(logits.grad != 0)
