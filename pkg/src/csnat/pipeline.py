"""End-to-end runs: data generation, CE training, MWE fine-tuning, decoding, scoring."""
from __future__ import annotations

import contextlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig, write_snapshot
from .corpus import Utterance, gen_corpus, load_split, read_manifest, spec_augment
from .ctc import ctc_loss_batch, greedy_decode
from .decode import at_beam_decode, maskctc_decode, measure_rtf, read_hypotheses, single_thread, write_hypotheses
from .masking import MaskPlan, Vocabulary, apply_mask, complement, detect_cs_pairs, plan_mask, random_plan
from .model import CAUSAL, Transformer, average_checkpoints
from .numerics import Checkpoint, NoamOptimizer, Tensor, load_checkpoint, make_rng, save_checkpoint
from .objectives import (cmlm_ce_batch, combined_mwe_loss, enforced_nat_loss, gen_input_nbest,
                         gen_output_nbest, joint_nat_loss, mwe_loss)
from .scoring import ScoringError, cs_flags, cs_point_mer, format_report, mer

log = logging.getLogger(__name__)

CURVE_HEADER = "epoch,train_acc,valid_acc,train_loss,valid_loss\n"

# substream tags for make_rng(seed, tag, ...)
_SHUFFLE, _PLAN, _DROP, _AUG, _VALID_PLAN, _NBEST, _INIT = 1, 2, 3, 4, 5, 6, 7


class TrainingDiverged(RuntimeError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class Batch:
    feats: np.ndarray  # (B, T_max, d)
    frame_lens: list[int]
    labels: list[list[int]]
    utt_ids: list[str]

    @property
    def label_lens(self) -> list[int]:
        return [len(y) for y in self.labels]


@dataclass
class BatchResult:
    loss: Tensor
    ctc: float
    cmlm: float
    correct: int
    counted: int
    mwe: float | None = None
    nbest: list | None = None
    skipped: int = 0


def make_batch(utts: Sequence[Utterance]) -> Batch:
    lens = [u.features.shape[0] for u in utts]
    d = utts[0].features.shape[1]
    feats = np.zeros((len(utts), max(lens), d))
    for b, u in enumerate(utts):
        feats[b, :lens[b]] = u.features
    return Batch(feats, lens, [list(u.tokens) for u in utts], [u.utt_id for u in utts])


def _pad_tokens(seqs: Sequence[Sequence[int]], pad: int) -> np.ndarray:
    out = np.full((len(seqs), max(len(s) for s in seqs)), pad, dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, :len(s)] = s
    return out


def _count_correct(dists: np.ndarray, labels, plans) -> tuple[int, int]:
    correct = total = 0
    for b, (y, plan) in enumerate(zip(labels, plans)):
        if not len(plan):
            continue
        pos = plan.as_array()
        pred = np.argmax(dists[b, pos], axis=-1) + 1
        correct += int((pred == np.asarray(y)[pos]).sum())
        total += len(plan)
    return correct, total


def nat_batch_loss(model: Transformer, batch: Batch, strategy: str, langmap, alpha: float,
                   plan_rng, drop_rng=None, training: bool = True, plans: Sequence[MaskPlan] | None = None):
    """Joint CTC + CMLM loss (enforced form for strategy ``C``), mean over the batch.

    Returns the :class:`BatchResult` plus the decoder pass pieces that MWE
    training reuses ``(hidden, grid, dists, plans)``.
    """
    cfg = model.config
    hidden = model.encode(batch.feats, batch.frame_lens, training=training, rng=drop_rng)
    grid = model.ctc_head(hidden)
    ctc = ctc_loss_batch(grid, batch.frame_lens, batch.labels)
    if plans is None:
        base = "R" if strategy == "C" else strategy
        plans = [plan_mask(base, y, langmap, plan_rng) for y in batch.labels]
    masked = _pad_tokens([apply_mask(y, p, cfg.mask_id) for y, p in zip(batch.labels, plans)], cfg.eos_id)
    dists = model.cmlm_decode(masked, hidden, batch.frame_lens, batch.label_lens, training, drop_rng)
    cm = cmlm_ce_batch(dists, batch.labels, plans)
    if strategy == "C":
        comps = [complement(p) for p in plans]
        masked2 = _pad_tokens([apply_mask(y, p, cfg.mask_id) for y, p in zip(batch.labels, comps)], cfg.eos_id)
        dists2 = model.cmlm_decode(masked2, hidden, batch.frame_lens, batch.label_lens, training, drop_rng)
        cm2 = cmlm_ce_batch(dists2, batch.labels, comps)
        per_utt = enforced_nat_loss(ctc, cm, cm2, alpha)
    else:
        per_utt = joint_nat_loss(ctc, cm, alpha)
    loss = nx.mean(per_utt)
    correct, counted = _count_correct(dists.data, batch.labels, plans)
    res = BatchResult(loss, float(ctc.data.mean()), float(cm.data.mean()), correct, counted)
    return res, (hidden, grid, dists, plans)


def at_batch_loss(model: Transformer, batch: Batch, alpha: float, drop_rng=None, training: bool = True):
    """Joint CTC + teacher-forced cross-entropy for the causal baseline."""
    cfg = model.config
    hidden = model.encode(batch.feats, batch.frame_lens, training=training, rng=drop_rng)
    ctc = ctc_loss_batch(model.ctc_head(hidden), batch.frame_lens, batch.labels)
    inputs = _pad_tokens([[cfg.eos_id] + y for y in batch.labels], cfg.eos_id)
    eos_col = cfg.vocab_size
    targets = _pad_tokens([[t - 1 for t in y] + [eos_col] for y in batch.labels], eos_col)
    weight = np.zeros(targets.shape)
    for b, y in enumerate(batch.labels):
        weight[b, :len(y) + 1] = -1.0 / (len(y) + 1)
    out = model.causal_logits(inputs, hidden, batch.frame_lens, training, drop_rng)
    ce = nx.tsum(nx.mul(nx.take_last(out, targets), weight), axis=1)
    loss = nx.mean(joint_nat_loss(ctc, ce, alpha))
    pred = np.argmax(out.data, axis=-1)
    hit = (pred == targets) & (weight != 0)
    return BatchResult(loss, float(ctc.data.mean()), float(ce.data.mean()), int(hit.sum()),
                       int((weight != 0).sum()))


def mwe_batch_loss(model: Transformer, batch: Batch, cfg: RunConfig, langmap, plan_rng, drop_rng,
                   nbest_rng, training: bool = True) -> BatchResult:
    """gamma * NAT + (1 - gamma) * mean MWE over utterances with a usable N-best list."""
    res, (hidden, grid, dists, plans) = nat_batch_loss(
        model, batch, cfg.mask_strategy, langmap, cfg.alpha, plan_rng, drop_rng, training)
    terms, lists, skipped = [], [], 0
    for b, y in enumerate(batch.labels):
        if cfg.nbest_mode == "output":
            nb = gen_output_nbest(nx.index(dists, (b, slice(0, len(y)))), plans[b], y, cfg.nbest)
        else:
            T = batch.frame_lens[b]
            greedy, _ = greedy_decode(grid.data[b, :T])
            if not greedy:
                skipped += 1
                continue
            h = nx.index(hidden, (slice(b, b + 1), slice(0, T)))
            nb = gen_input_nbest(model, h, greedy, y, cfg.nbest, nbest_rng, training=training, dropout_rng=drop_rng)
        term = mwe_loss(nb)
        terms.append(term)
        lists.append({"utt": batch.utt_ids[b],
                      "hypotheses": [list(h) for h in nb.hypotheses],
                      "log_posteriors": nb.log_posteriors.data.tolist(),
                      "distances": nb.distances.tolist(),
                      "mwe": term.item()})
    if terms:
        mwe = nx.mean(nx.stack(terms))
        res.loss = combined_mwe_loss(res.loss, mwe, cfg.gamma)
        res.mwe = mwe.item()
    else:
        res.loss = combined_mwe_loss(res.loss, 0.0, cfg.gamma)
        res.mwe = 0.0
    res.nbest = lists
    res.skipped = skipped
    return res


def _batches(n: int, size: int, order: np.ndarray):
    for i in range(0, n, size):
        yield order[i:i + size]


def _augment(cfg: RunConfig, utts: Sequence[Utterance], rng) -> list[Utterance]:
    if not (cfg.sa_time_masks or cfg.sa_freq_masks):
        return list(utts)
    out = []
    for u in utts:
        tw = min(cfg.sa_time_width, u.features.shape[0])
        fw = min(cfg.sa_freq_width, u.features.shape[1])
        x = spec_augment(u.features, (cfg.sa_time_masks, tw), (cfg.sa_freq_masks, fw), rng)
        out.append(Utterance(u.utt_id, u.tokens, x))
    return out


def validation_plans(cfg: RunConfig, utts: Sequence[Utterance]) -> list[MaskPlan]:
    """Fixed random plans for the validation set, shared by every strategy."""
    rng = make_rng(cfg.seed, _VALID_PLAN)
    return [random_plan(len(u.tokens), rng) for u in utts]


def evaluate(model: Transformer, cfg: RunConfig, utts: Sequence[Utterance], plans, langmap) -> tuple[float, float]:
    """(mask accuracy, mean joint loss) without dropout."""
    correct = counted = 0
    total = 0.0
    with nx.no_grad():
        for i in range(0, len(utts), cfg.batch_size):
            batch = make_batch(utts[i:i + cfg.batch_size])
            if model.config.decoder_mode == CAUSAL:
                res = at_batch_loss(model, batch, cfg.alpha, training=False)
            else:
                res, _ = nat_batch_loss(model, batch, "R", langmap, cfg.alpha, None, training=False,
                                        plans=plans[i:i + cfg.batch_size])
            correct += res.correct
            counted += res.counted
            total += res.loss.item() * len(batch.labels)
    return correct / max(counted, 1), total / max(len(utts), 1)


def _threads(cfg: RunConfig):
    return single_thread() if cfg.single_thread else contextlib.nullcontext()


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    path = Path(cfg.corpus_dir) / "vocab.txt"
    if not path.exists():
        raise PipelineError(f"corpus not found: {path} is missing")
    return Vocabulary.read(path)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _train_loop(model, cfg: RunConfig, opt: NoamOptimizer, train, valid, langmap, epochs: int,
                out: Path, tag: str, step_fn, nbest_log=None) -> list[Checkpoint]:
    vplans = validation_plans(cfg, valid)
    curve = out / f"{tag}_curve.csv"
    curve.write_text(CURVE_HEADER, encoding="utf-8")
    ckpts = []
    for epoch in range(1, epochs + 1):
        order = make_rng(cfg.seed, _SHUFFLE, epoch).permutation(len(train))
        correct = counted = 0
        loss_sum = 0.0
        for bi, idx in enumerate(_batches(len(train), cfg.batch_size, order)):
            utts = _augment(cfg, [train[i] for i in idx], make_rng(cfg.seed, _AUG, epoch, bi))
            batch = make_batch(utts)
            model.zero_grad()
            try:
                res = step_fn(batch, epoch, bi)
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {bi}: {exc}") from None
            value = res.loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch} batch {bi}: non-finite loss")
            nx.backward(res.loss)
            opt.step()
            correct += res.correct
            counted += res.counted
            loss_sum += value * len(batch.labels)
            if nbest_log is not None and res.nbest is not None:
                nbest_log.write(json.dumps({"epoch": epoch, "batch": bi, "mwe": res.mwe,
                                            "skipped": res.skipped, "lists": res.nbest}) + "\n")
        vacc, vloss = evaluate(model, cfg, valid, vplans, langmap)
        row = [str(epoch), _fmt(correct / max(counted, 1)), _fmt(vacc), _fmt(loss_sum / len(train)), _fmt(vloss)]
        with curve.open("a", encoding="utf-8") as fh:
            fh.write(",".join(row) + "\n")
        ck = model.checkpoint(step=opt.step_num, epoch=epoch)
        save_checkpoint(out / "checkpoints" / f"{tag}_epoch{epoch:03d}.ckpt", ck)
        ckpts.append(ck)
        log.info("%s epoch %d: train_acc=%s valid_acc=%s", tag, epoch, row[1], row[2])
    return ckpts


def run_gen_data(cfg: RunConfig) -> dict:
    with _threads(cfg):
        manifests = gen_corpus(cfg.synth_spec(), cfg.corpus_dir)
    write_snapshot(cfg, Path(cfg.corpus_dir) / "run.conf")
    return manifests


def run_train(cfg: RunConfig) -> Path:
    """CE training; writes per-epoch checkpoints, a curve CSV and the averaged ``model.ckpt``."""
    cfg.validate()
    vocab = _load_vocab(cfg)
    out = Path(cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "run.conf")
    with _threads(cfg):
        train = load_split(cfg.corpus_dir, "train", vocab)
        valid = load_split(cfg.corpus_dir, "valid", vocab)
        model = Transformer(cfg.model_config(len(vocab)), seed=cfg.seed)
        opt = NoamOptimizer(model.params, cfg.d_model, cfg.warmup, cfg.lr_scale, cfg.grad_clip)
        langmap = vocab.langmap

        def step(batch, epoch, bi):
            drop = make_rng(cfg.seed, _DROP, epoch, bi)
            if model.config.decoder_mode == CAUSAL:
                return at_batch_loss(model, batch, cfg.alpha, drop)
            res, _ = nat_batch_loss(model, batch, cfg.mask_strategy, langmap, cfg.alpha,
                                    make_rng(cfg.seed, _PLAN, epoch, bi), drop)
            return res

        ckpts = _train_loop(model, cfg, opt, train, valid, langmap, cfg.epochs, out, "train", step)
        final = average_checkpoints(ckpts[-cfg.avg_last:])
        save_checkpoint(out / "model.ckpt", final)
    return out / "model.ckpt"


def run_mwe_train(cfg: RunConfig, init_checkpoint=None) -> Path:
    """MWE fine-tuning from a CE checkpoint; writes ``mwe_model.ckpt``.

    The Noam step counter resumes from the initial checkpoint's step.
    """
    cfg.validate()
    init = init_checkpoint or cfg.init_checkpoint
    if not init:
        raise PipelineError("mwe-train needs init_checkpoint")
    vocab = _load_vocab(cfg)
    out = Path(cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg.replace(init_checkpoint=str(init)), out / "mwe_run.conf")
    with _threads(cfg):
        model = Transformer(cfg.model_config(len(vocab)), seed=cfg.seed)
        if model.config.decoder_mode != "cmlm":
            raise PipelineError("MWE training needs a cmlm model")
        ck = load_checkpoint(init)
        model.load(ck)
        train = load_split(cfg.corpus_dir, "train", vocab)
        valid = load_split(cfg.corpus_dir, "valid", vocab)
        opt = NoamOptimizer(model.params, cfg.d_model, cfg.warmup, cfg.lr_scale, cfg.grad_clip)
        opt.step_num = ck.step
        langmap = vocab.langmap

        def step(batch, epoch, bi):
            return mwe_batch_loss(model, batch, cfg, langmap, make_rng(cfg.seed, _PLAN, 100 + epoch, bi),
                                  make_rng(cfg.seed, _DROP, 100 + epoch, bi),
                                  make_rng(cfg.seed, _NBEST, epoch, bi))

        log_path = Path(cfg.nbest_log) if cfg.nbest_log else None
        with (log_path.open("w", encoding="utf-8") if log_path else contextlib.nullcontext()) as fh:
            ckpts = _train_loop(model, cfg, opt, train, valid, langmap, cfg.mwe_epochs, out, "mwe", step, fh)
        final = average_checkpoints(ckpts[-cfg.avg_last:])
        save_checkpoint(out / "mwe_model.ckpt", final)
    return out / "mwe_model.ckpt"


def load_model(cfg: RunConfig, checkpoint, vocab: Vocabulary) -> Transformer:
    model = Transformer(cfg.model_config(len(vocab)), seed=cfg.seed)
    model.load(load_checkpoint(checkpoint))
    return model


def decode_utterances(model: Transformer, cfg: RunConfig, utts: Sequence[Utterance], workers: int = 1):
    dcfg = cfg.decode_config()
    fn = at_beam_decode if model.config.decoder_mode == CAUSAL else maskctc_decode
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda u: fn(model, u.features, dcfg), utts))
    return [fn(model, u.features, dcfg) for u in utts]


def rtf_report(results, cfg: RunConfig, decoder: str, single: bool) -> str:
    return format_report({
        "decoder": decoder,
        "threads": "single-thread" if single else "multi-thread",
        "utterances": len(results),
        "wall_seconds": float(sum(r.wall_seconds for r in results)),
        "audio_seconds": float(sum(r.audio_seconds for r in results)),
        "rtf": float(measure_rtf(results)),
    })


def run_decode(cfg: RunConfig, checkpoint=None, split: str | None = None) -> tuple[Path, Path]:
    """Decode a split; writes the hypothesis file and an RTF report next to it."""
    cfg.validate()
    split = split or cfg.split
    ckpt = checkpoint or cfg.checkpoint
    if not ckpt:
        raise PipelineError("decode needs a checkpoint")
    vocab = _load_vocab(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hyp_path = Path(cfg.hyp_file) if cfg.hyp_file else out / f"hyp_{split}.txt"
    write_snapshot(cfg.replace(checkpoint=str(ckpt), split=split), out / f"decode_{split}.conf")
    utts = load_split(cfg.corpus_dir, split, vocab)
    workers = 1 if cfg.single_thread else cfg.workers
    with _threads(cfg):
        model = load_model(cfg, ckpt, vocab)
        results = decode_utterances(model, cfg, utts, workers)
    write_hypotheses(hyp_path, [(u.utt_id, vocab.decode(r.hypothesis)) for u, r in zip(utts, results)])
    decoder = "at_beam" if model.config.decoder_mode == CAUSAL else "maskctc"
    rtf_path = out / f"rtf_{split}.txt"
    rtf_path.write_text(rtf_report(results, cfg, decoder, cfg.single_thread), encoding="utf-8")
    return hyp_path, rtf_path


def run_rtf(cfg: RunConfig, checkpoint=None, split: str | None = None) -> Path:
    """Single-thread timing run; hypotheses are not written."""
    cfg.validate()
    split = split or cfg.split
    ckpt = checkpoint or cfg.checkpoint
    if not ckpt:
        raise PipelineError("rtf needs a checkpoint")
    vocab = _load_vocab(cfg)
    utts = load_split(cfg.corpus_dir, split, vocab)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with single_thread():
        model = load_model(cfg, ckpt, vocab)
        results = decode_utterances(model, cfg, utts, 1)
    decoder = "at_beam" if model.config.decoder_mode == CAUSAL else "maskctc"
    path = out / f"rtf_bench_{decoder}_{split}.txt"
    path.write_text(rtf_report(results, cfg, decoder, True), encoding="utf-8")
    return path


def score_files(ref_manifest, hyp_file, vocab: Vocabulary) -> dict:
    refs = {e.utt_id: e.tokens for e in read_manifest(ref_manifest, vocab)}
    hyps = read_hypotheses(hyp_file)
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise ScoringError(f"utterance ids do not align: missing {missing} unexpected {extra}")
    ids = sorted(refs)
    ref_seqs = [refs[u] for u in ids]
    hyp_seqs = [vocab.encode(hyps[u]) for u in ids]
    has_cs = any(detect_cs_pairs(r, vocab.langmap) for r in ref_seqs)
    flagged_mer = cs_point_mer(ref_seqs, hyp_seqs, vocab.langmap) if has_cs else None
    metrics = {
        "mer": mer(ref_seqs, hyp_seqs),
        "cs_mer": flagged_mer if flagged_mer is not None else "nan",
        "utterances": len(ids),
        "tokens": sum(len(r) for r in ref_seqs),
        "flagged_tokens": sum(sum(cs_flags(r, vocab.langmap)) for r in ref_seqs),
    }
    return metrics


def run_score(cfg: RunConfig, hyp_file=None, split: str | None = None) -> Path:
    split = split or cfg.split
    vocab = _load_vocab(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hyp = Path(hyp_file or cfg.hyp_file or out / f"hyp_{split}.txt")
    metrics = score_files(Path(cfg.corpus_dir) / f"{split}.tsv", hyp, vocab)
    path = out / f"score_{split}.txt"
    path.write_text(format_report(metrics), encoding="utf-8")
    return path
