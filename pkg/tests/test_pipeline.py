import json

import numpy as np
import pytest

from csnat import numerics as nx
from csnat import pipeline
from csnat.config import RunConfig
from csnat.corpus import load_split
from csnat.masking import Vocabulary
from csnat.model import Transformer
from csnat.numerics import make_rng
from csnat.objectives import mwe_loss
from csnat.scoring import ScoringError, parse_report

TINY = dict(n_train=10, n_valid=4, n_test=4, feat_dim=8, d_model=16, heads=2, ffn_dim=32, batch_size=4,
            epochs=1, avg_last=1, mwe_epochs=1, warmup=10)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = RunConfig(corpus_dir=str(root / "corpus"), out_dir=str(root / "exp"), **TINY)
    pipeline.run_gen_data(cfg)
    return cfg


@pytest.fixture(scope="module")
def trained(corpus):
    return pipeline.run_train(corpus)


def test_one_epoch_smoke(corpus, trained):
    rows = (trained.parent / "train_curve.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_acc,valid_acc,train_loss,valid_loss" and len(rows) == 2
    assert trained.exists() and (trained.parent / "checkpoints" / "train_epoch001.ckpt").exists()
    assert "mask_strategy = R  # repo default" in (trained.parent / "run.conf").read_text()


def test_training_is_deterministic(corpus, trained, tmp_path):
    again = pipeline.run_train(corpus.replace(out_dir=str(tmp_path / "again"), epochs=1))
    assert (again.parent / "train_curve.csv").read_bytes() == (trained.parent / "train_curve.csv").read_bytes()
    assert again.read_bytes() == trained.read_bytes()


@pytest.mark.parametrize("strategy", ["C", "F", "S", "M", "E"])
def test_every_strategy_trains(corpus, tmp_path, strategy):
    ck = pipeline.run_train(corpus.replace(out_dir=str(tmp_path / strategy), mask_strategy=strategy))
    assert ck.exists()


def test_causal_training_and_beam_decode(corpus, tmp_path):
    cfg = corpus.replace(out_dir=str(tmp_path / "at"), decoder_mode="causal", max_len_factor=0.5, beam_size=2)
    ck = pipeline.run_train(cfg)
    hyp, rtf = pipeline.run_decode(cfg, ck)
    assert "decoder=at_beam" in rtf.read_text()
    assert len(hyp.read_text().splitlines()) == 4


def test_loss_decreases_over_epochs(corpus, tmp_path):
    cfg = corpus.replace(out_dir=str(tmp_path / "five"), epochs=5, warmup=20, lr_scale=2.0)
    pipeline.run_train(cfg)
    rows = (tmp_path / "five" / "train_curve.csv").read_text().splitlines()[1:]
    losses = [float(r.split(",")[3]) for r in rows]
    assert len(rows) == 5 and losses[-1] < losses[0]


def test_divergence_names_the_batch(corpus, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise nx.NonFiniteError("log produced -inf")
    monkeypatch.setattr(pipeline, "nat_batch_loss", broken)
    with pytest.raises(pipeline.TrainingDiverged, match="epoch 1 batch 0"):
        pipeline.run_train(corpus.replace(out_dir=str(tmp_path / "div")))


def _first_batch(cfg):
    vocab = Vocabulary.read(f"{cfg.corpus_dir}/vocab.txt")
    utts = load_split(cfg.corpus_dir, "train", vocab)[:4]
    return vocab, pipeline.make_batch(utts)


@pytest.mark.parametrize("mode", ["input", "output"])
def test_gamma_one_reduces_to_nat_loss(corpus, trained, mode):
    vocab, batch = _first_batch(corpus)
    model = pipeline.load_model(corpus, trained, vocab)
    cfg = corpus.replace(gamma=1.0, nbest_mode=mode)
    mwe = pipeline.mwe_batch_loss(model, batch, cfg, vocab.langmap, make_rng(1), None, make_rng(2), training=False)
    nat, _ = pipeline.nat_batch_loss(model, batch, "R", vocab.langmap, cfg.alpha, make_rng(1), training=False)
    assert mwe.loss.item() == nat.loss.item()


@pytest.mark.parametrize("mode", ["input", "output"])
def test_mwe_run_and_log_replay(corpus, trained, tmp_path, mode):
    log_path = tmp_path / f"nbest_{mode}.jsonl"
    cfg = corpus.replace(out_dir=str(tmp_path / mode), nbest_mode=mode, nbest_log=str(log_path))
    ck = pipeline.run_mwe_train(cfg, trained)
    assert ck.exists() and nx.load_checkpoint(ck).step > nx.load_checkpoint(trained).step
    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert len(records) == 3  # 10 utterances in batches of 4
    for rec in records:
        replayed = [mwe_loss(log_posteriors=np.array(item["log_posteriors"]),
                             distances=np.array(item["distances"])).item() for item in rec["lists"]]
        for item, value in zip(rec["lists"], replayed):
            assert len(item["hypotheses"]) == cfg.nbest
            assert value == pytest.approx(item["mwe"], abs=1e-12)
        if replayed:
            assert float(np.mean(replayed)) == pytest.approx(rec["mwe"], abs=1e-12)
        assert len(rec["lists"]) + rec["skipped"] == 4 or len(rec["lists"]) + rec["skipped"] == 2


def test_mwe_needs_init_checkpoint(corpus):
    with pytest.raises(pipeline.PipelineError):
        pipeline.run_mwe_train(corpus)


def test_decode_and_score(corpus, trained, tmp_path):
    cfg = corpus.replace(out_dir=str(tmp_path / "dec"))
    hyp, rtf = pipeline.run_decode(cfg, trained)
    report = parse_report(rtf.read_text())
    assert report["threads"] == "single-thread" and report["decoder"] == "maskctc"
    assert set(report) >= {"wall_seconds", "audio_seconds", "rtf", "utterances"}
    metrics = parse_report(pipeline.run_score(cfg).read_text())
    assert set(metrics) == {"mer", "cs_mer", "utterances", "tokens", "flagged_tokens"}
    assert metrics["utterances"] == "4"


def _write_hyps(path, manifest, edit=None):
    lines = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        utt, _, text = line.split("\t")
        toks = text.split()
        if edit:
            toks = edit(utt, toks)
        lines.append(f"{utt}\t{' '.join(toks)}\n")
    path.write_text("".join(lines), encoding="utf-8")


def test_score_files_fixtures(corpus, tmp_path):
    vocab = Vocabulary.read(f"{corpus.corpus_dir}/vocab.txt")
    manifest = tmp_path / "ref.tsv"
    feats = f"{corpus.corpus_dir}/feats/test-00000.natf"
    # one utterance of ten tokens: EN x3, CN x4, EN x3; substitute the first CN token
    en, cn = vocab.surfaces[0], vocab.surfaces[-1]
    manifest.write_text(f"u1\t{feats}\t{' '.join([en] * 3 + [cn] * 4 + [en] * 3)}\n", encoding="utf-8")
    hyp = tmp_path / "hyp.txt"
    _write_hyps(hyp, manifest)
    assert pipeline.score_files(manifest, hyp, vocab)["mer"] == 0.0
    _write_hyps(hyp, manifest, lambda u, t: t[:3] + [vocab.surfaces[1]] + t[4:])
    m = pipeline.score_files(manifest, hyp, vocab)
    assert m["mer"] == 10.0 and m["flagged_tokens"] == 4 and m["cs_mer"] == 25.0
    hyp.write_text("u2\tx\n", encoding="utf-8")
    with pytest.raises(ScoringError, match="u1"):
        pipeline.score_files(manifest, hyp, vocab)


def test_missing_corpus_is_reported(tmp_path):
    with pytest.raises(pipeline.PipelineError):
        pipeline.run_train(RunConfig(corpus_dir=str(tmp_path / "none"), out_dir=str(tmp_path / "o")))


def test_average_uses_last_checkpoints(corpus, tmp_path):
    cfg = corpus.replace(out_dir=str(tmp_path / "avg"), epochs=3, avg_last=2)
    final = nx.load_checkpoint(pipeline.run_train(cfg))
    ck2 = nx.load_checkpoint(tmp_path / "avg" / "checkpoints" / "train_epoch002.ckpt")
    ck3 = nx.load_checkpoint(tmp_path / "avg" / "checkpoints" / "train_epoch003.ckpt")
    for k in final.params:
        assert np.allclose(final.params[k], (ck2.params[k] + ck3.params[k]) / 2, rtol=0, atol=1e-15)
    assert isinstance(Transformer(cfg.model_config(len(Vocabulary.read(f"{cfg.corpus_dir}/vocab.txt")))),
                      Transformer)
