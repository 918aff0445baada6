"""Synthetic code-switching corpus, feature files and spec-augment.

Each token id owns a fixed random prototype vector.  An utterance is a
Markov walk over the two languages (switch with probability ``switch_prob``
before each token after the first), with the token drawn uniformly inside
the current language; every token emits a random number of frames of
prototype plus Gaussian noise.

Feature file layout: ``b"NATF"``, u32 version, u32 frames, u32 dim, then
little-endian float32 values row by row.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .masking import CN, EN, Vocabulary
from .numerics import make_rng

FEAT_MAGIC = b"NATF"
FEAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "valid", "test")

_EN_WORDS = (
    "the", "and", "you", "that", "what", "know", "like", "then", "just", "okay",
    "because", "actually", "really", "project", "meeting", "lecture", "weekend", "movie",
    "friend", "office", "course", "exam", "holiday", "shopping", "coffee", "email",
    "deadline", "company", "system", "design",
)
_CN_CHARS = "的是我不了在人有这他们就来到说要去你会着没看好过也得学生时候家"


class CorpusError(Exception):
    pass


class FeatureFormatError(CorpusError):
    pass


@dataclass
class SynthSpec:
    en_vocab: int = 20
    cn_vocab: int = 20
    feat_dim: int = 40
    frames_min: int = 3
    frames_max: int = 6
    noise_sigma: float = 1.0
    switch_prob: float = 0.3
    len_min: int = 3
    len_max: int = 10
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.en_vocab < 1 or self.cn_vocab < 1:
            raise CorpusError("both languages need at least one token")
        if not 1 <= self.frames_min <= self.frames_max:
            raise CorpusError("frames range must satisfy 1 <= min <= max")
        if not 1 <= self.len_min <= self.len_max:
            raise CorpusError("length range must satisfy 1 <= min <= max")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise CorpusError("switch_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be non-negative")
        if self.feat_dim < 1:
            raise CorpusError("feat_dim must be positive")

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}


@dataclass
class ManifestEntry:
    utt_id: str
    path: str  # relative to the corpus directory
    tokens: list[int]
    frames: int


@dataclass
class Utterance:
    utt_id: str
    tokens: list[int]
    features: np.ndarray


def build_vocabulary(spec: SynthSpec) -> Vocabulary:
    en = [_EN_WORDS[i] if i < len(_EN_WORDS) else f"en{i}" for i in range(spec.en_vocab)]
    cn = [_CN_CHARS[i] if i < len(_CN_CHARS) else f"cn{i}" for i in range(spec.cn_vocab)]
    return Vocabulary(en + cn, [EN] * len(en) + [CN] * len(cn))


def _lang_ids(vocab: Vocabulary) -> dict[str, np.ndarray]:
    tags = np.array(vocab.langmap.tags[1:vocab.size + 1])
    return {lg: np.flatnonzero(tags == lg) + 1 for lg in (EN, CN)}


def synth_split(spec: SynthSpec, split: str) -> list[Utterance]:
    """Generate one split in memory; a pure function of ``spec``."""
    spec.validate()
    vocab = build_vocabulary(spec)
    protos = make_rng(spec.seed, 0).normal(size=(vocab.size + 1, spec.feat_dim))
    rng = make_rng(spec.seed, 1 + SPLITS.index(split))
    ids = _lang_ids(vocab)
    langs = (EN, CN)
    out = []
    for k in range(spec.counts()[split]):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        lang = int(rng.integers(2))
        tokens, frames = [], []
        for i in range(length):
            if i > 0 and rng.random() < spec.switch_prob:
                lang = 1 - lang
            pool = ids[langs[lang]]
            tok = int(pool[rng.integers(len(pool))])
            n = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            frames.append(protos[tok] + spec.noise_sigma * rng.normal(size=(n, spec.feat_dim)))
            tokens.append(tok)
        feats = np.concatenate(frames).astype(np.float32)
        out.append(Utterance(f"{split}-{k:05d}", tokens, feats))
    return out


def gen_corpus(spec: SynthSpec, out_dir) -> dict[str, list[ManifestEntry]]:
    """Write ``vocab.txt``, ``<split>.tsv`` manifests and ``feats/<utt>.natf``."""
    spec.validate()
    root = Path(out_dir)
    try:
        (root / "feats").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {root}: {exc}") from exc
    vocab = build_vocabulary(spec)
    vocab.write(root / "vocab.txt")
    manifests = {}
    for split in SPLITS:
        entries = []
        for utt in synth_split(spec, split):
            rel = f"feats/{utt.utt_id}.natf"
            write_features(root / rel, utt.features)
            entries.append(ManifestEntry(utt.utt_id, rel, utt.tokens, utt.features.shape[0]))
        write_manifest(root / f"{split}.tsv", entries, vocab)
        manifests[split] = entries
    return manifests


def write_manifest(path, entries: Sequence[ManifestEntry], vocab: Vocabulary) -> None:
    lines = [f"{e.utt_id}\t{e.path}\t{' '.join(vocab.decode(e.tokens))}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path, vocab: Vocabulary) -> list[ManifestEntry]:
    path = Path(path)
    entries, seen = [], set()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{n}: expected 3 tab-separated fields")
        utt, rel, text = parts
        if utt in seen:
            raise CorpusError(f"{path}:{n}: duplicate utterance id {utt!r}")
        seen.add(utt)
        frames = read_feature_header(path.parent / rel)[0]
        entries.append(ManifestEntry(utt, rel, vocab.encode(text.split()), frames))
    return entries


def load_split(corpus_dir, split: str, vocab: Vocabulary | None = None) -> list[Utterance]:
    root = Path(corpus_dir)
    vocab = vocab or Vocabulary.read(root / "vocab.txt")
    return [Utterance(e.utt_id, e.tokens, read_features(root / e.path))
            for e in read_manifest(root / f"{split}.tsv", vocab)]


def write_features(path, feats) -> None:
    x = np.asarray(feats)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise FeatureFormatError(f"refusing to write a {x.shape} feature matrix")
    if not np.all(np.isfinite(x)):
        raise FeatureFormatError("feature matrix contains non-finite values")
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, x.shape[0], x.shape[1]) + payload)


def _parse_header(buf: bytes, path) -> tuple[int, int]:
    if len(buf) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, frames, dim = _HEADER.unpack_from(buf)
    if magic != FEAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    return frames, dim


def read_feature_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        return _parse_header(fh.read(_HEADER.size), path)


def read_features(path) -> np.ndarray:
    """Load a ``(T, d)`` float32 matrix."""
    with open(path, "rb") as fh:
        buf = fh.read()
    frames, dim = _parse_header(buf, path)
    expected = _HEADER.size + 4 * frames * dim
    if len(buf) != expected:
        raise FeatureFormatError(f"{path}: payload is {len(buf) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(frames, dim).astype(np.float32)


def spec_augment(feats, time_masks: tuple[int, int], freq_masks: tuple[int, int],
                 rng: np.random.Generator, min_width: int = 0, record: list | None = None) -> np.ndarray:
    """Zero random time bands (rows) and frequency bands (columns).

    ``time_masks``/``freq_masks`` are ``(count, max_width)``; each band's
    width is uniform in ``[min_width, max_width]`` and its start uniform over
    the valid offsets.  Draws are appended to ``record`` as
    ``(axis, start, width)`` when given.
    """
    x = np.array(feats, copy=True)
    for axis, (count, max_w) in ((0, time_masks), (1, freq_masks)):
        if count == 0:
            continue
        size = x.shape[axis]
        if max_w > size or min_width > max_w:
            raise CorpusError(f"mask width range [{min_width}, {max_w}] invalid for axis of size {size}")
        for _ in range(count):
            w = int(rng.integers(min_width, max_w + 1))
            s = int(rng.integers(0, size - w + 1))
            if axis == 0:
                x[s:s + w, :] = 0
            else:
                x[:, s:s + w] = 0
            if record is not None:
                record.append((axis, s, w))
    return x
