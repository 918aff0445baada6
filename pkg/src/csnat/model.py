"""Transformer encoder with a CTC head and a CMLM or causal decoder.

Everything runs on padded batches: features ``(B, T, d)`` with a frame
length per utterance, decoder tokens ``(B, N)`` with a token length per
utterance.  Padded keys are excluded from attention through an additive
mask; padded queries produce values that callers must ignore.

Output columns: the CTC head scores ``[blank, 1..V]``; the CMLM decoder
scores ids ``1..V`` in columns ``0..V-1``; the causal decoder adds EOS as
column ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Checkpoint, Tensor

ATTN_MASK_VALUE = -1e9
CMLM, CAUSAL = "cmlm", "causal"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 40
    feat_dim: int = 40
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    decoder_mode: str = CMLM

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ModelError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")
        if self.decoder_mode not in (CMLM, CAUSAL):
            raise ModelError(f"unknown decoder mode {self.decoder_mode!r}")
        if self.vocab_size < 1:
            raise ModelError("vocab_size must be positive")

    blank_id = 0

    @property
    def mask_id(self) -> int:
        return self.vocab_size + 1

    @property
    def eos_id(self) -> int:
        return self.vocab_size + 2

    @property
    def dec_out_dim(self) -> int:
        return self.vocab_size + (1 if self.decoder_mode == CAUSAL else 0)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    return pe


def key_padding_mask(lengths: Sequence[int], width: int) -> np.ndarray:
    """Additive ``(B, 1, 1, width)`` mask hiding keys past each length."""
    lens = np.asarray(lengths)[:, None]
    hide = np.arange(width)[None, :] >= lens
    return np.where(hide, ATTN_MASK_VALUE, 0.0)[:, None, None, :]


def causal_mask(width: int) -> np.ndarray:
    return np.triu(np.full((width, width), ATTN_MASK_VALUE), k=1)[None, None]


class Transformer:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init(nx.make_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _linear(self, rng, name, n_in, n_out):
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.params[f"{name}.w"] = nx.parameter(rng.uniform(-bound, bound, (n_in, n_out)), f"{name}.w")
        self.params[f"{name}.b"] = nx.parameter(np.zeros(n_out), f"{name}.b")

    def _norm(self, name, dim):
        self.params[f"{name}.g"] = nx.parameter(np.ones(dim), f"{name}.g")
        self.params[f"{name}.b"] = nx.parameter(np.zeros(dim), f"{name}.b")

    def _attn(self, rng, name, dim):
        for part in ("q", "k", "v", "o"):
            self._linear(rng, f"{name}.{part}", dim, dim)

    def _init(self, rng):
        c = self.config
        D = c.d_model
        self._linear(rng, "enc.in", c.feat_dim, D)
        for i in range(c.enc_layers):
            p = f"enc.{i}"
            self._norm(f"{p}.ln1", D)
            self._attn(rng, f"{p}.att", D)
            self._norm(f"{p}.ln2", D)
            self._linear(rng, f"{p}.ff1", D, c.ffn_dim)
            self._linear(rng, f"{p}.ff2", c.ffn_dim, D)
        self._norm("enc.ln", D)
        self._linear(rng, "ctc", D, c.vocab_size + 1)

        n_emb = c.vocab_size + 3
        self.params["dec.emb"] = nx.parameter(rng.normal(0.0, D ** -0.5, (n_emb, D)), "dec.emb")
        for i in range(c.dec_layers):
            p = f"dec.{i}"
            self._norm(f"{p}.ln1", D)
            self._attn(rng, f"{p}.self", D)
            self._norm(f"{p}.ln2", D)
            self._attn(rng, f"{p}.src", D)
            self._norm(f"{p}.ln3", D)
            self._linear(rng, f"{p}.ff1", D, c.ffn_dim)
            self._linear(rng, f"{p}.ff2", c.ffn_dim, D)
        self._norm("dec.ln", D)
        self._linear(rng, "dec.out", D, c.dec_out_dim)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def checkpoint(self, step: int = 0, epoch: int = 0) -> Checkpoint:
        return Checkpoint(self.state(), step=step, epoch=epoch)

    def load(self, ckpt: Checkpoint) -> None:
        got = ckpt.params
        if set(got) != set(self.params):
            missing = sorted(set(self.params) - set(got))
            extra = sorted(set(got) - set(self.params))
            raise ModelError(f"checkpoint names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for k, p in self.params.items():
            if got[k].shape != p.shape:
                raise ModelError(f"{k}: checkpoint shape {got[k].shape} != model shape {p.shape}")
        for k, p in self.params.items():
            p.data = np.array(got[k], dtype=nx.DTYPE)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks ----------------------------------------------------

    def _lin(self, x, name):
        return nx.add(nx.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _ln(self, x, name):
        return nx.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x, training, rng):
        return nx.dropout(x, self.config.dropout, rng, training)

    def _mha(self, name, xq, xkv, mask, training, rng):
        c = self.config
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]
        H, dh = c.heads, D // c.heads
        q = nx.transpose(nx.reshape(self._lin(xq, f"{name}.q"), (B, Tq, H, dh)), (0, 2, 1, 3))
        k = nx.transpose(nx.reshape(self._lin(xkv, f"{name}.k"), (B, Tk, H, dh)), (0, 2, 3, 1))
        v = nx.transpose(nx.reshape(self._lin(xkv, f"{name}.v"), (B, Tk, H, dh)), (0, 2, 1, 3))
        scores = nx.add(nx.mul(nx.matmul(q, k), dh ** -0.5), mask)
        att = self._drop(nx.softmax(scores), training, rng)
        ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, Tq, D))
        return self._lin(ctx, f"{name}.o")

    def _ffn(self, x, name, training, rng):
        h = self._drop(nx.relu(self._lin(x, f"{name}.ff1")), training, rng)
        return self._lin(h, f"{name}.ff2")

    # -- public API ---------------------------------------------------------

    def encode(self, feats, frame_lens: Sequence[int] | None = None, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states ``(B, T, d_model)``; a 2-D input is treated as B=1."""
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        if x.ndim == 2:
            x = nx.reshape(x, (1,) + x.shape)
        B, T, d = x.shape
        if d != self.config.feat_dim:
            raise ModelError(f"feature dim {d} does not match config feat_dim {self.config.feat_dim}")
        if T < 1:
            raise ModelError("encode needs at least one frame")
        lens = [T] * B if frame_lens is None else list(frame_lens)
        mask = key_padding_mask(lens, T)
        h = nx.add(self._lin(x, "enc.in"), positional_encoding(T, self.config.d_model))
        h = self._drop(h, training, rng)
        for i in range(self.config.enc_layers):
            p = f"enc.{i}"
            y = self._ln(h, f"{p}.ln1")
            h = nx.add(h, self._drop(self._mha(f"{p}.att", y, y, mask, training, rng), training, rng))
            h = nx.add(h, self._drop(self._ffn(self._ln(h, f"{p}.ln2"), p, training, rng), training, rng))
        return self._ln(h, "enc.ln")

    def ctc_head(self, hidden: Tensor) -> Tensor:
        """Per-frame log-distribution over ``[blank, 1..V]``."""
        return nx.log_softmax(self._lin(hidden, "ctc"))

    def _decoder(self, tokens: np.ndarray, hidden: Tensor, src_lens, self_mask, training, rng) -> Tensor:
        c = self.config
        B, N = tokens.shape
        if tokens.size and (tokens.min() < 0 or tokens.max() > c.eos_id):
            raise ModelError("decoder input contains an unknown token id")
        emb = nx.embedding(self.params["dec.emb"], tokens)
        x = nx.add(nx.mul(emb, np.sqrt(c.d_model)), positional_encoding(N, c.d_model))
        x = self._drop(x, training, rng)
        T = hidden.shape[1]
        src_mask = key_padding_mask([T] * B if src_lens is None else src_lens, T)
        for i in range(c.dec_layers):
            p = f"dec.{i}"
            y = self._ln(x, f"{p}.ln1")
            x = nx.add(x, self._drop(self._mha(f"{p}.self", y, y, self_mask, training, rng), training, rng))
            y = self._ln(x, f"{p}.ln2")
            x = nx.add(x, self._drop(self._mha(f"{p}.src", y, hidden, src_mask, training, rng), training, rng))
            x = nx.add(x, self._drop(self._ffn(self._ln(x, f"{p}.ln3"), p, training, rng), training, rng))
        return nx.log_softmax(self._lin(self._ln(x, "dec.ln"), "dec.out"))

    def cmlm_decode(self, tokens, hidden: Tensor, src_lens=None, tgt_lens=None,
                    training: bool = False, rng=None) -> Tensor:
        """Bidirectional decoder pass; ``(B, N, V)`` log-distributions.

        ``tokens`` may contain the MASK id; every position gets a distribution.
        """
        if self.config.decoder_mode != CMLM:
            raise ModelError("cmlm_decode needs a model in cmlm mode")
        tok = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tok.shape[1] < 1:
            raise ModelError("cmlm_decode needs at least one token")
        lens = [tok.shape[1]] * tok.shape[0] if tgt_lens is None else tgt_lens
        return self._decoder(tok, hidden, src_lens, key_padding_mask(lens, tok.shape[1]), training, rng)

    def causal_logits(self, tokens, hidden: Tensor, src_lens=None, training: bool = False, rng=None) -> Tensor:
        """Teacher-forced causal pass: ``(B, L, V+1)`` next-token log-distributions.

        Row ``i`` conditions on ``tokens[:, :i+1]`` only.  Padding sits after
        each sequence's end, so the causal mask already hides it.
        """
        if self.config.decoder_mode != CAUSAL:
            raise ModelError("causal decoding needs a model in causal mode")
        tok = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        return self._decoder(tok, hidden, src_lens, causal_mask(tok.shape[1]), training, rng)

    def causal_decode(self, prefix: Sequence[int], hidden: Tensor) -> np.ndarray:
        """Log-distribution over ``1..V`` plus EOS for the token after ``prefix``."""
        tokens = [self.config.eos_id] + [int(t) for t in prefix]
        with nx.no_grad():
            out = self.causal_logits([tokens], hidden)
        return out.data[0, -1]


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    if not checkpoints:
        raise ModelError("need at least one checkpoint to average")
    first = checkpoints[0]
    for ck in checkpoints[1:]:
        if set(ck.params) != set(first.params):
            raise ModelError("checkpoints have different parameter names")
        for k, v in ck.params.items():
            if v.shape != first.params[k].shape:
                raise ModelError(f"{k}: shape mismatch {v.shape} vs {first.params[k].shape}")
    n = len(checkpoints)
    avg = {k: sum(ck.params[k] for ck in checkpoints) / n for k in first.params}
    last = checkpoints[-1]
    return Checkpoint(avg, step=last.step, epoch=last.epoch)


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
