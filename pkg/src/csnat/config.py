"""Flat ``key = value`` run configuration.

Unknown keys are rejected.  :func:`write_snapshot` records every resolved
value and marks whether its default comes from the published setup or is a
repo choice.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .corpus import CorpusError, SynthSpec
from .decode import DecodeConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


MASK_STRATEGIES = ("R", "C", "E", "M", "S", "F")
NBEST_MODES = ("output", "input")


@dataclass
class RunConfig:
    # paths
    corpus_dir: str = "corpus"
    out_dir: str = "exp"
    init_checkpoint: str = ""
    checkpoint: str = ""
    split: str = "test"
    hyp_file: str = ""
    nbest_log: str = ""
    # synthetic corpus
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
    # model
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    decoder_mode: str = "cmlm"
    # training
    mask_strategy: str = "R"
    alpha: float = 0.3
    gamma: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    warmup: int = 1000
    lr_scale: float = 1.0
    grad_clip: float = 5.0
    avg_last: int = 5
    mwe_epochs: int = 5
    nbest: int = 4
    nbest_mode: str = "input"
    sa_time_masks: int = 0
    sa_time_width: int = 0
    sa_freq_masks: int = 0
    sa_freq_width: int = 0
    seed: int = 0
    # decoding
    threshold: float = 0.9
    max_iterations: int = 10
    beam_size: int = 10
    max_len_factor: float = 1.0
    single_thread: bool = True
    workers: int = 1

    def validate(self) -> "RunConfig":
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"mask_strategy must be one of {MASK_STRATEGIES}")
        if self.nbest_mode not in NBEST_MODES:
            raise ConfigError(f"nbest_mode must be one of {NBEST_MODES}")
        if self.split not in ("train", "valid", "test"):
            raise ConfigError("split must be train, valid or test")
        for name in ("epochs", "batch_size", "warmup", "avg_last", "mwe_epochs", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.nbest < 2:
            raise ConfigError("nbest must be >= 2")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("alpha and gamma must lie in [0, 1]")
        try:
            self.synth_spec().validate()
            self.decode_config()
            ModelConfig(vocab_size=1, feat_dim=self.feat_dim, enc_layers=self.enc_layers,
                        dec_layers=self.dec_layers, d_model=self.d_model, heads=self.heads,
                        ffn_dim=self.ffn_dim, dropout=self.dropout, decoder_mode=self.decoder_mode)
        except (ValueError, CorpusError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def synth_spec(self) -> SynthSpec:
        names = {f.name for f in fields(SynthSpec)}
        kw = {k: getattr(self, k) for k in names if k != "seed"}
        return SynthSpec(seed=self.seed, **kw)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, feat_dim=self.feat_dim, enc_layers=self.enc_layers,
                           dec_layers=self.dec_layers, d_model=self.d_model, heads=self.heads,
                           ffn_dim=self.ffn_dim, dropout=self.dropout, decoder_mode=self.decoder_mode)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(threshold=self.threshold, max_iterations=self.max_iterations,
                            beam_size=self.beam_size, max_len_factor=self.max_len_factor)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


# defaults taken from the published setup; everything else is a repo default
PUBLISHED_DEFAULTS = {
    "dropout": "0.1 dropout",
    "heads": "4-head attention",
    "alpha": "CTC weight 0.3",
    "gamma": "MWE interpolation 0.01",
    "avg_last": "average of last 5 epochs",
    "mwe_epochs": "5 MWE epochs",
    "nbest": "4-best lists",
    "threshold": "mask CTC posteriors below 0.9",
    "max_iterations": "at most 10 iterations",
    "beam_size": "AT beam 10",
}


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    types = _field_types()
    changes = {}
    for key, raw in items.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(cfg, **changes).validate()


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    items = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in items:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        items[key] = value
    return apply_overrides(base or RunConfig(), items)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        src = PUBLISHED_DEFAULTS.get(f.name)
        note = f"published: {src}" if src else "repo default"
        lines.append(f"{f.name} = {value}  # {note}")
    return "\n".join(lines) + "\n"


def write_snapshot(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_config(cfg), encoding="utf-8")
