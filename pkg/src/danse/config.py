"""Flat `key = value` run configuration shared by every CLI command.

One document carries corpus, model, and training settings plus paths.
Lines are `key = value`, `#` starts a comment, blank lines are ignored.
Unknown keys are rejected so typos cannot silently fall back to
defaults. `feature_dim` and `seed` each feed every component that
needs them; `lambda` sets the adversarial weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from danse.datagen import CorpusConfig
from danse.formats import FormatError
from danse.model import ExtractorConfig
from danse.training import TrainConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


# key -> (section, field name, converter)
_SCHEMA: dict[str, tuple[str, str, object]] = {
    # corpus
    "num_speakers_source": ("corpus", "num_speakers_source", int),
    "num_speakers_target": ("corpus", "num_speakers_target", int),
    "recordings_per_speaker": ("corpus", "recordings_per_speaker", int),
    "frames_min": ("corpus", "frames_min", int),
    "frames_max": ("corpus", "frames_max", int),
    "speaker_scale": ("corpus", "speaker_scale", float),
    "channel_scale": ("corpus", "channel_scale", float),
    "noise_scale": ("corpus", "noise_scale", float),
    "shift_scale": ("corpus", "shift_scale", float),
    "shift_offset": ("corpus", "shift_offset", float),
    # model
    "block_counts": ("model", "block_counts", _parse_int_tuple),
    "channel_widths": ("model", "channel_widths", _parse_int_tuple),
    "bottleneck_expansion": ("model", "bottleneck_expansion", int),
    "embedding_dim": ("model", "embedding_dim", int),
    "fc_hidden_dim": ("model", "fc_hidden_dim", int),
    "attention_dim": ("model", "attention_dim", int),
    "var_floor": ("model", "var_floor", float),
    # training
    "lambda": ("train", "lam", float),
    "pretrain_lr": ("train", "pretrain_lr", float),
    "pretrain_anneal_after": ("train", "pretrain_anneal_after", _parse_int_tuple),
    "pretrain_epochs": ("train", "pretrain_epochs", int),
    "dat_lr_classifier": ("train", "dat_lr_classifier", float),
    "dat_lr_extractor": ("train", "dat_lr_extractor", float),
    "dat_lr_discriminator": ("train", "dat_lr_discriminator", float),
    "batch_size": ("train", "batch_size", int),
    "max_epochs": ("train", "max_epochs", int),
    "patience": ("train", "patience", int),
    "margin": ("train", "margin", float),
    "scale": ("train", "scale", float),
    "chunks_per_recording": ("train", "chunks_per_recording", int),
    # shared
    "feature_dim": ("shared", "feature_dim", int),
    "seed": ("shared", "seed", int),
    # heads and paths
    "classifier_hidden": ("top", "classifier_hidden", int),
    "discriminator_hidden": ("top", "discriminator_hidden", int),
    "workdir": ("top", "workdir", str),
    "manifest": ("top", "manifest", str),
    "trials": ("top", "trials", str),
}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier_hidden: int = 128
    discriminator_hidden: int = 256
    workdir: str = ""
    manifest: str = "manifest.txt"
    trials: str = "trials.txt"


def parse_flat_file(path) -> dict[str, str]:
    """Raw key-value pairs from a flat config document."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise FormatError(f"{path}:{lineno}: empty key or value")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_run_config(path=None) -> RunConfig:
    """Typed RunConfig from a flat file; missing keys keep defaults."""
    raw = parse_flat_file(path) if path is not None else {}
    sections: dict[str, dict] = {"corpus": {}, "model": {}, "train": {}, "top": {}}
    for key, text in raw.items():
        if key not in _SCHEMA:
            raise FormatError(f"{path}: unknown config key {key!r}")
        section, name, conv = _SCHEMA[key]
        try:
            value = conv(text)
        except ValueError as exc:
            raise FormatError(f"{path}: bad value for {key!r}: {text!r}") from exc
        if section == "shared":
            sections["corpus"][name] = value
            other = "model" if name == "feature_dim" else "train"
            sections[other][name] = value
        else:
            sections[section][name] = value
    try:
        return RunConfig(
            corpus=CorpusConfig(**sections["corpus"]),
            model=ExtractorConfig(**sections["model"]),
            train=TrainConfig(**sections["train"]),
            **sections["top"],
        )
    except ValueError as exc:
        raise FormatError(f"{path}: invalid configuration: {exc}") from exc


def resolved_lines(cfg: RunConfig) -> list[str]:
    """The fully resolved configuration, one `key = value` line per
    schema key in schema order, suitable for the run log."""
    values = {
        "feature_dim": cfg.corpus.feature_dim,
        "seed": cfg.corpus.seed,
        "classifier_hidden": cfg.classifier_hidden,
        "discriminator_hidden": cfg.discriminator_hidden,
        "workdir": cfg.workdir,
        "manifest": cfg.manifest,
        "trials": cfg.trials,
    }
    out = []
    for key, (section, name, _) in _SCHEMA.items():
        if section == "corpus":
            v = getattr(cfg.corpus, name)
        elif section == "model":
            v = getattr(cfg.model, name)
        elif section == "train":
            v = getattr(cfg.train, name)
        else:
            v = values[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"{key} = {v}")
    return out
