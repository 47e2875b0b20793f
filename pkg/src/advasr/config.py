"""One declarative experiment document: corpus, model, training, decoding.

A config file overrides the toy defaults below; dotted command-line overrides
(`section.key=value`) are applied last. Unknown keys anywhere are rejected so
a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import yaml

from .asr_model import AsrConfig
from .corpus import NUM_RESERVED, CorpusConfig, SpecAugmentPolicy
from .decode import DecodeConfig
from .gan import DiscriminatorConfig, GanWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_AUGMENT_DEFAULTS = {
    "num_freq_masks": 1,
    "max_freq_width": 2,
    "num_time_masks": 1,
    "max_time_width": 3,
}

DEFAULTS: dict = {
    "output_dir": "runs/toy",
    "seed": 0,
    "corpus": {
        "num_content_tokens": 10,
        "feature_dim": 16,
        "min_transcript_len": 3,
        "max_transcript_len": 8,
        "min_frames_per_token": 5,
        "max_frames_per_token": 8,
        "noise_std": 0.3,
        "seed": 0,
        "train_size": 192,
        "dev_size": 24,
        "test_size": 24,
    },
    "asr": {
        "encoder_layers": 2,
        "decoder_layers": 2,
        "d_att": 64,
        "d_ff": 128,
        "heads": 2,
        "dropout": 0.1,
        "label_smoothing": 0.1,
    },
    "discriminator": {
        "projection_dim": 128,
        "conv_channels": 128,
        "kernel_size": 2,
        "stride": 1,
        "normalization": "batch",
    },
    "gan": {"adversarial": 0.0001, "penalty": 10.0},
    "pretrain": {
        "epochs": 80,
        "batch_size": 16,
        "accumulation": 1,
        "alpha": 0.3,
        "learning_rate": 0.0001,
        "beta1": 0.5,
        "beta2": 0.98,
        "adam_eps": 1e-9,
        "warmup": 100,
        "lr_scale": 0.15,
        "augment": dict(_AUGMENT_DEFAULTS),
    },
    "finetune": {
        "epochs": 40,
        "batch_size": 16,
        "accumulation": 1,
        "alpha": 0.3,
        "learning_rate": 0.0001,
        "beta1": 0.5,
        "beta2": 0.98,
        "adam_eps": 1e-9,
        "n_critic": 1,
        "augment": dict(_AUGMENT_DEFAULTS),
    },
    "decode": {
        "beam_size": 10,
        "ctc_weight": 0.4,
        "lm_weight": 0.3,
        "insertion_penalty": 1.0,
        "max_length": 12,
    },
    "average_k": 5,
}


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str
    seed: int
    corpus: CorpusConfig
    asr: AsrConfig
    discriminator: DiscriminatorConfig
    gan: GanWeights
    pretrain: TrainConfig
    finetune: TrainConfig
    decode: DecodeConfig
    average_k: int
    raw: dict  # the fully merged document, as snapshotted into the manifest

    @property
    def finetune_baseline(self) -> TrainConfig:
        return replace(self.finetune, phase="finetune_baseline")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _apply_set(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    dotted, _, raw_value = assignment.partition("=")
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw_value!r}: {exc}") from None
    keys = dotted.strip().split(".")
    node = doc
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict) and not isinstance(value, (dict, type(None))):
        raise ConfigError(f"{dotted} is a section, not a value")
    node[leaf] = value


def _augment_policy(section) -> SpecAugmentPolicy | None:
    if section is None:
        return None
    return SpecAugmentPolicy(**section)


def load_config(
    path: str | None = None, sets: tuple[str, ...] = (), seed: int | None = None
) -> ExperimentConfig:
    """Resolve defaults <- config file <- dotted overrides <- --seed flag."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = yaml.safe_load(open(path).read())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping")
        doc = _merge(doc, loaded)
    for assignment in sets:
        _apply_set(doc, assignment)
    if seed is not None:
        doc["seed"] = seed
    return build_config(doc)


def build_config(doc: dict) -> ExperimentConfig:
    try:
        corpus = CorpusConfig(**doc["corpus"])
        vocab_size = NUM_RESERVED + corpus.num_content_tokens
        asr = AsrConfig(vocab_size=vocab_size, **doc["asr"])
        disc = DiscriminatorConfig(vocab_size=vocab_size, **doc["discriminator"])
        gan = GanWeights(**doc["gan"])
        pre = dict(doc["pretrain"])
        pre["augment"] = _augment_policy(pre.get("augment"))
        pretrain = TrainConfig(phase="pretrain", seed=doc["seed"], gan=gan, **pre)
        fin = dict(doc["finetune"])
        fin["augment"] = _augment_policy(fin.get("augment"))
        finetune = TrainConfig(phase="finetune_gan", seed=doc["seed"], gan=gan, **fin)
        decode = DecodeConfig(**doc["decode"])
        average_k = int(doc["average_k"])
        if average_k < 1:
            raise ValueError("average_k must be >= 1")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(
        output_dir=str(doc["output_dir"]),
        seed=int(doc["seed"]),
        corpus=corpus,
        asr=asr,
        discriminator=disc,
        gan=gan,
        pretrain=pretrain,
        finetune=finetune,
        decode=decode,
        average_k=average_k,
        raw=doc,
    )
