"""Synthetic speech-like corpus: vocabulary, generation, batching, masking."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .asr_model import MIN_FRAMES, subsampled_length

# Reserved token ids, fixed package-wide. Blank must stay 0 (CTC convention).
BLANK_ID = 0
PAD_ID = 1
SOS_ID = 2
EOS_ID = 3
NUM_RESERVED = 4

_CONTENT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"

CORPUS_FORMAT = "advasr-corpus-v1"


@dataclass(frozen=True)
class Vocab:
    """Symbol table with reserved blank/pad/sos/eos ids followed by content tokens."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(self.symbols) < NUM_RESERVED + 1:
            raise ValueError("vocab needs at least one content token")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocab symbols must be unique")

    @classmethod
    def build(cls, num_content_tokens: int) -> Vocab:
        if not 1 <= num_content_tokens <= len(_CONTENT_ALPHABET):
            raise ValueError(
                f"num_content_tokens must be in [1, {len(_CONTENT_ALPHABET)}]"
            )
        reserved = ("<blank>", "<pad>", "<sos>", "<eos>")
        return cls(reserved + tuple(_CONTENT_ALPHABET[:num_content_tokens]))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def content_ids(self) -> range:
        return range(NUM_RESERVED, len(self.symbols))

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def sos_id(self) -> int:
        return SOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    def tokenize(self, text: str) -> list[int]:
        """Map a string to content-token ids. Unknown symbols are an error."""
        table = {s: i for i, s in enumerate(self.symbols) if i >= NUM_RESERVED}
        ids = []
        for ch in text:
            if ch not in table:
                raise ValueError(f"symbol {ch!r} not in vocabulary")
            ids.append(table[ch])
        return ids

    def detokenize(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if not NUM_RESERVED <= i < len(self.symbols):
                raise ValueError(f"id {i} is reserved or out of range")
            out.append(self.symbols[i])
        return "".join(out)


@dataclass(frozen=True)
class Utterance:
    id: str
    features: np.ndarray  # (T, F) float32
    transcript: list[int]  # content-token ids, length >= 1

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class CorpusConfig:
    num_content_tokens: int = 10
    feature_dim: int = 16
    min_transcript_len: int = 3
    max_transcript_len: int = 8
    min_frames_per_token: int = 5
    max_frames_per_token: int = 8
    noise_std: float = 0.3
    seed: int = 0
    train_size: int = 96
    dev_size: int = 24
    test_size: int = 24

    def __post_init__(self):
        counts = (
            self.num_content_tokens,
            self.feature_dim,
            self.min_transcript_len,
            self.max_transcript_len,
            self.min_frames_per_token,
            self.max_frames_per_token,
            self.train_size,
            self.dev_size,
            self.test_size,
        )
        if any(c < 1 for c in counts):
            raise ValueError("all corpus counts must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.min_transcript_len > self.max_transcript_len:
            raise ValueError("min_transcript_len > max_transcript_len")
        if self.min_frames_per_token > self.max_frames_per_token:
            raise ValueError("min_frames_per_token > max_frames_per_token")
        if self.feature_dim < MIN_FRAMES:
            # the 3x3 stride-2 subsampling convolutions also bind the feature axis
            raise ValueError(f"feature_dim must be >= {MIN_FRAMES}")
        for length in range(self.min_transcript_len, self.max_transcript_len + 1):
            frames = length * self.min_frames_per_token
            if frames < MIN_FRAMES or subsampled_length(frames) < length:
                raise ValueError(
                    f"infeasible config: a length-{length} transcript at "
                    f"{self.min_frames_per_token} frames/token subsamples to "
                    "fewer positions than target tokens"
                )


@dataclass(frozen=True)
class CorpusSplits:
    vocab: Vocab
    config: CorpusConfig
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]

    def split(self, name: str) -> list[Utterance]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def synthesize_features(
    transcript: list[int],
    prototypes: np.ndarray,
    frames_per_token: list[int],
    noise_std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stack each token's prototype row `r` times and add Gaussian noise."""
    if len(transcript) != len(frames_per_token):
        raise ValueError("one frame count per transcript token required")
    rows = [
        np.repeat(prototypes[t - NUM_RESERVED][None, :], r, axis=0)
        for t, r in zip(transcript, frames_per_token)
    ]
    feats = np.concatenate(rows, axis=0)
    if noise_std > 0:
        feats = feats + rng.normal(0.0, noise_std, size=feats.shape)
    return feats.astype(np.float32)


def _sample_transcript(cfg: CorpusConfig, vocab: Vocab, rng: np.random.Generator) -> list[int]:
    # adjacent repeats are excluded so n_sub >= L is the exact CTC feasibility bound
    length = int(rng.integers(cfg.min_transcript_len, cfg.max_transcript_len + 1))
    ids = list(vocab.content_ids)
    transcript: list[int] = []
    for _ in range(length):
        choices = [i for i in ids if not transcript or i != transcript[-1]]
        transcript.append(choices[int(rng.integers(len(choices)))])
    return transcript


def generate_corpus(cfg: CorpusConfig) -> CorpusSplits:
    """Generate the deterministic synthetic corpus for `cfg`.

    Every token has a fixed prototype feature vector drawn once from the seeded
    generator; an utterance is the per-token stack of prototypes plus i.i.d.
    Gaussian noise. Identical configs produce bit-identical corpora.
    """
    vocab = Vocab.build(cfg.num_content_tokens)
    rng = np.random.default_rng(cfg.seed)
    prototypes = rng.normal(0.0, 1.0, size=(cfg.num_content_tokens, cfg.feature_dim))

    splits: dict[str, list[Utterance]] = {}
    for split, size in (("train", cfg.train_size), ("dev", cfg.dev_size), ("test", cfg.test_size)):
        items = []
        for i in range(size):
            transcript = _sample_transcript(cfg, vocab, rng)
            frames = [
                int(rng.integers(cfg.min_frames_per_token, cfg.max_frames_per_token + 1))
                for _ in transcript
            ]
            feats = synthesize_features(transcript, prototypes, frames, cfg.noise_std, rng)
            assert subsampled_length(feats.shape[0]) >= len(transcript)
            items.append(Utterance(id=f"{split}-{i:04d}", features=feats, transcript=transcript))
        splits[split] = items
    return CorpusSplits(vocab=vocab, config=cfg, **splits)


@dataclass
class Batch:
    """Padded batch of utterances plus the exact one-hot rows for real targets."""

    ids: list[str]
    features: torch.Tensor  # (B, T_max, F), zero padded
    feature_lengths: torch.Tensor  # (B,) long
    targets: torch.Tensor  # (B, L_max) long, PAD_ID padded
    target_lengths: torch.Tensor  # (B,) long
    real_onehot: torch.Tensor  # (B, L_max, V); zero rows at padding

    def __len__(self) -> int:
        return len(self.ids)

    def to(self, dtype: torch.dtype) -> Batch:
        return Batch(
            ids=self.ids,
            features=self.features.to(dtype),
            feature_lengths=self.feature_lengths,
            targets=self.targets,
            target_lengths=self.target_lengths,
            real_onehot=self.real_onehot.to(dtype),
        )


def make_batch(items: list[Utterance], vocab: Vocab, dtype: torch.dtype = torch.float32) -> Batch:
    if not items:
        raise ValueError("cannot batch an empty item list")
    t_max = max(u.num_frames for u in items)
    l_max = max(len(u.transcript) for u in items)
    fdim = items[0].features.shape[1]

    feats = torch.zeros(len(items), t_max, fdim, dtype=dtype)
    targets = torch.full((len(items), l_max), PAD_ID, dtype=torch.long)
    onehot = torch.zeros(len(items), l_max, vocab.size, dtype=dtype)
    flens = torch.zeros(len(items), dtype=torch.long)
    tlens = torch.zeros(len(items), dtype=torch.long)
    for b, u in enumerate(items):
        feats[b, : u.num_frames] = torch.from_numpy(u.features).to(dtype)
        flens[b] = u.num_frames
        tlens[b] = len(u.transcript)
        for pos, tok in enumerate(u.transcript):
            targets[b, pos] = tok
            onehot[b, pos, tok] = 1.0
    return Batch(
        ids=[u.id for u in items],
        features=feats,
        feature_lengths=flens,
        targets=targets,
        target_lengths=tlens,
        real_onehot=onehot,
    )


@dataclass(frozen=True)
class SpecAugmentPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 3
    num_time_masks: int = 2
    max_time_width: int = 5

    def __post_init__(self):
        if min(self.num_freq_masks, self.max_freq_width, self.num_time_masks, self.max_time_width) < 0:
            raise ValueError("mask counts and widths must be >= 0")


def apply_freq_mask(features: np.ndarray, start: int, width: int) -> np.ndarray:
    """Zero `width` feature columns from `start`, clamped to the matrix."""
    out = features.copy()
    width = min(max(width, 0), out.shape[1])
    start = min(max(start, 0), out.shape[1] - width)
    out[:, start : start + width] = 0.0
    return out


def apply_time_mask(features: np.ndarray, start: int, width: int) -> np.ndarray:
    out = features.copy()
    width = min(max(width, 0), out.shape[0])
    start = min(max(start, 0), out.shape[0] - width)
    out[start : start + width, :] = 0.0
    return out


def spec_augment(
    features: np.ndarray, policy: SpecAugmentPolicy, rng: np.random.Generator
) -> np.ndarray:
    """Apply seeded frequency/time masking; masked cells become 0, shape unchanged."""
    out = features.copy()
    n_frames, n_freq = out.shape
    for _ in range(policy.num_freq_masks):
        width = min(int(rng.integers(0, policy.max_freq_width + 1)), n_freq)
        start = int(rng.integers(0, n_freq - width + 1))
        out = apply_freq_mask(out, start, width)
    for _ in range(policy.num_time_masks):
        width = min(int(rng.integers(0, policy.max_time_width + 1)), n_frames)
        start = int(rng.integers(0, n_frames - width + 1))
        out = apply_time_mask(out, start, width)
    return out


def _config_to_dict(cfg: CorpusConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def save_corpus(path: str | Path, splits: CorpusSplits) -> None:
    """Write the corpus manifest: a config header line, then one record per utterance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        header = {"format": CORPUS_FORMAT, "config": _config_to_dict(splits.config)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for split in ("train", "dev", "test"):
            for u in splits.split(split):
                rec = {
                    "id": u.id,
                    "split": split,
                    "transcript": splits.vocab.detokenize(u.transcript),
                    "features": [[float(x) for x in row] for row in u.features],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> CorpusSplits:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"unsupported corpus format: {header.get('format')!r}")
        cfg = CorpusConfig(**header["config"])
        vocab = Vocab.build(cfg.num_content_tokens)
        splits: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
        for line in f:
            rec = json.loads(line)
            feats = np.asarray(rec["features"], dtype=np.float32)
            splits[rec["split"]].append(
                Utterance(id=rec["id"], features=feats, transcript=vocab.tokenize(rec["transcript"]))
            )
    return CorpusSplits(vocab=vocab, config=cfg, **splits)


def corpus_fingerprint(splits: CorpusSplits) -> str:
    """Deterministic digest of the corpus content, used to tie reports to data."""
    h = hashlib.sha256()
    h.update(json.dumps(_config_to_dict(splits.config), sort_keys=True).encode())
    for split in ("train", "dev", "test"):
        for u in splits.split(split):
            h.update(u.id.encode())
            h.update(json.dumps(u.transcript).encode())
            h.update(u.features.tobytes())
    return h.hexdigest()
