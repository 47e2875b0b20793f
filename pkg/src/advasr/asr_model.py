"""Transformer encoder-decoder ASR model with conv subsampling and a CTC head.

The decoder is teacher-forced during training; its soft posterior rows double
as the generator output consumed by the adversarial critic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
from torch import nn

from .ctc import CtcInfeasibleError
from .ctc import ctc_loss as ctc_forward_loss
from .ctc import min_frames_required

if TYPE_CHECKING:
    from .corpus import Batch

BLANK_ID = 0
PAD_ID = 1
SOS_ID = 2
EOS_ID = 3

# two valid 3-wide stride-2 convolutions need at least 7 positions
MIN_FRAMES = 7


def subsampled_length(num_frames: int) -> int:
    """Output length of the two-conv subsampler for an input of `num_frames`."""
    if num_frames < MIN_FRAMES:
        raise ValueError(f"subsampling needs at least {MIN_FRAMES} frames, got {num_frames}")
    once = (num_frames - 3) // 2 + 1
    return (once - 3) // 2 + 1


@dataclass(frozen=True)
class AsrConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_att: int = 64
    d_ff: int = 128
    heads: int = 2
    vocab_size: int = 14
    dropout: float = 0.1
    label_smoothing: float = 0.1

    def __post_init__(self):
        if min(self.encoder_layers, self.decoder_layers) < 0:
            raise ValueError("layer counts must be >= 0")
        if min(self.d_att, self.d_ff, self.heads, self.vocab_size) < 1:
            raise ValueError("widths, heads and vocab size must be positive")
        if self.d_att % self.heads != 0:
            raise ValueError("d_att must be divisible by heads")
        if self.d_att % 2 != 0:
            raise ValueError("d_att must be even for sinusoidal encodings")
        if not 0 <= self.dropout < 1 or not 0 <= self.label_smoothing < 1:
            raise ValueError("dropout and label_smoothing must be in [0, 1)")


@dataclass
class EncoderOutput:
    states: torch.Tensor  # (B, n_sub_max, d_att)
    lengths: torch.Tensor  # (B,) long


def sinusoidal_encoding(length: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    inv = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe


class FeedForward(nn.Module):
    def __init__(self, d_att: int, d_ff: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(d_att, d_ff)
        self.w2 = nn.Linear(d_ff, d_att)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.w2(self.dropout(torch.relu(self.w1(x))))


class EncoderLayer(nn.Module):
    """Post-norm transformer layer: self-attention then position-wise FFN."""

    def __init__(self, cfg: AsrConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(cfg.d_att, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.ffn = FeedForward(cfg.d_att, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_att)
        self.norm2 = nn.LayerNorm(cfg.d_att)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask):
        a, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: AsrConfig):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(cfg.d_att, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(cfg.d_att, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.ffn = FeedForward(cfg.d_att, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_att)
        self.norm2 = nn.LayerNorm(cfg.d_att)
        self.norm3 = nn.LayerNorm(cfg.d_att)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, causal_mask, memory_key_padding_mask):
        a, _ = self.self_attn(x, x, x, attn_mask=causal_mask, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        a, _ = self.cross_attn(
            x, memory, memory, key_padding_mask=memory_key_padding_mask, need_weights=False
        )
        x = self.norm2(x + self.dropout(a))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x


class Subsampler(nn.Module):
    """Two valid 3x3 stride-2 convolutions over (time, freq), projected to d_att."""

    def __init__(self, feature_dim: int, d_att: int, dropout: float):
        super().__init__()
        if feature_dim < MIN_FRAMES:
            raise ValueError(f"feature_dim must be >= {MIN_FRAMES} for 3x3 stride-2 convs")
        self.conv1 = nn.Conv2d(1, d_att, kernel_size=3, stride=2)
        self.conv2 = nn.Conv2d(d_att, d_att, kernel_size=3, stride=2)
        freq_sub = subsampled_length(feature_dim)
        self.out = nn.Linear(d_att * freq_sub, d_att)
        self.dropout = nn.Dropout(dropout)
        self.d_att = d_att

    def forward(self, features: torch.Tensor, feature_lengths: torch.Tensor):
        if int(feature_lengths.min()) < MIN_FRAMES:
            raise ValueError(f"every item needs at least {MIN_FRAMES} frames")
        x = features.unsqueeze(1)  # (B, 1, T, F)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        x = self.out(x)
        x = x * math.sqrt(self.d_att) + sinusoidal_encoding(t, self.d_att, x.dtype)
        x = self.dropout(x)
        lengths = torch.tensor([subsampled_length(int(n)) for n in feature_lengths], dtype=torch.long)
        return x, lengths


class AsrModel(nn.Module):
    def __init__(self, cfg: AsrConfig, feature_dim: int):
        super().__init__()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.subsampler = Subsampler(feature_dim, cfg.d_att, cfg.dropout)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_att)
        self.embed_dropout = nn.Dropout(cfg.dropout)
        self.decoder_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.out_proj = nn.Linear(cfg.d_att, cfg.vocab_size)
        self.ctc_proj = nn.Linear(cfg.d_att, cfg.vocab_size)

    @staticmethod
    def _pad_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
        # True at padded positions
        return torch.arange(max_len).unsqueeze(0) >= lengths.unsqueeze(1)

    def subsample(self, features: torch.Tensor, feature_lengths: torch.Tensor):
        """Features (B, T, F) -> (X_0 (B, n_sub_max, d_att), n_sub lengths)."""
        return self.subsampler(features, feature_lengths)

    def encode(self, x0: torch.Tensor, lengths: torch.Tensor) -> EncoderOutput:
        """Run the encoder stack over subsampled features; zero layers is the identity."""
        mask = self._pad_mask(lengths, x0.shape[1])
        x = x0
        for layer in self.encoder_layers:
            x = layer(x, key_padding_mask=mask)
        return EncoderOutput(states=x, lengths=lengths)

    def encode_features(self, features: torch.Tensor, feature_lengths: torch.Tensor) -> EncoderOutput:
        x0, lengths = self.subsample(features, feature_lengths)
        return self.encode(x0, lengths)

    def decoder_logits(
        self, enc: EncoderOutput, targets: torch.Tensor, target_lengths: torch.Tensor
    ) -> torch.Tensor:
        """Teacher-forced logits (B, L_max+1, V); row t sees only targets < t.

        Row L_i is the end-of-sequence prediction for item i.
        """
        b, l_max = targets.shape
        for i in range(b):
            li = int(target_lengths[i])
            if li < 1:
                raise ValueError("every target must have at least one token")
            span = targets[i, :li]
            if bool((span == PAD_ID).any()):
                raise ValueError(f"target {i} contains pad inside its valid span")
        sos = torch.full((b, 1), SOS_ID, dtype=torch.long)
        dec_in = torch.cat([sos, targets], dim=1)  # (B, L_max+1)
        return self._run_decoder(enc, dec_in)

    def _run_decoder(self, enc: EncoderOutput, dec_in: torch.Tensor) -> torch.Tensor:
        x = self.embed(dec_in) * math.sqrt(self.cfg.d_att)
        x = x + sinusoidal_encoding(x.shape[1], self.cfg.d_att, x.dtype)
        x = self.embed_dropout(x)
        causal = torch.triu(torch.ones(x.shape[1], x.shape[1], dtype=torch.bool), diagonal=1)
        mem_mask = self._pad_mask(enc.lengths, enc.states.shape[1])
        for layer in self.decoder_layers:
            x = layer(x, enc.states, causal_mask=causal, memory_key_padding_mask=mem_mask)
        return self.out_proj(x)

    def next_token_log_probs(self, enc: EncoderOutput, prefixes: list[list[int]]) -> torch.Tensor:
        """Log-probabilities of the next token after each prefix: (n, V).

        All prefixes must have equal length; `enc` holds a single utterance and
        is broadcast across them.
        """
        if enc.states.shape[0] != 1:
            raise ValueError("expected encoder output for a single utterance")
        n = len(prefixes)
        if n == 0 or len({len(p) for p in prefixes}) != 1:
            raise ValueError("need >= 1 prefixes of equal length")
        dec_in = torch.tensor([[SOS_ID, *p] for p in prefixes], dtype=torch.long)
        states = enc.states.expand(n, -1, -1)
        lengths = enc.lengths.expand(n)
        logits = self._run_decoder(EncoderOutput(states=states, lengths=lengths), dec_in)
        return torch.log_softmax(logits[:, -1, :], dim=-1)

    def decoder_posteriors(
        self, enc: EncoderOutput, targets: torch.Tensor, target_lengths: torch.Tensor
    ) -> torch.Tensor:
        """Teacher-forced posterior rows (B, L_max+1, V); every row sums to 1."""
        return torch.softmax(self.decoder_logits(enc, targets, target_lengths), dim=-1)

    def ctc_log_probs(self, enc: EncoderOutput) -> torch.Tensor:
        return torch.log_softmax(self.ctc_proj(enc.states), dim=-1)

    def ctc_frame_posteriors(self, enc: EncoderOutput) -> torch.Tensor:
        return torch.softmax(self.ctc_proj(enc.states), dim=-1)


@dataclass
class AsrLossParts:
    total: torch.Tensor
    s2s: torch.Tensor  # (1 - alpha) * label-smoothed CE, batch mean of per-item sums
    ctc: torch.Tensor  # alpha * CTC negative log-likelihood, batch mean
    soft: torch.Tensor | None = None  # (B, L_max, V) posterior rows from the same forward


def _smoothed_cross_entropy(
    log_probs: torch.Tensor, targets_ext: torch.Tensor, valid: torch.Tensor, smoothing: float
) -> torch.Tensor:
    """Per-item CE sums over valid positions, averaged over the batch."""
    v = log_probs.shape[-1]
    picked = log_probs.gather(-1, targets_ext.unsqueeze(-1)).squeeze(-1)
    if smoothing > 0:
        off = smoothing / (v - 1)
        ce = -(1.0 - smoothing) * picked - off * (log_probs.sum(-1) - picked)
    else:
        ce = -picked
    ce = torch.where(valid, ce, torch.zeros((), dtype=ce.dtype))
    return ce.sum(dim=1).mean()


def asr_loss(
    model: AsrModel,
    batch: Batch,
    alpha: float,
    label_smoothing: float | None = None,
    with_soft_output: bool = False,
) -> AsrLossParts:
    """Joint loss: (1-alpha) * smoothed CE on decoder rows + alpha * CTC NLL.

    CE covers each item's content positions plus the eos row; padding is masked.
    With `with_soft_output` the parts also carry the soft transcription rows
    from the same decoder pass, so an adversarial term can reuse the forward.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    smoothing = model.cfg.label_smoothing if label_smoothing is None else label_smoothing
    enc = model.encode_features(batch.features, batch.feature_lengths)
    dtype = batch.features.dtype
    soft = None

    if alpha < 1 or with_soft_output:
        logits = model.decoder_logits(enc, batch.targets, batch.target_lengths)
        log_probs = torch.log_softmax(logits, dim=-1)
        if with_soft_output:
            soft = torch.softmax(logits[:, :-1, :], dim=-1)
    if alpha < 1:
        b, l_ext = batch.targets.shape[0], batch.targets.shape[1] + 1
        targets_ext = torch.full((b, l_ext), PAD_ID, dtype=torch.long)
        targets_ext[:, :-1] = batch.targets
        positions = torch.arange(l_ext).unsqueeze(0)
        targets_ext[positions == batch.target_lengths.unsqueeze(1)] = EOS_ID
        valid = positions <= batch.target_lengths.unsqueeze(1)
        ce = _smoothed_cross_entropy(log_probs, targets_ext, valid, smoothing)
        s2s = (1.0 - alpha) * ce
    else:
        s2s = torch.zeros((), dtype=dtype)

    if alpha > 0:
        frame_post = model.ctc_frame_posteriors(enc)
        losses = []
        for i in range(len(batch)):
            target = [int(t) for t in batch.targets[i, : int(batch.target_lengths[i])]]
            n_sub = int(enc.lengths[i])
            if n_sub < min_frames_required(target):
                raise CtcInfeasibleError(
                    f"utterance {batch.ids[i]!r}: {n_sub} subsampled frames cannot emit "
                    f"{len(target)} target tokens"
                )
            losses.append(ctc_forward_loss(frame_post[i, :n_sub], target))
        ctc = alpha * torch.stack(losses).mean().to(dtype)
    else:
        ctc = torch.zeros((), dtype=dtype)

    return AsrLossParts(total=s2s + ctc, s2s=s2s, ctc=ctc, soft=soft)


def soft_output(model: AsrModel, batch: Batch) -> torch.Tensor:
    """Teacher-forced soft transcriptions (B, L_max, V), length-aligned with the
    real targets; gradients flow back into the model."""
    enc = model.encode_features(batch.features, batch.feature_lengths)
    post = model.decoder_posteriors(enc, batch.targets, batch.target_lengths)
    return post[:, :-1, :]


def validation_accuracy(model: AsrModel, batch: Batch) -> float:
    """Fraction of teacher-forced argmax predictions matching the target tokens."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            pred = soft_output(model, batch).argmax(dim=-1)
    finally:
        model.train(was_training)
    positions = torch.arange(batch.targets.shape[1]).unsqueeze(0)
    valid = positions < batch.target_lengths.unsqueeze(1)
    hits = ((pred == batch.targets) & valid).sum()
    return float(hits) / float(valid.sum())
