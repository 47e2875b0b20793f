"""Wasserstein critic with gradient penalty for transcription distributions.

The critic scores length-L sequences of rows on the vocabulary simplex: exact
one-hot rows for real transcripts, soft posterior rows for model output.
Padded time steps never influence scores, statistics, or penalty norms.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class GanWeights:
    adversarial: float = 0.0001  # weight on both critic expectation terms and the generator term
    penalty: float = 10.0

    def __post_init__(self):
        if self.adversarial < 0 or self.penalty < 0:
            raise ValueError("gan weights must be >= 0")


@dataclass(frozen=True)
class DiscriminatorConfig:
    vocab_size: int
    projection_dim: int = 128
    conv_channels: int = 128
    kernel_size: int = 2
    stride: int = 1
    normalization: str = "batch"  # "batch" couples items; "layer" is batch-independent

    def __post_init__(self):
        if min(self.vocab_size, self.projection_dim, self.conv_channels) < 1:
            raise ValueError("widths must be positive")
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        if self.normalization not in ("batch", "layer"):
            raise ValueError("normalization must be 'batch' or 'layer'")

    @property
    def min_valid_length(self) -> int:
        # two valid convolutions each consume (kernel_size - 1) positions
        return 2 * (self.kernel_size - 1) + 1


def _valid_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len).unsqueeze(0) < lengths.unsqueeze(1)


class MaskedBatchNorm(nn.Module):
    """Batch normalization over (batch, time) using only valid positions.

    Statistics always come from the current batch; the critic is only ever
    evaluated inside its own training losses, so no running averages are kept.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T), valid: (B, T)
        m = valid.unsqueeze(1).to(x.dtype)
        count = m.sum()
        mean = (x * m).sum(dim=(0, 2)) / count
        var = ((x - mean.view(1, -1, 1)) ** 2 * m).sum(dim=(0, 2)) / count
        xhat = (x - mean.view(1, -1, 1)) / torch.sqrt(var.view(1, -1, 1) + self.eps)
        return xhat * self.weight.view(1, -1, 1) + self.bias.view(1, -1, 1)


class ChannelLayerNorm(nn.Module):
    """Per-position layer norm over channels; no cross-item coupling."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class Discriminator(nn.Module):
    """Projection, two Conv1D feature extractors, masked time-mean, scalar head."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        norm_cls = MaskedBatchNorm if cfg.normalization == "batch" else ChannelLayerNorm
        self.proj = nn.Linear(cfg.vocab_size, cfg.projection_dim)
        self.conv1 = nn.Conv1d(cfg.projection_dim, cfg.conv_channels, cfg.kernel_size, cfg.stride)
        self.norm1 = norm_cls(cfg.conv_channels)
        self.conv2 = nn.Conv1d(cfg.conv_channels, cfg.conv_channels, cfg.kernel_size, cfg.stride)
        self.norm2 = norm_cls(cfg.conv_channels)
        self.act = nn.LeakyReLU(0.2)
        self.head = nn.Linear(cfg.conv_channels, 1)

    def forward(self, yseq: torch.Tensor, valid_lengths: torch.Tensor) -> torch.Tensor:
        """Score a batch of distribution sequences: (B, L, V) + lengths -> (B,)."""
        if yseq.ndim != 3 or yseq.shape[-1] != self.cfg.vocab_size:
            raise ValueError(f"expected (B, L, {self.cfg.vocab_size}) input")
        if int(valid_lengths.min()) < self.cfg.min_valid_length:
            raise ValueError(
                f"valid_length must be >= {self.cfg.min_valid_length} for two "
                f"kernel-{self.cfg.kernel_size} convolutions"
            )
        consumed = self.cfg.kernel_size - 1
        x = self.proj(yseq).transpose(1, 2)  # (B, C, L)

        x = self.conv1(x)
        valid = _valid_mask(valid_lengths - consumed, x.shape[-1])
        x = x * valid.unsqueeze(1).to(x.dtype)
        x = self.act(self.norm1(x, valid)) * valid.unsqueeze(1).to(x.dtype)

        x = self.conv2(x)
        valid = _valid_mask(valid_lengths - 2 * consumed, x.shape[-1])
        x = x * valid.unsqueeze(1).to(x.dtype)
        x = self.act(self.norm2(x, valid)) * valid.unsqueeze(1).to(x.dtype)

        m = valid.unsqueeze(1).to(x.dtype)
        pooled = (x * m).sum(dim=2) / m.sum(dim=2)  # masked mean over time
        return self.head(pooled).squeeze(-1)


def interpolate(real: torch.Tensor, fake: torch.Tensor, gamma: torch.Tensor | float) -> torch.Tensor:
    """Per-item straight-line mix gamma*real + (1-gamma)*fake."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if not torch.is_tensor(gamma):
        gamma = torch.as_tensor(gamma, dtype=real.dtype)
    if gamma.ndim == 1:
        gamma = gamma.view(-1, 1, 1)
    return gamma * real + (1.0 - gamma) * fake


def gradient_penalty(
    disc: Discriminator, ybar: torch.Tensor, valid_lengths: torch.Tensor
) -> torch.Tensor:
    """Mean over items of (||d D / d ybar||_2 - 1)^2 over each item's valid rows.

    Built with create_graph so the penalty itself can be differentiated w.r.t.
    the critic parameters.
    """
    ybar = ybar.detach().requires_grad_(True)
    scores = disc(ybar, valid_lengths)
    (grads,) = torch.autograd.grad(scores.sum(), ybar, create_graph=True)
    grads = grads * _valid_mask(valid_lengths, ybar.shape[1]).unsqueeze(-1).to(grads.dtype)
    norms = torch.sqrt(grads.flatten(1).pow(2).sum(dim=1) + 1e-24)
    return ((norms - 1.0) ** 2).mean()


@dataclass
class DiscriminatorLossParts:
    total: torch.Tensor
    score_real: float
    score_fake: float
    gp: float


def discriminator_loss(
    disc: Discriminator,
    real: torch.Tensor,
    fake: torch.Tensor,
    valid_lengths: torch.Tensor,
    weights: GanWeights,
    gammas: torch.Tensor | None = None,
    rng: torch.Generator | None = None,
) -> DiscriminatorLossParts:
    """Critic loss: adversarial * (E[D(fake)] - E[D(real)]) + penalty * gp.

    `fake` is treated as a constant (no gradient reaches the generator). One
    interpolation coefficient is drawn per item unless `gammas` is given.
    """
    fake = fake.detach()
    if gammas is None:
        gammas = torch.rand(real.shape[0], generator=rng, dtype=real.dtype)
    ybar = interpolate(real, fake, gammas)
    gp = gradient_penalty(disc, ybar, valid_lengths)
    s_fake = disc(fake, valid_lengths).mean()
    s_real = disc(real, valid_lengths).mean()
    total = weights.adversarial * (s_fake - s_real) + weights.penalty * gp
    return DiscriminatorLossParts(
        total=total,
        score_real=float(s_real.detach()),
        score_fake=float(s_fake.detach()),
        gp=float(gp.detach()),
    )


def generator_adversarial_term(
    disc: Discriminator, soft: torch.Tensor, valid_lengths: torch.Tensor, adversarial_weight: float
) -> torch.Tensor:
    """-weight * E[D(soft)], differentiable through `soft` only.

    Critic parameters are frozen while the score graph is recorded, so a later
    backward deposits nothing into them.
    """
    flags = [p.requires_grad for p in disc.parameters()]
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        scores = disc(soft, valid_lengths)
    finally:
        for p, f in zip(disc.parameters(), flags):
            p.requires_grad_(f)
    return -adversarial_weight * scores.mean()
