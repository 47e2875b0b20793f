"""Independent reference implementations used to check the package numerics.

Everything here is deliberately brute force: exhaustive path enumeration, full
sequence enumeration, quadratic DP, central finite differences. Slow and
obviously correct, so the fast implementations can be judged against them.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from advasr.asr_model import AsrModel
from advasr.corpus import EOS_ID, SOS_ID
from advasr.ctc import ctc_greedy_collapse, min_frames_required
from advasr.decode import BigramLm, DecodeConfig


def ctc_neg_log_likelihood_enumeration(
    frame_posteriors: np.ndarray, target: list[int], blank: int = 0
) -> float:
    """-log P(target) by summing the probability of every collapsing frame path.

    Exponential in the frame count; usable only for tiny instances.
    """
    n_frames, vocab = frame_posteriors.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=n_frames):
        if ctc_greedy_collapse(list(path), blank) != list(target):
            continue
        p = 1.0
        for t, label in enumerate(path):
            p *= float(frame_posteriors[t, label])
        total += p
    if total == 0.0:
        return math.inf
    return -math.log(total)


def sequence_scores_enumeration(
    features: np.ndarray,
    model: AsrModel,
    lm: BigramLm | None,
    cfg: DecodeConfig,
    content_ids: list[int],
) -> list[tuple[float, tuple[int, ...]]]:
    """Total decode score of every token sequence up to cfg.max_length.

    The decoder posterior comes from one teacher-forced pass per sequence (not
    the incremental prefix batching the search uses) and the CTC component from
    the full forward recursion, so agreement genuinely cross-checks the search.
    """
    from advasr.ctc import LOG_ZERO, ctc_loss

    model.eval()
    orig_dtype = next(model.parameters()).dtype
    model.to(torch.float64)
    scored: list[tuple[float, tuple[int, ...]]] = []
    try:
        with torch.no_grad():
            feats = torch.as_tensor(np.asarray(features), dtype=torch.float64).unsqueeze(0)
            enc = model.encode_features(feats, torch.tensor([features.shape[0]]))
            ctc_post = model.ctc_frame_posteriors(enc)[0, : int(enc.lengths[0])]
            n_sub = int(enc.lengths[0])
            for length in range(cfg.max_length + 1):
                for seq in itertools.product(content_ids, repeat=length):
                    dec_in = torch.tensor([[SOS_ID, *seq]], dtype=torch.long)
                    logits = model._run_decoder(enc, dec_in)
                    rows = torch.log_softmax(logits[0], dim=-1)
                    s2s = sum(float(rows[i, tok]) for i, tok in enumerate(seq))
                    s2s += float(rows[len(seq), EOS_ID])
                    if cfg.ctc_weight > 0:
                        if min_frames_required(list(seq)) <= n_sub:
                            ctc = -float(ctc_loss(ctc_post, list(seq)))
                        else:
                            ctc = LOG_ZERO
                    else:
                        ctc = 0.0
                    lm_score = 0.0
                    if cfg.lm_weight > 0 and lm is not None:
                        context = SOS_ID
                        for tok in (*seq, EOS_ID):
                            lm_score += lm.log_prob(context, tok)
                            context = tok
                    total = (
                        (1.0 - cfg.ctc_weight) * s2s
                        + cfg.ctc_weight * ctc
                        + cfg.lm_weight * lm_score
                        + cfg.insertion_penalty * length
                    )
                    scored.append((total, seq))
    finally:
        model.to(orig_dtype)
    return scored


def best_sequence_enumeration(
    features: np.ndarray,
    model: AsrModel,
    lm: BigramLm | None,
    cfg: DecodeConfig,
    content_ids: list[int],
) -> tuple[tuple[int, ...], float]:
    scored = sequence_scores_enumeration(features, model, lm, cfg, content_ids)
    scored.sort(key=lambda e: (-e[0], e[1]))
    total, seq = scored[0]
    return seq, total


def edit_distance_matrix(ref: list[int], hyp: list[int]) -> int:
    """Full-matrix Levenshtein DP, kept separate from the rolling-array version."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
            )
    return int(d[n, m])


def parameter_finite_differences(
    loss_fn, module: torch.nn.Module, indices: list[tuple[str, int]], eps: float = 1e-5
) -> list[float]:
    """Central-difference d loss / d parameter for chosen flat indices.

    `loss_fn` must rebuild the full loss from the module's current parameters;
    the module is restored exactly afterwards.
    """
    grads = []
    params = dict(module.named_parameters())

    def nudge(p, flat_idx, value):
        # Only the mutation is grad-free; loss_fn may need autograd internally.
        with torch.no_grad():
            p.view(-1)[flat_idx] = value

    for name, flat_idx in indices:
        p = params[name]
        orig = p.view(-1)[flat_idx].item()
        nudge(p, flat_idx, orig + eps)
        up = float(loss_fn().detach())
        nudge(p, flat_idx, orig - eps)
        down = float(loss_fn().detach())
        nudge(p, flat_idx, orig)
        grads.append((up - down) / (2 * eps))
    return grads


def sample_parameter_indices(
    module: torch.nn.Module, count: int, rng: np.random.Generator
) -> list[tuple[str, int]]:
    """Uniformly sample `count` (name, flat index) coordinates over all parameters."""
    names, sizes = zip(*[(n, p.numel()) for n, p in module.named_parameters()])
    cum = np.cumsum(sizes)
    picks = rng.integers(0, cum[-1], size=count)
    out = []
    for pick in picks:
        slot = int(np.searchsorted(cum, pick, side="right"))
        offset = int(pick - (cum[slot - 1] if slot else 0))
        out.append((names[slot], offset))
    return out
