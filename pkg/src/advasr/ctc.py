"""CTC negative log-likelihood, greedy collapse, and prefix scoring.

All probabilities are handled in the log domain; log-sum-exp keeps long frame
sequences from underflowing. Blank is id 0 everywhere in this package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

BLANK_ID = 0

# stands in for log(0); exp() underflows to exactly 0 and gradients stay finite
LOG_ZERO = -1.0e30


class CtcInfeasibleError(ValueError):
    """Target cannot be emitted in the available frames."""


def min_frames_required(target: list[int]) -> int:
    """Frames needed to emit `target`: one per token plus a separating blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend_with_blanks(target: list[int]) -> list[int]:
    ext = [BLANK_ID]
    for t in target:
        ext.extend((t, BLANK_ID))
    return ext


def ctc_loss(frame_posteriors: torch.Tensor, target: list[int]) -> torch.Tensor:
    """-log of the total probability of frame labelings collapsing to `target`.

    `frame_posteriors` is (n_frames, V) with rows on the simplex; the forward
    recursion runs in float64 and the result is differentiable w.r.t. the input.
    """
    if frame_posteriors.ndim != 2:
        raise ValueError("frame_posteriors must be (n_frames, V)")
    if any(t == BLANK_ID for t in target):
        raise ValueError("target must not contain the blank id")
    n_frames = frame_posteriors.shape[0]
    if n_frames < min_frames_required(target):
        raise CtcInfeasibleError(
            f"target of length {len(target)} needs {min_frames_required(target)} frames, "
            f"got {n_frames}"
        )

    lp = torch.log(frame_posteriors.to(torch.float64).clamp_min(1e-300))
    ext = _extend_with_blanks(target)
    s_len = len(ext)
    ext_idx = torch.tensor(ext, dtype=torch.long)
    # skip transition s-2 -> s allowed only onto a non-blank differing from ext[s-2]
    can_skip = torch.tensor(
        [s >= 2 and ext[s] != BLANK_ID and ext[s] != ext[s - 2] for s in range(s_len)]
    )

    neg = torch.full((s_len,), LOG_ZERO, dtype=torch.float64)
    alpha = neg.clone()
    alpha[0] = lp[0, BLANK_ID]
    if s_len > 1:
        alpha[1] = lp[0, ext[1]]
    for t in range(1, n_frames):
        stay = alpha
        step = torch.cat([neg[:1], alpha[:-1]])
        skip = torch.cat([neg[:2], alpha[:-2]])
        skip = torch.where(can_skip, skip, neg)
        alpha = torch.logaddexp(torch.logaddexp(stay, step), skip) + lp[t, ext_idx]
    total = torch.logaddexp(alpha[-1], alpha[-2]) if s_len > 1 else alpha[-1]
    return -total


def ctc_greedy_collapse(path: list[int], blank: int = BLANK_ID) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


@dataclass(frozen=True)
class PrefixState:
    """Cached forward variables for one prefix; owned by a single hypothesis."""

    prefix: tuple[int, ...]
    # r[t, 0] = log prob prefix ends at frame t on its last token,
    # r[t, 1] = log prob prefix ends at frame t on a blank
    r: np.ndarray
    psi: float  # cumulative prefix log-probability
    finished: bool = False


class CtcPrefixScorer:
    """Incremental prefix probabilities over one utterance's CTC frame posteriors.

    Extending a cached prefix state by one token returns the increment in
    log P_ctc; for a hypothesis closed with eos the accumulated score equals
    -ctc_loss of its tokens.
    """

    def __init__(self, log_probs: np.ndarray, eos_id: int, blank_id: int = BLANK_ID):
        if log_probs.ndim != 2:
            raise ValueError("log_probs must be (n_frames, V)")
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.n_frames = self.x.shape[0]
        self.eos_id = eos_id
        self.blank_id = blank_id

    def initial_state(self) -> PrefixState:
        r = np.full((self.n_frames, 2), LOG_ZERO)
        r[0, 1] = self.x[0, self.blank_id]
        for t in range(1, self.n_frames):
            r[t, 1] = r[t - 1, 1] + self.x[t, self.blank_id]
        return PrefixState(prefix=(), r=r, psi=0.0)

    def score(self, prefix: list[int], token: int, state: PrefixState) -> tuple[float, PrefixState]:
        """Incremental log-probability of `prefix + [token]` given `state` for `prefix`."""
        if state.finished:
            raise ValueError("cannot extend a finished hypothesis state")
        if tuple(prefix) != state.prefix:
            raise ValueError(f"state was built for prefix {state.prefix}, got {tuple(prefix)}")
        if token == self.blank_id:
            raise ValueError("blank is not a valid extension token")

        r_prev, psi_prev = state.r, state.psi
        r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])

        if token == self.eos_id:
            # probability that the prefix is the complete labeling
            psi = float(r_sum[-1])
            new = PrefixState(prefix=state.prefix + (token,), r=r_prev, psi=psi, finished=True)
            return psi - psi_prev, new

        lg = len(state.prefix)
        if lg >= self.n_frames:
            # no frame left to emit the new token
            new = PrefixState(
                prefix=state.prefix + (token,),
                r=np.full((self.n_frames, 2), LOG_ZERO),
                psi=LOG_ZERO,
            )
            return LOG_ZERO - psi_prev, new
        xs = self.x[:, token]
        r = np.full((self.n_frames, 2), LOG_ZERO)
        if lg == 0:
            r[0, 0] = xs[0]
        # phi: mass of the previous prefix available to start the new token
        if lg > 0 and state.prefix[-1] == token:
            phi = r_prev[:, 1]
        else:
            phi = r_sum
        start = max(lg, 1)
        psi = r[start - 1, 0]
        for t in range(start, self.n_frames):
            r[t, 0] = np.logaddexp(r[t - 1, 0], phi[t - 1]) + xs[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + self.x[t, self.blank_id]
            psi = np.logaddexp(psi, phi[t - 1] + xs[t])
        new = PrefixState(prefix=state.prefix + (token,), r=r, psi=float(psi))
        return float(psi) - psi_prev, new
