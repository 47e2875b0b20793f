"""Beam search over decoder, CTC-prefix, LM, and length scores; WER; evaluation.

Scores combine per expansion as
    total = (1 - ctc_weight) * s2s + ctc_weight * ctc + lm_weight * lm
            + insertion_penalty * len(tokens)
with ties broken by token-id order, so decoding is fully deterministic.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .asr_model import AsrModel
from .corpus import EOS_ID, NUM_RESERVED, SOS_ID, Utterance, Vocab
from .ctc import CtcPrefixScorer, PrefixState


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 20
    ctc_weight: float = 0.5
    lm_weight: float = 0.7
    insertion_penalty: float = 0.0  # added once per content token; positive favors longer output
    max_length: int = 32

    def __post_init__(self):
        if self.beam_size < 1 or self.max_length < 1:
            raise ValueError("beam_size and max_length must be >= 1")
        if not 0 <= self.ctc_weight <= 1:
            raise ValueError("ctc_weight must be in [0, 1]")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be >= 0")


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    s2s: float  # cumulative decoder log-probability, eos included
    ctc: float  # cumulative prefix-score increments, eos included
    lm: float  # cumulative LM log-probability, eos included
    insertion: float  # realized length term: insertion_penalty * len(tokens)
    complete: bool


@dataclass
class BeamSearchResult:
    best: Hypothesis
    nbest: list[Hypothesis]
    complete: bool  # False when nothing reached eos within max_length


@dataclass
class BigramLm:
    """Add-one-smoothed bigram table over content tokens plus eos.

    Rows are context token ids (sos for sequence start); every row is a proper
    distribution over the successor set, and contexts never seen in training
    fall back to the uniform smoothed estimate.
    """

    log_probs: np.ndarray  # (V, V) float64
    vocab_size: int

    def log_prob(self, context: int, token: int) -> float:
        return float(self.log_probs[context, token])


def train_bigram_lm(transcripts: list[list[int]], vocab: Vocab) -> BigramLm:
    if not transcripts:
        raise ValueError("need at least one transcript")
    v = vocab.size
    successors = sorted(vocab.content_ids) + [EOS_ID]
    counts = np.zeros((v, v), dtype=np.float64)
    for transcript in transcripts:
        if not transcript:
            raise ValueError("transcripts must be nonempty")
        context = SOS_ID
        for token in [*transcript, EOS_ID]:
            counts[context, token] += 1
            context = token
    probs = np.zeros((v, v), dtype=np.float64)
    denom = counts[:, successors].sum(axis=1) + len(successors)
    probs[:, successors] = (counts[:, successors] + 1) / denom[:, None]
    with np.errstate(divide="ignore"):
        return BigramLm(log_probs=np.log(probs), vocab_size=v)


@dataclass(frozen=True)
class _Beam:
    tokens: tuple[int, ...]
    s2s: float
    ctc: float
    lm: float
    ctc_state: PrefixState | None = field(compare=False)


def _total(b: _Beam, cfg: DecodeConfig) -> float:
    return (
        (1.0 - cfg.ctc_weight) * b.s2s
        + cfg.ctc_weight * b.ctc
        + cfg.lm_weight * b.lm
        + cfg.insertion_penalty * len(b.tokens)
    )


def _as_hypothesis(b: _Beam, cfg: DecodeConfig, complete: bool) -> Hypothesis:
    return Hypothesis(
        tokens=list(b.tokens),
        score=_total(b, cfg),
        s2s=b.s2s,
        ctc=b.ctc,
        lm=b.lm,
        insertion=cfg.insertion_penalty * len(b.tokens),
        complete=complete,
    )


def beam_search(
    features: np.ndarray, model: AsrModel, lm: BigramLm | None, cfg: DecodeConfig
) -> BeamSearchResult:
    """Length-synchronous beam search for one utterance (features: (T, F)).

    CTC and LM components are accumulated only when their weights are nonzero;
    hypotheses end on eos, and if none does within max_length the best live
    prefix is returned flagged incomplete.
    """
    use_ctc = cfg.ctc_weight > 0
    use_lm = cfg.lm_weight > 0 and lm is not None
    was_training = model.training
    orig_dtype = next(model.parameters()).dtype
    # 64-bit decoding: scores must not depend on how prefixes are batched
    model.eval()
    model.to(torch.float64)
    try:
        with torch.no_grad():
            feats = torch.as_tensor(np.asarray(features), dtype=torch.float64).unsqueeze(0)
            enc = model.encode_features(feats, torch.tensor([features.shape[0]]))
            scorer = None
            if use_ctc:
                ctc_lp = model.ctc_log_probs(enc)[0].numpy()
                scorer = CtcPrefixScorer(ctc_lp, eos_id=EOS_ID)
            candidates = list(range(NUM_RESERVED, model.cfg.vocab_size))
            beams = [
                _Beam(
                    tokens=(),
                    s2s=0.0,
                    ctc=0.0,
                    lm=0.0,
                    ctc_state=scorer.initial_state() if use_ctc else None,
                )
            ]
            finished: list[_Beam] = []
            for depth in range(cfg.max_length + 1):
                if not beams:
                    break
                rows = model.next_token_log_probs(enc, [list(b.tokens) for b in beams]).numpy()
                proposals = [EOS_ID] if depth == cfg.max_length else [*candidates, EOS_ID]
                expansions: list[tuple[_Beam, bool]] = []
                for row, beam in zip(rows, beams):
                    context = beam.tokens[-1] if beam.tokens else SOS_ID
                    for token in proposals:
                        s2s = beam.s2s + float(row[token])
                        lm_score = beam.lm + (lm.log_prob(context, token) if use_lm else 0.0)
                        if use_ctc:
                            inc, state = scorer.score(beam.tokens, token, beam.ctc_state)
                            ctc = beam.ctc + inc
                        else:
                            ctc, state = 0.0, None
                        closing = token == EOS_ID
                        expansions.append(
                            (
                                _Beam(
                                    tokens=beam.tokens if closing else beam.tokens + (token,),
                                    s2s=s2s,
                                    ctc=ctc,
                                    lm=lm_score,
                                    ctc_state=None if closing else state,
                                ),
                                closing,
                            )
                        )
                # closing and continuing expansions compete for the same slots,
                # so beam_size=1 degenerates to greedy argmax decoding
                expansions.sort(key=lambda e: (-_total(e[0], cfg), e[0].tokens))
                top = expansions[: cfg.beam_size]
                finished.extend(b for b, closing in top if closing)
                beams = [b for b, closing in top if not closing]
    finally:
        model.train(was_training)
        model.to(orig_dtype)

    if finished:
        finished.sort(key=lambda b: (-_total(b, cfg), b.tokens))
        nbest = [_as_hypothesis(b, cfg, complete=True) for b in finished[: cfg.beam_size]]
        return BeamSearchResult(best=nbest[0], nbest=nbest, complete=True)
    nbest = [_as_hypothesis(b, cfg, complete=False) for b in beams[: cfg.beam_size]]
    return BeamSearchResult(best=nbest[0], nbest=nbest, complete=False)


def edit_distance(ref: list[int], hyp: list[int]) -> int:
    """Minimum substitutions + deletions + insertions turning ref into hyp."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: list[int], hyp: list[int]) -> float:
    """Edit distance normalized by reference length; may exceed 1."""
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    return edit_distance(ref, hyp) / len(ref)


def evaluate(
    model: AsrModel,
    dataset: list[Utterance],
    lm: BigramLm | None,
    cfg: DecodeConfig,
    vocab: Vocab | None = None,
    checkpoint_id: str = "",
    corpus_hash: str = "",
) -> dict:
    """Decode every utterance and pool edit counts into a corpus-level WER.

    Corpus WER is total edits over total reference tokens, not a mean of
    per-utterance rates. Rows are ordered by utterance id; decode failures are
    recorded per utterance and excluded from the pooled counts.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    rows = []
    total_edits = 0
    total_ref = 0
    for utt in sorted(dataset, key=lambda u: u.id):
        row: dict = {"id": utt.id, "ref": list(utt.transcript)}
        if vocab is not None:
            row["ref_text"] = vocab.detokenize(utt.transcript)
        try:
            result = beam_search(utt.features, model, lm, cfg)
        except Exception as exc:  # recorded, not fatal
            row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        hyp = result.best
        edits = edit_distance(utt.transcript, hyp.tokens)
        total_edits += edits
        total_ref += len(utt.transcript)
        row.update(
            hyp=hyp.tokens,
            edits=edits,
            score=hyp.score,
            s2s=hyp.s2s,
            ctc=hyp.ctc,
            lm=hyp.lm,
            insertion=hyp.insertion,
            complete=result.complete,
        )
        if vocab is not None:
            row["hyp_text"] = vocab.detokenize(hyp.tokens)
        rows.append(row)
    return {
        "checkpoint": checkpoint_id,
        "decode_config": asdict(cfg),
        "corpus_fingerprint": corpus_hash,
        "total_edits": total_edits,
        "total_ref_tokens": total_ref,
        "corpus_wer": total_edits / total_ref if total_ref else float("nan"),
        "utterances": rows,
    }
