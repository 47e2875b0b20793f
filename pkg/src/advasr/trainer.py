"""Training loops: pretraining, adversarial fine-tuning, and plain continued training.

Determinism contract: every source of randomness is reseeded at each epoch
boundary from (seed, stream, epoch), so runs are reproducible and a resumed
run is bit-identical to one that never stopped. Interpolation coefficients
for the critic use a dedicated torch.Generator, and the critic's inputs are
produced in eval mode, so with adversarial and penalty weights both zero the
parameter trajectory matches plain continued training exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Callable

import numpy as np
import torch

from .asr_model import AsrConfig, AsrModel, asr_loss, soft_output, validation_accuracy
from .checkpoint import (
    Checkpoint,
    load_adam_state,
    load_checkpoint,
    load_module_state,
    save_checkpoint,
    state_from_adam,
    state_from_module,
)
from .corpus import (
    Batch,
    CorpusSplits,
    SpecAugmentPolicy,
    Utterance,
    corpus_fingerprint,
    make_batch,
    spec_augment,
)
from .gan import (
    Discriminator,
    DiscriminatorConfig,
    GanWeights,
    discriminator_loss,
    generator_adversarial_term,
)

PHASES = ("pretrain", "finetune_gan", "finetune_baseline")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries phase/epoch/update context."""


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 10
    batch_size: int = 16
    accumulation: int = 1
    alpha: float = 0.3
    gan: GanWeights = field(default_factory=GanWeights)
    learning_rate: float = 0.0001
    beta1: float = 0.5
    beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup: int = 200  # pretraining only; fine-tuning keeps learning_rate fixed
    lr_scale: float = 1.0
    n_critic: int = 1
    seed: int = 0
    augment: SpecAugmentPolicy | None = field(default_factory=SpecAugmentPolicy)
    checkpoint_keep: str = "all"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation < 1 or self.n_critic < 1:
            raise ValueError("epochs, batch_size, accumulation and n_critic must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.learning_rate <= 0 or self.adam_eps <= 0 or self.lr_scale <= 0:
            raise ValueError("learning_rate, adam_eps and lr_scale must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.checkpoint_keep != "all":
            raise ValueError("only checkpoint_keep='all' is supported")


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss: float
    s2s: float
    ctc: float
    adversarial: float | None
    d_loss: float | None
    gp: float | None
    val_accuracy: float
    wall_time: float
    checkpoint: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunLedger:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        expected = self.records[-1].epoch + 1 if self.records else 1
        if record.epoch != expected:
            raise ValueError(f"epochs must increase by 1; expected {expected}, got {record.epoch}")
        self.records.append(record)

    def save(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))

    @classmethod
    def load(cls, path) -> "RunLedger":
        ledger = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                ledger.append(EpochRecord(**json.loads(line)))
        return ledger

    def fingerprint(self) -> str:
        """Hash of all records with wall_time dropped and checkpoint paths reduced
        to basenames; equal for equal-seed reruns regardless of run directory."""
        h = hashlib.sha256()
        for r in self.records:
            d = asdict(r)
            del d["wall_time"]
            d["checkpoint"] = Path(d["checkpoint"]).name
            h.update(json.dumps(d, sort_keys=True).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    stage: str  # "start" | "after_disc_update" | "after_generator_update"
    model_hash: str
    disc_hash: str


TraceSink = Callable[[IterationTrace], None]


def params_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _derive(seed: int, stream: str, epoch: int | None = None) -> int:
    tag = f"{seed}:{stream}" if epoch is None else f"{seed}:{stream}:{epoch}"
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def lr_schedule(step: int, warmup: int, d_att: int, scale: float) -> float:
    """Warmup then inverse-square-root decay, peaking at step == warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_att**-0.5 * min(step**-0.5, step * warmup**-1.5)


def build_model(asr_cfg: AsrConfig, feature_dim: int, seed: int) -> AsrModel:
    torch.manual_seed(_derive(seed, "model-init"))
    return AsrModel(asr_cfg, feature_dim)


def build_discriminator(disc_cfg: DiscriminatorConfig, seed: int) -> Discriminator:
    torch.manual_seed(_derive(seed, "disc-init"))
    return Discriminator(disc_cfg)


def model_from_checkpoint(ckpt: Checkpoint) -> AsrModel:
    model = AsrModel(AsrConfig(**ckpt.meta["asr_config"]), ckpt.meta["feature_dim"])
    load_module_state(model, ckpt.model_state)
    model.eval()
    return model


def _check_compatible(ckpt: Checkpoint, splits: CorpusSplits) -> None:
    if ckpt.meta["feature_dim"] != splits.config.feature_dim:
        raise ValueError(
            f"checkpoint feature_dim {ckpt.meta['feature_dim']} does not match "
            f"corpus feature_dim {splits.config.feature_dim}"
        )
    if ckpt.meta["asr_config"]["vocab_size"] != splits.vocab.size:
        raise ValueError(
            f"checkpoint vocab size {ckpt.meta['asr_config']['vocab_size']} does not match "
            f"corpus vocab size {splits.vocab.size}"
        )


def _predict_soft(model: AsrModel, batch: Batch) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return soft_output(model, batch)
    finally:
        model.train(was_training)


def _dev_accuracy(model: AsrModel, splits: CorpusSplits, batch_size: int) -> float:
    hits = 0
    total = 0
    for start in range(0, len(splits.dev), batch_size):
        batch = make_batch(splits.dev[start : start + batch_size], splits.vocab)
        n = int(batch.target_lengths.sum())
        hits += round(validation_accuracy(model, batch) * n)
        total += n
    return hits / total


def _require_finite(value: torch.Tensor, what: str, cfg: TrainConfig, epoch: int, update: int):
    if not bool(torch.isfinite(value.detach())):
        raise TrainingDiverged(
            f"{what} is non-finite ({float(value.detach())}) in phase {cfg.phase!r}, "
            f"epoch {epoch}, update {update}"
        )


def _run_phase(
    splits: CorpusSplits,
    model: AsrModel,
    cfg: TrainConfig,
    run_dir,
    disc: Discriminator | None = None,
    resume: bool = False,
    trace_sink: TraceSink | None = None,
) -> RunLedger:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = run_dir / f"{cfg.phase}-ledger.jsonl"
    fingerprint = corpus_fingerprint(splits)

    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
    )
    d_opt = None
    if disc is not None:
        d_opt = torch.optim.Adam(
            disc.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
        )

    ledger = RunLedger()
    step = 0
    start_epoch = 0
    if resume and ledger_path.exists():
        ledger = RunLedger.load(ledger_path)
        if ledger.records:
            last = ledger.records[-1]
            ckpt = load_checkpoint(last.checkpoint)
            load_module_state(model, ckpt.model_state)
            load_adam_state(opt, model, ckpt.optimizer_state)
            if disc is not None and ckpt.disc_state:
                load_module_state(disc, ckpt.disc_state)
                load_adam_state(d_opt, disc, ckpt.disc_optimizer_state)
            step = ckpt.meta["step"]
            start_epoch = last.epoch
    if start_epoch >= cfg.epochs:
        return ledger
    if start_epoch == 0:
        ledger_path.unlink(missing_ok=True)

    iteration = start_epoch * math.ceil(len(splits.train) / cfg.batch_size)

    def trace(stage: str):
        if trace_sink is not None:
            trace_sink(
                IterationTrace(
                    iteration=iteration,
                    stage=stage,
                    model_hash=params_hash(model),
                    disc_hash=params_hash(disc) if disc is not None else "",
                )
            )

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        torch.manual_seed(_derive(cfg.seed, "torch", epoch))
        data_rng = np.random.default_rng(_derive(cfg.seed, "data", epoch))
        gamma_gen = torch.Generator()
        gamma_gen.manual_seed(_derive(cfg.seed, "gamma", epoch))
        model.train()

        s2s_vals, ctc_vals, adv_vals, d_vals, gp_vals = [], [], [], [], []
        order = data_rng.permutation(len(splits.train))
        for bstart in range(0, len(order), cfg.batch_size):
            items = [splits.train[int(i)] for i in order[bstart : bstart + cfg.batch_size]]
            if cfg.augment is not None:
                items = [
                    Utterance(u.id, spec_augment(u.features, cfg.augment, data_rng), u.transcript)
                    for u in items
                ]
            iteration += 1
            update = iteration
            trace("start")

            if disc is not None:
                # critic update on the whole batch; the generator's output is a
                # constant here, produced without dropout
                full = make_batch(items, splits.vocab)
                yhat = _predict_soft(model, full)
                for _ in range(cfg.n_critic):
                    d_opt.zero_grad(set_to_none=True)
                    dparts = discriminator_loss(
                        disc, full.real_onehot, yhat, full.target_lengths, cfg.gan, rng=gamma_gen
                    )
                    _require_finite(dparts.total, "critic loss", cfg, epoch, update)
                    dparts.total.backward()
                    d_opt.step()
                    d_vals.append(float(dparts.total.detach()))
                    gp_vals.append(dparts.gp)
            trace("after_disc_update")

            # generator update: mean of micro-batch gradients
            n_micro = min(cfg.accumulation, len(items))
            chunks = np.array_split(np.arange(len(items)), n_micro)
            opt.zero_grad(set_to_none=True)
            for chunk in chunks:
                micro = make_batch([items[int(j)] for j in chunk], splits.vocab)
                parts = asr_loss(model, micro, cfg.alpha, with_soft_output=disc is not None)
                total = parts.total
                if disc is not None:
                    adv = generator_adversarial_term(
                        disc, parts.soft, micro.target_lengths, cfg.gan.adversarial
                    )
                    total = total + adv
                    adv_vals.append(float(adv.detach()))
                _require_finite(total, "training loss", cfg, epoch, update)
                (total / n_micro).backward()
                s2s_vals.append(float(parts.s2s.detach()))
                ctc_vals.append(float(parts.ctc.detach()))
            if cfg.phase == "pretrain":
                lr = lr_schedule(step + 1, cfg.warmup, model.cfg.d_att, cfg.lr_scale)
                for group in opt.param_groups:
                    group["lr"] = lr
            opt.step()
            step += 1
            trace("after_generator_update")

        val = _dev_accuracy(model, splits, cfg.batch_size)
        ckpt_path = run_dir / f"{cfg.phase}-epoch{epoch:03d}.npz"
        meta = {
            "phase": cfg.phase,
            "epoch": epoch,
            "step": step,
            "seed": cfg.seed,
            "val_accuracy": val,
            "alpha": cfg.alpha,
            "asr_config": asdict(model.cfg),
            "feature_dim": model.feature_dim,
            "corpus_fingerprint": fingerprint,
            "adam": {
                "learning_rate": cfg.learning_rate,
                "beta1": cfg.beta1,
                "beta2": cfg.beta2,
                "eps": cfg.adam_eps,
            },
            "disc_config": asdict(disc.cfg) if disc is not None else None,
        }
        save_checkpoint(
            ckpt_path,
            Checkpoint(
                meta=meta,
                model_state=state_from_module(model),
                optimizer_state=state_from_adam(opt, model),
                disc_state=state_from_module(disc) if disc is not None else {},
                disc_optimizer_state=state_from_adam(d_opt, disc) if disc is not None else {},
            ),
        )
        record = EpochRecord(
            phase=cfg.phase,
            epoch=epoch,
            loss=fmean(s2s_vals) + fmean(ctc_vals) + (fmean(adv_vals) if adv_vals else 0.0),
            s2s=fmean(s2s_vals),
            ctc=fmean(ctc_vals),
            adversarial=fmean(adv_vals) if adv_vals else None,
            d_loss=fmean(d_vals) if d_vals else None,
            gp=fmean(gp_vals) if gp_vals else None,
            val_accuracy=val,
            wall_time=time.perf_counter() - t0,
            checkpoint=str(ckpt_path),
        )
        ledger.append(record)
        with open(ledger_path, "a") as f:
            f.write(record.to_json() + "\n")
    return ledger


def pretrain(
    splits: CorpusSplits, asr_cfg: AsrConfig, cfg: TrainConfig, run_dir, resume: bool = False
) -> RunLedger:
    """Joint CTC/attention training from random initialization with the warmup schedule."""
    if cfg.phase != "pretrain":
        raise ValueError("pretrain requires phase='pretrain'")
    model = build_model(asr_cfg, splits.config.feature_dim, cfg.seed)
    return _run_phase(splits, model, cfg, run_dir, resume=resume)


def finetune_gan(
    splits: CorpusSplits,
    pretrained: str | Path,
    cfg: TrainConfig,
    run_dir,
    disc_cfg: DiscriminatorConfig | None = None,
    resume: bool = False,
    trace_sink: TraceSink | None = None,
) -> RunLedger:
    """Alternating critic/generator fine-tuning from a pretrained checkpoint.

    Each iteration updates the critic on detached predictions, then updates the
    model on the joint loss minus the weighted critic score of fresh predictions.
    """
    if cfg.phase != "finetune_gan":
        raise ValueError("finetune_gan requires phase='finetune_gan'")
    ckpt = load_checkpoint(pretrained)
    _check_compatible(ckpt, splits)
    model = build_model(AsrConfig(**ckpt.meta["asr_config"]), splits.config.feature_dim, cfg.seed)
    load_module_state(model, ckpt.model_state)
    if disc_cfg is None:
        disc_cfg = DiscriminatorConfig(vocab_size=splits.vocab.size)
    disc = build_discriminator(disc_cfg, cfg.seed)
    return _run_phase(splits, model, cfg, run_dir, disc=disc, resume=resume, trace_sink=trace_sink)


def finetune_baseline(
    splits: CorpusSplits, pretrained: str | Path, cfg: TrainConfig, run_dir, resume: bool = False
) -> RunLedger:
    """Continued training on the joint loss alone; the control arm for fine-tuning."""
    if cfg.phase != "finetune_baseline":
        raise ValueError("finetune_baseline requires phase='finetune_baseline'")
    ckpt = load_checkpoint(pretrained)
    _check_compatible(ckpt, splits)
    model = build_model(AsrConfig(**ckpt.meta["asr_config"]), splits.config.feature_dim, cfg.seed)
    load_module_state(model, ckpt.model_state)
    return _run_phase(splits, model, cfg, run_dir, resume=resume)


def finetune_gan_from_scratch(
    splits: CorpusSplits,
    asr_cfg: AsrConfig,
    cfg: TrainConfig,
    run_dir,
    disc_cfg: DiscriminatorConfig | None = None,
    resume: bool = False,
    trace_sink: TraceSink | None = None,
    initial_model_state: dict[str, np.ndarray] | None = None,
) -> RunLedger:
    """The adversarial loop started from random parameters (negative control).

    `initial_model_state` substitutes a caller-chosen starting point; with the
    pretrained parameters this is exactly finetune_gan.
    """
    if cfg.phase != "finetune_gan":
        raise ValueError("finetune_gan_from_scratch requires phase='finetune_gan'")
    model = build_model(asr_cfg, splits.config.feature_dim, cfg.seed)
    if initial_model_state is not None:
        load_module_state(model, initial_model_state)
    if disc_cfg is None:
        disc_cfg = DiscriminatorConfig(vocab_size=splits.vocab.size)
    disc = build_discriminator(disc_cfg, cfg.seed)
    return _run_phase(splits, model, cfg, run_dir, disc=disc, resume=resume, trace_sink=trace_sink)


def average_checkpoints(ledger: RunLedger, k: int, out_path=None) -> dict[str, np.ndarray]:
    """Elementwise mean of the k checkpoints with the best validation accuracy.

    Accumulates in float64 and casts back, so averaging k copies of one
    checkpoint returns it unchanged. Optionally writes the result as a new
    loadable checkpoint.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ledger.records) < k:
        raise ValueError(f"need at least {k} checkpoints, ledger has {len(ledger.records)}")
    best = sorted(ledger.records, key=lambda r: (-r.val_accuracy, r.epoch))[:k]
    acc: dict[str, np.ndarray] = {}
    dtypes: dict[str, np.dtype] = {}
    head_meta = None
    for record in best:
        ckpt = load_checkpoint(record.checkpoint)
        if head_meta is None:
            head_meta = ckpt.meta
        for name, arr in ckpt.model_state.items():
            dtypes.setdefault(name, arr.dtype)
            acc[name] = acc.get(name, 0) + arr.astype(np.float64)
    mean = {name: (arr / k).astype(dtypes[name]) for name, arr in acc.items()}
    if out_path is not None:
        meta = {
            "phase": "average",
            "epoch": None,
            "step": None,
            "seed": head_meta["seed"],
            "val_accuracy": None,
            "alpha": head_meta["alpha"],
            "asr_config": head_meta["asr_config"],
            "feature_dim": head_meta["feature_dim"],
            "corpus_fingerprint": head_meta["corpus_fingerprint"],
            "adam": None,
            "disc_config": None,
            "sources": [r.epoch for r in best],
        }
        save_checkpoint(out_path, Checkpoint(meta=meta, model_state=mean))
    return mean
