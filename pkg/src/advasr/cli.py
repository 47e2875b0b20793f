"""Command-line entry point for the full experiment lifecycle.

Exit codes: 0 success, 1 refused or locked, 2 config error, 3 missing
prerequisite artifact, 4 training divergence.
"""
from __future__ import annotations

import functools
import json
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import generate_corpus, load_corpus, save_corpus, corpus_fingerprint
from .decode import evaluate, train_bigram_lm
from .trainer import (
    RunLedger,
    TrainingDiverged,
    average_checkpoints,
    finetune_baseline,
    finetune_gan,
    finetune_gan_from_scratch,
    model_from_checkpoint,
    pretrain,
)

RUNS = {
    "pretrain": ("pretrain", "pretrain"),
    "gan": ("gan", "finetune_gan"),
    "baseline": ("baseline", "finetune_baseline"),
    "scratch": ("scratch", "finetune_gan"),
}


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _fail(code: int, message: str):
    raise CliFailure(code, message)


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CliFailure as exc:
            click.echo(f"error: {exc.message}", err=True)
            sys.exit(exc.code)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except FileNotFoundError as exc:
            click.echo(f"missing artifact: {exc}", err=True)
            sys.exit(3)
        except TrainingDiverged as exc:
            click.echo(f"training diverged: {exc}", err=True)
            sys.exit(4)

    return wrapper


def _common(fn):
    fn = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override a config entry by dotted path, e.g. finetune.epochs=5.",
    )(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the experiment seed.")(fn)
    fn = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        default=None,
        help="YAML experiment config; defaults apply for missing keys.",
    )(fn)
    return fn


def _load(config_path, overrides, seed) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path, tuple(overrides), seed)
    root = os.environ.get("ADVASR_OUTPUT_ROOT", ".")
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = Path(root) / out
    return cfg, out


@contextmanager
def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        _fail(1, f"{out} is in use by another process (lock file {lock})")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_manifest(out: Path, manifest: dict) -> None:
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, out / "manifest.json")


def _record_phase(out: Path, cfg: ExperimentConfig, name: str, outcome: dict) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault("phases", {})
    manifest["tool_version"] = __version__
    manifest["config"] = cfg.raw
    manifest["phases"][name] = outcome
    _write_manifest(out, manifest)


def _load_splits(cfg: ExperimentConfig, out: Path):
    corpus_path = out / "corpus.jsonl"
    if not corpus_path.exists():
        _fail(3, f"corpus not found at {corpus_path}; run `advasr generate` first")
    splits = load_corpus(corpus_path)
    if splits.config != cfg.corpus:
        _fail(2, f"{corpus_path} was generated with a different corpus config; regenerate with --force")
    return splits


def _guard_rerun(run_dir: Path, ledger_name: str, resume: bool, force: bool):
    path = run_dir / ledger_name
    if path.exists():
        if force:
            shutil.rmtree(run_dir)
        elif not resume:
            _fail(1, f"{path} exists; pass --resume to continue or --force to start over")


def _ledger_outcome(ledger: RunLedger) -> dict:
    best = max(ledger.records, key=lambda r: r.val_accuracy)
    return {
        "epochs": len(ledger.records),
        "best_val_accuracy": best.val_accuracy,
        "best_epoch": best.epoch,
        "last_checkpoint": ledger.records[-1].checkpoint,
        "ledger_fingerprint": ledger.fingerprint(),
    }


def _pretrained_checkpoint(out: Path) -> Path:
    ledger_path = out / "pretrain" / "pretrain-ledger.jsonl"
    if not ledger_path.exists():
        _fail(3, f"no pretraining ledger at {ledger_path}; run `advasr pretrain` first")
    ledger = RunLedger.load(ledger_path)
    if not ledger.records:
        _fail(3, f"{ledger_path} has no completed epochs")
    return Path(ledger.records[-1].checkpoint)


@click.group()
@click.version_option(__version__)
def main():
    """Train and evaluate an adversarially fine-tuned speech recognizer."""


@main.command()
@_common
@click.option("--force", is_flag=True, help="Overwrite an existing corpus.")
@_handled
def generate(config_path, overrides, seed, force):
    """Synthesize the corpus and write it with a manifest."""
    cfg, out = _load(config_path, overrides, seed)
    with _locked(out):
        corpus_path = out / "corpus.jsonl"
        if corpus_path.exists() and not force:
            _fail(1, f"{corpus_path} exists; pass --force to overwrite")
        splits = generate_corpus(cfg.corpus)
        save_corpus(corpus_path, splits)
        fingerprint = corpus_fingerprint(splits)
        _record_phase(
            out,
            cfg,
            "generate",
            {
                "corpus_fingerprint": fingerprint,
                "train": len(splits.train),
                "dev": len(splits.dev),
                "test": len(splits.test),
            },
        )
    click.echo(f"corpus written to {corpus_path} (fingerprint {fingerprint[:16]})")


def _train_command(name: str, cfg: ExperimentConfig, out: Path, resume: bool, force: bool):
    subdir, phase = RUNS[name]
    run_dir = out / subdir
    splits = _load_splits(cfg, out)
    _guard_rerun(run_dir, f"{phase}-ledger.jsonl", resume, force)
    if name == "pretrain":
        ledger = pretrain(splits, cfg.asr, cfg.pretrain, run_dir, resume=resume)
    elif name == "gan":
        ledger = finetune_gan(
            splits, _pretrained_checkpoint(out), cfg.finetune, run_dir,
            disc_cfg=cfg.discriminator, resume=resume,
        )
    elif name == "baseline":
        ledger = finetune_baseline(
            splits, _pretrained_checkpoint(out), cfg.finetune_baseline, run_dir, resume=resume
        )
    else:  # scratch: adversarial loop from random init with the combined budget
        combined = replace(cfg.finetune, epochs=cfg.pretrain.epochs + cfg.finetune.epochs)
        ledger = finetune_gan_from_scratch(
            splits, cfg.asr, combined, run_dir, disc_cfg=cfg.discriminator, resume=resume
        )
    _record_phase(out, cfg, name, _ledger_outcome(ledger))
    last = ledger.records[-1]
    click.echo(
        f"{name}: {len(ledger.records)} epochs, "
        f"val accuracy {last.val_accuracy:.3f}, ledger {run_dir / (phase + '-ledger.jsonl')}"
    )


def _train_cli(cli_name, run_name, help_text):
    @main.command(name=cli_name, help=help_text)
    @_common
    @click.option("--resume", is_flag=True, help="Continue from the last checkpoint.")
    @click.option("--force", is_flag=True, help="Discard the existing run and start over.")
    @_handled
    def cmd(config_path, overrides, seed, resume, force):
        cfg, out = _load(config_path, overrides, seed)
        with _locked(out):
            _train_command(run_name, cfg, out, resume, force)

    return cmd


_train_cli("pretrain", "pretrain", "Pretrain the recognizer on the joint CTC/attention loss.")
_train_cli("finetune-gan", "gan", "Adversarially fine-tune the pretrained recognizer.")
_train_cli("finetune-baseline", "baseline",
           "Continue training the pretrained recognizer without the critic.")
_train_cli("finetune-scratch", "scratch",
           "Run the adversarial loop from random initialization (combined epoch budget).")


@main.command()
@_common
@click.option("--run", "run_name", type=click.Choice(sorted(RUNS)), default="pretrain",
              help="Which run's checkpoints to average.")
@click.option("--k", type=int, default=None, help="How many of the best checkpoints (default from config).")
@_handled
def average(config_path, overrides, seed, run_name, k):
    """Average the best checkpoints of a run by validation accuracy."""
    cfg, out = _load(config_path, overrides, seed)
    subdir, phase = RUNS[run_name]
    ledger_path = out / subdir / f"{phase}-ledger.jsonl"
    if not ledger_path.exists():
        _fail(3, f"no ledger at {ledger_path}")
    ledger = RunLedger.load(ledger_path)
    k = cfg.average_k if k is None else k
    try:
        target = out / subdir / "average.npz"
        average_checkpoints(ledger, k, out_path=target)
    except ValueError as exc:
        _fail(3, str(exc))
    click.echo(f"averaged top {k} checkpoints into {target}")


@main.command(name="evaluate")
@_common
@click.option("--checkpoint", "checkpoints", multiple=True, type=click.Path(dir_okay=False),
              help="Checkpoint(s) to score; default: every run's average.npz.")
@_handled
def evaluate_cmd(config_path, overrides, seed, checkpoints):
    """Decode the test split and report corpus WER with and without the LM."""
    cfg, out = _load(config_path, overrides, seed)
    splits = _load_splits(cfg, out)
    fingerprint = corpus_fingerprint(splits)
    if not checkpoints:
        checkpoints = [out / sub / "average.npz" for sub, _ in RUNS.values()
                       if (out / sub / "average.npz").exists()]
        if not checkpoints:
            _fail(3, f"no averaged checkpoints under {out}; run `advasr average` or pass --checkpoint")
    lm = train_bigram_lm([u.transcript for u in splits.train], splits.vocab)
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for ck_path in map(Path, checkpoints):
        ckpt = load_checkpoint(ck_path)
        model = model_from_checkpoint(ckpt)
        ident = f"{ck_path.parent.name}/{ck_path.name}:{ckpt.meta['phase']}:{ckpt.meta['epoch']}"
        row = {"checkpoint": ident}
        for label, dcfg in (
            ("wer_no_lm", replace(cfg.decode, lm_weight=0.0)),
            ("wer_with_lm", cfg.decode),
        ):
            report = evaluate(
                model, splits.test, lm if dcfg.lm_weight > 0 else None, dcfg,
                vocab=splits.vocab, checkpoint_id=ident, corpus_hash=fingerprint,
            )
            stem = f"report-{ck_path.parent.name}-{ck_path.stem}-{label[4:]}.json"
            (reports_dir / stem).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
            row[label] = report["corpus_wer"]
        table.append(row)
    (reports_dir / "wer-table.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    width = max(len(r["checkpoint"]) for r in table)
    click.echo(f"{'checkpoint'.ljust(width)}  WER(no LM)  WER(+LM)")
    for r in table:
        click.echo(f"{r['checkpoint'].ljust(width)}  {r['wer_no_lm']:10.4f}  {r['wer_with_lm']:8.4f}")


@main.command()
@_common
@_handled
def plot(config_path, overrides, seed):
    """Write loss and validation-accuracy curves for every run's ledger."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg, out = _load(config_path, overrides, seed)
    ledgers = {}
    for name, (subdir, phase) in RUNS.items():
        path = out / subdir / f"{phase}-ledger.jsonl"
        if path.exists():
            ledger = RunLedger.load(path)
            if not ledger.records:
                _fail(3, f"{path} is empty")
            ledgers[name] = ledger
    if not ledgers:
        _fail(3, f"no ledgers under {out}")
    plots_dir = out / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "advasr"
    written = []
    for metric in ("loss", "val_accuracy", "d_loss", "gp"):
        fig, ax = plt.subplots(figsize=(6, 4))
        drawn = False
        for name, ledger in sorted(ledgers.items()):
            values = [getattr(r, metric) for r in ledger.records]
            if any(v is None for v in values):
                click.echo(f"warning: ledger {name} has no {metric}; curve skipped", err=True)
                continue
            ax.plot([r.epoch for r in ledger.records], values, label=name)
            drawn = True
        if not drawn:
            plt.close(fig)
            continue
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        target = plots_dir / f"{metric}.svg"
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(target.name)
    click.echo(f"wrote {', '.join(written)} to {plots_dir}")


if __name__ == "__main__":
    main()
