"""Versioned checkpoint container: one .npz file, no pickled objects.

Layout inside the archive:
  meta                    JSON string (format tag, configs, epoch, accuracy, ...)
  model/<param name>      ASR parameter arrays
  opt/<slot>/<param name> Adam state for the ASR optimizer (step, exp_avg, exp_avg_sq)
  disc/<param name>       critic parameters, present only for adversarial phases
  dopt/<slot>/<param name> Adam state for the critic optimizer
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

CHECKPOINT_FORMAT = "advasr-ckpt-v1"

_ADAM_SLOTS = ("step", "exp_avg", "exp_avg_sq")


@dataclass
class Checkpoint:
    meta: dict
    model_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    disc_state: dict[str, np.ndarray] = field(default_factory=dict)
    disc_optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)


def state_from_module(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().copy() for name, tensor in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, state: dict[str, np.ndarray]) -> None:
    module.load_state_dict({name: torch.from_numpy(arr.copy()) for name, arr in state.items()})


def state_from_adam(opt: torch.optim.Adam, module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Adam moment estimates keyed by slot and parameter name; {} before the first step."""
    by_param = {id(p): name for name, p in module.named_parameters()}
    out: dict[str, np.ndarray] = {}
    for p, slots in opt.state.items():
        name = by_param[id(p)]
        for slot in _ADAM_SLOTS:
            out[f"{slot}/{name}"] = slots[slot].detach().cpu().numpy().copy()
    return out


def load_adam_state(opt: torch.optim.Adam, module: torch.nn.Module, state: dict[str, np.ndarray]) -> None:
    if not state:
        return
    for name, p in module.named_parameters():
        opt.state[p] = {
            "step": torch.as_tensor(state[f"step/{name}"]).clone(),
            "exp_avg": torch.from_numpy(state[f"exp_avg/{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(state[f"exp_avg_sq/{name}"].copy()),
        }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: serialize to a sibling temp file, then rename over `path`."""
    path = os.fspath(path)
    meta = dict(ckpt.meta)
    meta["format"] = CHECKPOINT_FORMAT
    arrays: dict[str, np.ndarray] = {"meta": np.asarray(json.dumps(meta, sort_keys=True))}
    for prefix, group in (
        ("model", ckpt.model_state),
        ("opt", ckpt.optimizer_state),
        ("disc", ckpt.disc_state),
        ("dopt", ckpt.disc_optimizer_state),
    ):
        for name, arr in (group or {}).items():
            arrays[f"{prefix}/{name}"] = arr
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "opt": {}, "disc": {}, "dopt": {}}
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format in {path}: {meta.get('format')!r}")
        for key in data.files:
            if key == "meta":
                continue
            prefix, name = key.split("/", 1)
            groups[prefix][name] = data[key]
    return Checkpoint(
        meta=meta,
        model_state=groups["model"],
        optimizer_state=groups["opt"],
        disc_state=groups["disc"],
        disc_optimizer_state=groups["dopt"],
    )
