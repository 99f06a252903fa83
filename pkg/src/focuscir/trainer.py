"""AdamW training loop with checkpoints, resumption and per-epoch validation."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbones import Backbones
from .data import DatasetManifest, HyperConfig, QueryTriplet
from .model import FocusComposer, Retriever
from .objective import LossBundle
from .preprocess import SegmentationCache
from .retrieval import evaluate

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    def __init__(self, query_ids: Sequence[str], bundle: LossBundle):
        self.query_ids = list(query_ids)
        super().__init__(f"non-finite loss {bundle.as_dict()} on batch {self.query_ids}")


def set_determinism(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


@dataclass
class TrainState:
    model: FocusComposer
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    seed: int = 0
    best_score: float = float("-inf")


def named_trainable(retriever: Retriever) -> dict[str, torch.nn.Parameter]:
    named = {f"head/{n}": p for n, p in retriever.model.named_parameters()}
    for label, enc in (("image", retriever.backbones.image), ("text", retriever.backbones.text)):
        if isinstance(enc, torch.nn.Module):
            named.update({f"backbone.{label}/{n}": p for n, p in enc.named_parameters() if p.requires_grad})
    return named


def build_optimizer(retriever: Retriever, cfg: HyperConfig) -> torch.optim.AdamW:
    groups = [{"params": list(retriever.model.parameters()), "lr": cfg.lr_head, "name": "head"}]
    backbone = retriever.backbones.trainable_parameters()
    if backbone:
        groups.append({"params": backbone, "lr": cfg.lr_backbone, "name": "backbone"})
    return torch.optim.AdamW(groups, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def new_state(retriever: Retriever, cfg: HyperConfig) -> TrainState:
    return TrainState(retriever.model, build_optimizer(retriever, cfg), seed=cfg.seed)


def train_step(batch: Sequence[QueryTriplet], state: TrainState, retriever: Retriever,
               cfg: HyperConfig) -> tuple[TrainState, LossBundle]:
    retriever.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    bundle = retriever.batch_loss(batch)
    if not torch.isfinite(bundle.total) or not torch.isfinite(bundle.L_rank) or not torch.isfinite(bundle.L_fr):
        raise NonFiniteLoss([t.query_id for t in batch], bundle)
    bundle.total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for g in state.optimizer.param_groups for p in g["params"]], cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, bundle


def epoch_batches(triplets: Sequence[QueryTriplet], cfg: HyperConfig, epoch: int) -> list[list[QueryTriplet]]:
    """Seeded shuffle per epoch; batches smaller than two are dropped (contrastive loss needs negatives)."""
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(triplets))
    batches = [[triplets[i] for i in order[s:s + cfg.B]] for s in range(0, len(order), cfg.B)]
    return [b for b in batches if len(b) >= 2]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, state: TrainState, retriever: Retriever, cfg: HyperConfig) -> Path:
    """One ``.npz`` archive: named parameter and optimizer-moment arrays plus a JSON header."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    named = named_trainable(retriever)
    for name, p in named.items():
        arrays[f"param:{name}"] = p.detach().cpu().numpy()
        opt = state.optimizer.state.get(p)
        if opt:
            arrays[f"exp_avg:{name}"] = opt["exp_avg"].cpu().numpy()
            arrays[f"exp_avg_sq:{name}"] = opt["exp_avg_sq"].cpu().numpy()
            arrays[f"opt_step:{name}"] = np.asarray(float(opt["step"]))
    meta = {
        "version": CHECKPOINT_VERSION, "step": state.step, "epoch": state.epoch,
        "batch_index": state.batch_index, "seed": state.seed, "best_score": state.best_score,
        "config": cfg.to_dict(), "fingerprint": retriever.model.fingerprint(),
        "shapes": {n: list(a.shape) for n, a in arrays.items()},
        "dtypes": {n: str(a.dtype) for n, a in arrays.items()},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint_meta(path: str | os.PathLike) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(bytes(data["__meta__"]).decode("utf-8"))


def load_checkpoint(path: str | os.PathLike, retriever: Retriever, cfg: HyperConfig) -> TrainState:
    state = new_state(retriever, cfg)
    named = named_trainable(retriever)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        missing = [n for n in named if f"param:{n}" not in data]
        if missing:
            raise KeyError(f"checkpoint {path} lacks parameters {missing[:5]}")
        with torch.no_grad():
            for name, p in named.items():
                value = torch.from_numpy(data[f"param:{name}"])
                if tuple(value.shape) != tuple(p.shape):
                    raise ValueError(f"{name}: checkpoint shape {tuple(value.shape)} != model {tuple(p.shape)}")
                p.copy_(value.to(p.dtype))
                if f"exp_avg:{name}" in data:
                    state.optimizer.state[p] = {
                        "step": torch.tensor(float(data[f"opt_step:{name}"])),
                        "exp_avg": torch.from_numpy(data[f"exp_avg:{name}"].copy()).to(p.dtype),
                        "exp_avg_sq": torch.from_numpy(data[f"exp_avg_sq:{name}"].copy()).to(p.dtype),
                    }
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.batch_index, state.seed = meta.get("batch_index", 0), meta["seed"]
    state.best_score = meta.get("best_score", float("-inf"))
    return state


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    val_path: Path
    steps: int
    losses: list[dict] = field(default_factory=list)


def _selection_score(metrics: list[dict]) -> float:
    recalls = [m["value"] for m in metrics if m["k"] is not None and not m["metric"].startswith("R_subset")]
    return float(np.mean(recalls)) if recalls else float("-inf")


def fit(manifest: DatasetManifest, cfg: HyperConfig, cache: SegmentationCache, out_dir: str | os.PathLike,
        backbones: Backbones | None = None, resume: bool = False, max_steps: int | None = None,
        val_split: str = "val") -> FitResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    retriever = Retriever(cfg, manifest, cache, backbones)
    last_path, best_path = out / "last.npz", out / "best.npz"
    log_path, val_path = out / "train_log.jsonl", out / "val_metrics.jsonl"
    if resume and last_path.exists():
        state = load_checkpoint(last_path, retriever, cfg)
        log.info("resumed at epoch %d step %d", state.epoch, state.step)
    else:
        state = new_state(retriever, cfg)
        for p in (log_path, val_path):
            p.write_text("", encoding="utf-8")
        save_checkpoint(last_path, state, retriever, cfg)
        save_checkpoint(best_path, state, retriever, cfg)
    train = manifest.split("train")
    validation = manifest.split(val_split)
    losses: list[dict] = []
    started = time.perf_counter()
    try:
        with open(log_path, "a", encoding="utf-8") as log_fh:
            while state.epoch < cfg.epochs:
                batches = epoch_batches(train, cfg, state.epoch)
                while state.batch_index < len(batches):
                    if max_steps is not None and state.step >= max_steps:
                        break
                    batch = batches[state.batch_index]
                    try:
                        state, bundle = train_step(batch, state, retriever, cfg)
                    except NonFiniteLoss as exc:
                        (out / "nonfinite_batch.json").write_text(
                            json.dumps({"step": state.step, "query_ids": exc.query_ids}), encoding="utf-8")
                        raise
                    state.batch_index += 1
                    record = {"step": state.step, **bundle.as_dict()}
                    losses.append(record)
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if max_steps is not None and state.step >= max_steps and state.batch_index < len(batches):
                    break
                state.epoch += 1
                state.batch_index = 0
                if validation:
                    retriever.model.eval()
                    metrics = evaluate(manifest, val_split, retriever).metrics
                    score = _selection_score(metrics)
                    with open(val_path, "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({"epoch": state.epoch, "step": state.step, "metrics": metrics}) + "\n")
                    if score > state.best_score:
                        state.best_score = score
                        save_checkpoint(best_path, state, retriever, cfg)
                else:
                    save_checkpoint(best_path, state, retriever, cfg)
                save_checkpoint(last_path, state, retriever, cfg)
                if max_steps is not None and state.step >= max_steps:
                    break
    except KeyboardInterrupt:
        save_checkpoint(last_path, state, retriever, cfg)
        log.warning("interrupted; partial state saved to %s", last_path)
        raise
    save_checkpoint(last_path, state, retriever, cfg)
    log.info("trained %d steps in %.1fs", state.step, time.perf_counter() - started)
    return FitResult(best_path, last_path, log_path, val_path, state.step, losses)


def train_steps(retriever: Retriever, triplets: Sequence[QueryTriplet], cfg: HyperConfig, steps: int,
                state: TrainState | None = None) -> tuple[TrainState, list[LossBundle]]:
    """Run exactly ``steps`` optimiser steps cycling through seeded epochs (no I/O)."""
    state = state or new_state(retriever, cfg)
    bundles = []
    while len(bundles) < steps:
        batches = epoch_batches(triplets, cfg, state.epoch)
        if not batches:
            raise ValueError("need at least two training triplets")
        for batch in batches[state.batch_index:]:
            state, bundle = train_step(batch, state, retriever, cfg)
            state.batch_index += 1
            bundles.append(bundle)
            if len(bundles) == steps:
                break
        if state.batch_index >= len(batches):
            state.epoch += 1
            state.batch_index = 0
    return state, bundles
