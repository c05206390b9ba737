"""Staged training: text-only, adapters, then joint fine-tuning.

A step draws one clip (or one frame, for image-kind steps), independently drops
each condition stream with its configured probability, computes the
noise-prediction loss, and applies SGD (optional momentum, optional gradient
clipping) to exactly the parameter groups allowed for this (input kind, stage)
pair; every other parameter is left bitwise untouched.

Per-step RNG draw order, relied on by the determinism tests: batch kind, clip
index, (frame index for image batches), text drop, image drop, then the loss's
timestep/noise draws, then per-block reference-frame draws inside the forward.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .conditioning import ConditionBundle, Vocabulary
from .dataio import ClipDataset, VideoCodec, save_checkpoint, to_diffusion_space
from .diffusion import NoiseSchedule, denoising_loss
from .errors import DataError, StageError, TrainingDiverged
from .unet import ParameterStore, STAGES, UniVidModel, select_trainable


@dataclass(frozen=True)
class StagePlan:
    stage: str
    steps: int
    lr: float
    momentum: float = 0.9
    image_fraction: float = 0.0
    p_drop_text: float = 0.1
    p_drop_image: float = 0.1
    ckpt_every: int = 500
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise StageError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 0 or self.lr <= 0:
            raise StageError(f"need steps >= 0 and lr > 0, got steps={self.steps} lr={self.lr}")
        for name, v in (("image_fraction", self.image_fraction),
                        ("p_drop_text", self.p_drop_text), ("p_drop_image", self.p_drop_image)):
            if not 0.0 <= v <= 1.0:
                raise StageError(f"{name} must lie in [0, 1], got {v}")
        if self.stage == "adapters" and self.image_fraction > 0:
            raise StageError("the adapters stage trains on video batches only (image_fraction must be 0)")


@dataclass
class Batch:
    kind: str                 # image | video
    video: torch.Tensor       # [1, F, 3, H, W] pixels in [0, 1]
    caption: list[str]
    reference: torch.Tensor   # [3, H, W], frame 0 of the source clip


def stage_lambdas(stage: str) -> tuple[float, float]:
    """Base guidance weights before dropout: text-only for t2v, both otherwise."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}")
    return (1.0, 0.0) if stage == "t2v" else (1.0, 1.0)


def make_condition(model: UniVidModel, vocab: Vocabulary, batch: Batch,
                   lambda_t: float, lambda_v: float) -> ConditionBundle:
    text = model.text_encoder(vocab.encode(batch.caption)) if lambda_t > 0 else None
    image = model.image_encoder(batch.reference) if lambda_v > 0 else None
    return ConditionBundle.create(text, image, lambda_t, lambda_v)


def sgd_update(store: ParameterStore, names: set[str], opt_state: dict[str, torch.Tensor],
               lr: float, momentum: float, clip_norm: float = 0.0):
    """In-place SGD on the named parameters; everything else untouched."""
    grads = {n: store.params[n].grad for n in sorted(names) if store.params[n].grad is not None}
    if clip_norm > 0 and grads:
        total = math.sqrt(sum(float(g.detach().pow(2).sum()) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / total
            grads = {n: g * scale for n, g in grads.items()}
    with torch.no_grad():
        for name, g in grads.items():
            if momentum > 0:
                buf = opt_state.get(name)
                if buf is None:
                    buf = torch.zeros_like(g)
                buf = momentum * buf + g
                opt_state[name] = buf
                d = buf
            else:
                d = g
            store.params[name].add_(d, alpha=-lr)


def train_step(model: UniVidModel, store: ParameterStore, batch: Batch, plan: StagePlan,
               opt_state: dict[str, torch.Tensor], schedule: NoiseSchedule, codec: VideoCodec,
               vocab: Vocabulary, rng: torch.Generator) -> tuple[float, dict[str, Any]]:
    """One optimization step; returns (loss value, info with the dropout draws)."""
    if batch.video.numel() == 0:
        raise DataError("empty batch")
    kind = "video" if batch.video.shape[1] > 1 else "image"
    if kind != batch.kind:
        raise DataError(f"batch tagged {batch.kind} but has {batch.video.shape[1]} frames")

    base_lt, base_lv = stage_lambdas(plan.stage)
    drop_t = bool(torch.rand((), generator=rng) < plan.p_drop_text)
    drop_v = bool(torch.rand((), generator=rng) < plan.p_drop_image)
    lt = 0.0 if drop_t else base_lt
    lv = 0.0 if drop_v else base_lv
    cond = make_condition(model, vocab, batch, lt, lv)

    z0 = codec.encode(to_diffusion_space(batch.video))
    model.zero_grad(set_to_none=True)
    loss = denoising_loss(
        lambda z_t, c, t: model(z_t, t, c, mode="train-random", rng=rng),
        z0, cond, schedule, rng,
    )
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {float(loss)} (stage={plan.stage}, kind={kind}, "
            f"caption={' '.join(batch.caption)!r})"
        )
    loss.backward()
    names = select_trainable(store, kind, plan.stage)
    sgd_update(store, names, opt_state, plan.lr, plan.momentum, plan.clip_norm)
    return float(loss.detach()), {"dropped_text": drop_t, "dropped_image": drop_v, "kind": kind}


def draw_batch(dataset: ClipDataset, plan: StagePlan, rng: torch.Generator) -> Batch:
    kind = "image" if float(torch.rand((), generator=rng)) < plan.image_fraction else "video"
    idx = int(torch.randint(0, len(dataset), (1,), generator=rng))
    video, caption, ref = dataset.clip(idx)
    if kind == "image":
        f = int(torch.randint(0, video.shape[0], (1,), generator=rng))
        video = video[f : f + 1]
    return Batch(kind=kind, video=video.unsqueeze(0), caption=caption, reference=ref)


def write_stage_checkpoint(ckpt_dir: Path, store: ParameterStore, resolved_text: str,
                           vocab: Vocabulary, step: int, stage: str):
    from .dataio import config_hash

    save_checkpoint(
        ckpt_dir,
        {n: p.data for n, p in store.params.items()},
        store.groups,
        extras={"config_hash": config_hash(resolved_text), "step": str(step), "stage": stage},
    )
    (ckpt_dir / "config.resolved").write_text(resolved_text, encoding="utf-8")
    vocab.save(ckpt_dir / "vocab.txt")


def run_stage(model: UniVidModel, store: ParameterStore, dataset: ClipDataset, plan: StagePlan,
              schedule: NoiseSchedule, codec: VideoCodec, vocab: Vocabulary, run_dir: str | Path,
              rng: torch.Generator, resolved_text: str, start_step: int = 0) -> list[dict[str, Any]]:
    """Execute plan.steps training steps, logging to metrics.csv and checkpointing.

    Returns the metric rows written. steps == 0 leaves the parameters untouched
    and writes no rows.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if plan.stage == "adapters" and dataset.frames == 1:
        raise StageError("the adapters stage needs video batches, but this dataset holds single frames")

    metrics_path = run_dir / "metrics.csv"
    new_file = not metrics_path.exists()
    rows: list[dict[str, Any]] = []
    opt_state: dict[str, torch.Tensor] = {}
    with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "loss", "stage"])
        for i in range(plan.steps):
            step = start_step + i + 1
            batch = draw_batch(dataset, plan, rng)
            try:
                loss, info = train_step(model, store, batch, plan, opt_state, schedule, codec, vocab, rng)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from exc
            writer.writerow([step, f"{loss:.6f}", plan.stage])
            rows.append({"step": step, "loss": loss, "stage": plan.stage, **info})
            if plan.ckpt_every > 0 and step % plan.ckpt_every == 0:
                write_stage_checkpoint(run_dir / f"ckpt-{step}", store, resolved_text, vocab, step, plan.stage)
    if plan.steps > 0:
        final = start_step + plan.steps
        write_stage_checkpoint(run_dir / f"ckpt-{final}", store, resolved_text, vocab, final, plan.stage)
    return rows
