"""Build model/schedule/codec objects from a resolved config."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from . import config as cfgmod
from .conditioning import ImageEncoder, TextEncoder, Vocabulary
from .dataio import ClipDataset, VideoCodec, load_checkpoint
from .diffusion import NoiseSchedule, make_schedule
from .errors import CheckpointError, ConfigError
from .pyramid import FACTORS, PyramidLevel, PyramidSchedule, schedule_for
from .unet import DenoiserUNet, ParameterStore, UniVidModel


def build_schedule(cfg: dict[str, Any]) -> NoiseSchedule:
    return make_schedule(cfg["diffusion.T"], cfg["diffusion.beta_min"], cfg["diffusion.beta_max"])


def build_codec(cfg: dict[str, Any]) -> VideoCodec:
    return VideoCodec(cfg["model.codec"])


def build_pyramid(cfg: dict[str, Any], frames: int) -> PyramidSchedule:
    base = schedule_for(frames)
    entries = {}
    for f in FACTORS:
        r = cfg[f"pyramid.f{f}.r"] or base.level(f).step
        k = cfg[f"pyramid.f{f}.k"] or base.level(f).kernel
        entries[f] = PyramidLevel(step=r, kernel=k)
    return PyramidSchedule(entries=entries, frames=frames)


def derive_geometry(cfg: dict[str, Any], frames: int, height: int, width: int) -> dict[str, Any]:
    """Fill the data.* and derived model.* keys from the dataset geometry."""
    out = dict(cfg)
    codec = build_codec(cfg)
    lc, lh, lw = codec.latent_geometry(3, height, width)
    patch = cfg["model.patch"]
    if height % patch or width % patch:
        raise ConfigError(f"image size {height}x{width} not divisible by model.patch={patch}")
    out.update({
        "data.frames": frames,
        "data.height": height,
        "data.width": width,
        "model.in_channels": lc,
        "model.latent_height": lh,
        "model.latent_width": lw,
        "model.image_tokens": (height // patch) * (width // patch),
    })
    pyramid = build_pyramid(out, frames)
    for f in FACTORS:
        out[f"pyramid.f{f}.r"] = pyramid.level(f).step
        out[f"pyramid.f{f}.k"] = pyramid.level(f).kernel
    return out


def derive_from_dataset(cfg: dict[str, Any], dataset: ClipDataset) -> dict[str, Any]:
    row = dataset.rows[0]
    return derive_geometry(cfg, int(row["frames"]), int(row["height"]), int(row["width"]))


def build_model(cfg: dict[str, Any], vocab: Vocabulary) -> UniVidModel:
    for key in ("data.frames", "model.in_channels", "model.image_tokens"):
        if not cfg.get(key):
            raise ConfigError(f"config key {key} is unset; derive geometry from a dataset first")
    pyramid = build_pyramid(cfg, cfg["data.frames"])
    unet = DenoiserUNet(
        in_channels=cfg["model.in_channels"],
        channels=(cfg["model.channels.f1"], cfg["model.channels.f2"],
                  cfg["model.channels.f4"], cfg["model.channels.f8"]),
        heads=cfg["model.heads"],
        cond_width=cfg["model.cond_dim"],
        temb_dim=cfg["model.temb_dim"],
        pyramid=pyramid,
    )
    text_encoder = TextEncoder(len(vocab), cfg["model.cond_dim"], cfg["model.text_max_len"])
    image_encoder = ImageEncoder(3, cfg["model.patch"], cfg["model.cond_dim"], cfg["model.image_tokens"])
    return UniVidModel(unet, text_encoder, image_encoder)


def init_model(model: UniVidModel, seed: int) -> UniVidModel:
    gen = torch.Generator().manual_seed(seed)
    model.init_weights(gen)
    return model


def load_model_bundle(ckpt_dir: str | Path):
    """Rebuild (model, store, cfg, vocab, schedule, codec) from a checkpoint directory."""
    root = Path(ckpt_dir)
    cfg_path = root / "config.resolved"
    vocab_path = root / "vocab.txt"
    if not cfg_path.exists():
        raise CheckpointError(f"checkpoint {root} has no config.resolved")
    if not vocab_path.exists():
        raise CheckpointError(f"checkpoint {root} has no vocab.txt")
    cfg = cfgmod.resolve(cfgmod.load_config(cfg_path))
    vocab = Vocabulary.load(vocab_path)
    model = build_model(cfg, vocab)
    store = ParameterStore.from_model(model)
    params, groups, extras = load_checkpoint(root)
    if groups != store.groups:
        diff = {n for n in set(groups) ^ set(store.groups)}
        raise CheckpointError(f"checkpoint groups disagree with the model (e.g. {sorted(diff)[:3]})")
    store.load_values(params)
    return model, store, cfg, vocab, build_schedule(cfg), build_codec(cfg)
