import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from univid import config as cfgmod
from univid import factory
from univid.conditioning import Vocabulary
from univid.dataio import ClipDataset, ClipSpec, write_dataset
from univid.unet import ParameterStore

TINY_CFG_TEXT = """
seed=7
model.codec=identity
model.channels.f1=8
model.channels.f2=8
model.channels.f4=8
model.channels.f8=8
model.heads=2
model.cond_dim=8
model.temb_dim=8
model.patch=8
diffusion.T=20
diffusion.beta_min=0.001
diffusion.beta_max=0.1
train.t2v.steps=4
train.t2v.lr=0.05
train.adapters.steps=3
train.adapters.lr=0.05
train.joint.steps=3
train.joint.lr=0.05
train.ckpt_every=0
"""


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    specs = [
        (ClipSpec("circle", "red", "right", "slow", frames=4, height=16, width=16), 11),
        (ClipSpec("square", "blue", "down", "slow", frames=4, height=16, width=16), 12),
    ]
    write_dataset(root, specs)
    return root


@pytest.fixture(scope="session")
def tiny_setup(tiny_dataset_dir):
    """(model, store, cfg, vocab, schedule, codec, dataset) on a 4-frame 16x16 corpus."""
    dataset = ClipDataset(tiny_dataset_dir)
    cfg = cfgmod.resolve(cfgmod.parse_config(TINY_CFG_TEXT))
    cfg = factory.derive_from_dataset(cfg, dataset)
    vocab = Vocabulary.load(dataset.vocab_path)
    model = factory.build_model(cfg, vocab)
    factory.init_model(model, cfg["seed"])
    store = ParameterStore.from_model(model)
    return model, store, cfg, vocab, factory.build_schedule(cfg), factory.build_codec(cfg), dataset


@pytest.fixture()
def fresh_tiny_model(tiny_setup):
    """A newly initialized copy so tests can mutate parameters freely."""
    _, _, cfg, vocab, schedule, codec, dataset = tiny_setup
    model = factory.build_model(cfg, vocab)
    factory.init_model(model, cfg["seed"])
    store = ParameterStore.from_model(model)
    return model, store, cfg, vocab, schedule, codec, dataset


def randomize_params(module: torch.nn.Module, seed: int = 0, std: float = 0.1):
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        if "norm" in name and name.endswith("weight"):
            p.data.normal_(1.0, 0.05, generator=gen)
        else:
            p.data.normal_(0.0, std, generator=gen)
