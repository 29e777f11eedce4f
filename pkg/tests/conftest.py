import numpy as np
import pytest
import torch

from kinsynth import toy
from kinsynth.config import parse_config
from kinsynth.encoder_zoo import EncoderArch, TinyEncoderConfig, save_encoder, train_tiny_face_encoder

SIDE = 32


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    return toy.make_toy_dataset(tmp_path_factory.mktemp("toy"), n_train=48, n_val=16, n_reg=128,
                                side=SIDE, seed=0)


@pytest.fixture(scope="session")
def identity_set():
    """Disjoint train/held-out renders of the same 10 identities."""
    imgs, labels = toy.identity_views(10, 24, SIDE, seed=11)
    rng = np.random.default_rng(0)
    held = np.zeros(len(labels), bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        held[rng.choice(idx, 6, replace=False)] = True
    return imgs[~held], labels[~held], imgs[held], labels[held]


@pytest.fixture(scope="session")
def tiny_encoder():
    imgs, labels = toy.identity_views(20, 30, SIDE, seed=1)
    return train_tiny_face_encoder(imgs, labels, TinyEncoderConfig(arch=EncoderArch(side=SIDE), epochs=8, seed=0))


@pytest.fixture(scope="session")
def encoder_weights(tiny_encoder, tmp_path_factory):
    return save_encoder(tiny_encoder, tmp_path_factory.mktemp("enc") / "encoder.npz")


@pytest.fixture
def make_config(toy_data, encoder_weights):
    def _make(**overrides):
        tree = {
            "name": "test",
            "seed": 0,
            "checkpoint_every": 1000,
            "data": {"pairs": str(toy_data.train_pairs), "attributes": str(toy_data.attributes),
                     "image_side": SIDE},
            "encoder": {"weights": str(encoder_weights)},
            "optim": {"batch_size": 4, "max_steps": 10},
        }
        for key, value in overrides.items():
            node = tree
            *parents, leaf = key.split("__")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return parse_config(tree)

    return _make


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
