import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from voxseg import phantom
from voxseg.features import FeatureConfig
from voxseg.learner import Seed, parse_seed_file
from voxseg.volume import Box

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

SLAB_GRID = {"gamma_exponents": [-4, -3, -2, -1, 0]}


def data_path(name: str) -> str:
    return os.path.join(DATA_DIR, name)


def load_phantom(name: str):
    spec = phantom.load_spec(data_path(name))
    return phantom.make_phantom(spec)


def seed_schedule(prefix: str, iterations: int):
    return [parse_seed_file(data_path(f"{prefix}_seeds_iter{i}.txt"))
            for i in range(1, iterations + 1)]


@pytest.fixture(scope="session")
def slab_phantom():
    vol, labels = load_phantom("slab_phantom.json")
    gt = labels.read_region(Box.full(labels.dims)) > 0
    return vol, gt


@pytest.fixture(scope="session")
def sphere_phantom():
    vol, labels = load_phantom("sphere_phantom.json")
    gt = labels.read_region(Box.full(labels.dims)) > 0
    return vol, gt


@pytest.fixture(scope="session")
def small_phantom():
    spec = {
        "dims": [24, 24, 24], "dtype": "u8", "background": 40,
        "noise": {"sigma": 8.0, "seed": 5},
        "primitives": [{"shape": "box", "lo": [6, 6, 10], "hi": [18, 18, 15],
                        "value": 200}],
    }
    vol, labels = phantom.make_phantom(spec)
    gt = labels.read_region(Box.full(labels.dims)) > 0
    return vol, gt


SMALL_SEEDS = [
    Seed((12, 12, 12), 1), Seed((8, 8, 12), 1), Seed((15, 15, 12), 1),
    Seed((4, 4, 4), -1), Seed((20, 20, 20), -1), Seed((12, 12, 20), -1),
]


@pytest.fixture(scope="session")
def small_session(small_phantom):
    """A trained one-level session on the 24^3 box phantom."""
    from voxseg.learner import Session, train_iteration
    vol, _ = small_phantom
    config = FeatureConfig(features=("moments", "inertia"), env_size=3)
    session = Session(source=vol, config=config, delta=1.0, levels=1,
                      grid=SLAB_GRID, workers=1)
    train_iteration(session, SMALL_SEEDS)
    return session


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)


def write_slab_manifest(tmpdir, levels=1, workers=1, name="slab"):
    """Generate phantom files + manifest in tmpdir; returns manifest path."""
    from voxseg.volume import save_volume

    vol, labels = load_phantom("slab_phantom.json")
    base = os.path.join(tmpdir, "slab")
    save_volume(vol.read_region(Box.full(vol.dims)), base)
    save_volume(labels.read_region(Box.full(labels.dims)), base + "_labels")
    seeds = []
    for i in range(1, 5):
        src = data_path(f"slab_seeds_iter{i}.txt")
        dst = os.path.join(tmpdir, f"seeds{i}.txt")
        with open(src) as fin, open(dst, "w") as fout:
            fout.write(fin.read())
        seeds.append(f"seeds{i}.txt")
    manifest = {
        "name": name,
        "volume": "slab",
        "ground_truth": "slab_labels",
        "seed_files": seeds,
        "feature_config": {"features": ["moments", "inertia"], "env_size": 5},
        "delta": 1.0,
        "levels": levels,
        "workers": workers,
        "cv_seed": 0,
        "grid": SLAB_GRID,
        "postproc": {"threshold": 50, "speckle_k": 3, "speckle_eta": 18,
                     "select": "largest", "largest": 1},
        "out": os.path.join(tmpdir, "out"),
    }
    path = os.path.join(tmpdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path
