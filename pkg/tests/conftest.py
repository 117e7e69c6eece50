import numpy as np
import pytest

from anomgen import triplets

FIXTURE_DIR = __file__.rsplit("/", 1)[0] + "/fixtures/toy_dataset"


@pytest.fixture(scope="session")
def toy_manifest() -> triplets.DatasetManifest:
    return triplets.load_manifest(f"{FIXTURE_DIR}/manifest.jsonl")


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0xBEEF)


def random_image(rng, h=32, w=32):
    return rng.random((h, w, 3)).astype(np.float32)


def random_mask(rng, h=32, w=32, p=0.2):
    return rng.random((h, w)) < p
