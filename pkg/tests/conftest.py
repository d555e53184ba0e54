import numpy as np
import pytest

from fedssl.data import Sample


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class MemoryStore:
    """In-memory stand-in for ImageStore: path -> image tensor."""

    def __init__(self, images: dict):
        self.images = images
        self.load_calls = 0

    def get(self, sample: Sample) -> np.ndarray:
        self.load_calls += 1
        return self.images[sample.path]


def make_memory_dataset(n_images, size=16, seed=0, site="A", label_cycle=None,
                        split="train"):
    """Synthetic in-memory manifest + store; two images per group."""
    g = rng(seed)
    images = {}
    samples = []
    for i in range(n_images):
        path = f"mem/{site}_{i}.png"
        images[path] = g.uniform(size=(3, size, size))
        label = label_cycle[i % len(label_cycle)] if label_cycle else "unlabeled"
        samples.append(Sample(f"{site}{i:04d}", site, f"{site}-g{i // 2:04d}", 1,
                              label, split, path))
    return samples, MemoryStore(images)


@pytest.fixture
def mem_dataset():
    return make_memory_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """One rendered tiny two-site dataset, shared across tests that need disk."""
    from fedssl.data import generate_synthetic_sites, tiny_two_site_config
    root = tmp_path_factory.mktemp("tinydata")
    cfg = tiny_two_site_config()
    manifest_a, manifest_b, groups = generate_synthetic_sites(cfg, root, seed=1234)
    return root, cfg, manifest_a, manifest_b, groups
