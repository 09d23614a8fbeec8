"""Shared lightweight fixtures for tests that need sample-like objects."""

import numpy as np

from kernelbias.imgfreq import ImageTensor


class FakeSample:
    def __init__(self, image, category, attributes=None, sample_id="s0"):
        self.image = image if isinstance(image, ImageTensor) else ImageTensor(image)
        self.category = category
        self.attributes = attributes or {}
        self.id = sample_id


def separable_samples(rng, n=200, size=8, noise=0.05, spread=0.2):
    """Two-category set separable on mean intensity; alternating group labels."""
    samples = []
    for i in range(n):
        cat = i % 2
        base = 0.5 - spread if cat == 0 else 0.5 + spread
        img = np.clip(base + noise * rng.standard_normal((1, size, size)), 0, 1)
        samples.append(FakeSample(img, cat, {"group": "a" if i % 4 < 2 else "b"}, f"s{i}"))
    return samples
