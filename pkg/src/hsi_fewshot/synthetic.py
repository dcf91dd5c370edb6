"""Synthetic cross-domain scene pairs for smoke runs and desk-scale checks."""
from __future__ import annotations

import numpy as np

from hsi_fewshot.scene_store import HsiScene


def class_signatures(classes: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random reflectance curves in [0.1, 0.9], one per class."""
    grid = np.linspace(0.0, 1.0, bands)
    sigs = []
    for _ in range(classes):
        knots = rng.uniform(0.15, 0.85, size=5)
        sigs.append(np.interp(grid, np.linspace(0.0, 1.0, 5), knots))
    return np.asarray(sigs)


def class_layout(size: int, classes: int, rng: np.random.Generator, centers_per_class: int = 3,
                 background_fraction: float = 0.15) -> np.ndarray:
    """Voronoi regions of random centres; a random share of pixels stays unlabeled."""
    centers = rng.uniform(0, size, size=(classes * centers_per_class, 2))
    owner = np.repeat(np.arange(1, classes + 1), centers_per_class)
    rr, cc = np.mgrid[0:size, 0:size]
    d2 = (rr[..., None] - centers[:, 0]) ** 2 + (cc[..., None] - centers[:, 1]) ** 2
    labels = owner[d2.argmin(axis=-1)]
    labels[rng.random((size, size)) < background_fraction] = 0
    return labels


def render(labels: np.ndarray, signatures: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    cube = np.empty((h, w, signatures.shape[1]))
    cube[:] = signatures.mean(axis=0)
    mask = labels > 0
    cube[mask] = signatures[labels[mask] - 1]
    return cube + rng.normal(0.0, noise, size=cube.shape)


def make_synthetic_pair(seed: int = 0, size: int = 32, bands: int = 20, classes: int = 3, noise: float = 0.05,
                        gain: float = 0.8, offset: float = 0.1, band_shift: float = 1.5,
                        centers_per_class: int = 3) -> tuple[HsiScene, HsiScene]:
    """Source and target scenes sharing class signatures.

    The target sees each signature displaced by ``band_shift`` bands along the
    spectral axis and then through ``gain * x + offset``; its spatial layout
    and noise are drawn independently. Fewer ``centers_per_class`` gives
    larger homogeneous regions and fewer patches straddling a class boundary.
    """
    rng = np.random.default_rng(seed)
    sigs = class_signatures(classes, bands, rng)
    grid = np.arange(bands, dtype=float)
    shifted = np.stack([np.interp(grid - band_shift, grid, s) for s in sigs])
    target_sigs = gain * shifted + offset
    names = [f"class{i + 1}" for i in range(classes)]
    src_labels = class_layout(size, classes, rng, centers_per_class)
    tgt_labels = class_layout(size, classes, rng, centers_per_class)
    source = HsiScene(render(src_labels, sigs, noise, rng), src_labels, names, "synthetic-source")
    target = HsiScene(render(tgt_labels, target_sigs, noise * gain, rng), tgt_labels, names, "synthetic-target")
    return source, target
