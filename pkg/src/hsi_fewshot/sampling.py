"""Patch extraction, few-label target pools and episode construction.

All randomness comes from an explicit ``numpy.random.Generator``; nothing
here touches global random state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hsi_fewshot.errors import SamplingError
from hsi_fewshot.scene_store import HsiScene, labeled_pixel_index


@dataclass
class SamplerConfig:
    patch_size: int = 9
    train_ways: int | None = None  # None: min(source classes, target classes)
    train_shots: int = 1
    train_queries_per_class: int = 19
    target_labels_per_class: int = 5
    augmented_per_class: int = 200
    noise_sigma: float = 0.01
    domain_batch_size: int | None = None  # None: episode patch count
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be an odd positive integer, got {self.patch_size}")
        for name in ("train_shots", "train_queries_per_class", "target_labels_per_class", "augmented_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.train_ways is not None and self.train_ways < 1:
            raise ValueError("train_ways must be positive")
        if self.domain_batch_size is not None and self.domain_batch_size < 1:
            raise ValueError("domain_batch_size must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.augmented_per_class < self.target_labels_per_class:
            raise ValueError("augmented_per_class must be >= target_labels_per_class")

    @property
    def episode_size(self) -> int:
        if self.train_ways is None:
            raise ValueError("train_ways is unresolved")
        return self.train_ways * (self.train_shots + self.train_queries_per_class)


@dataclass
class PatchBatch:
    patches: np.ndarray  # (N, P, P, B) float32
    labels: np.ndarray  # (N,) int64, local class ids
    domain: str
    pixel_coords: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.patches.ndim != 4 or self.patches.shape[1] != self.patches.shape[2]:
            raise SamplingError(f"patches must be N x P x P x B, got {self.patches.shape}")
        if self.patches.shape[1] % 2 == 0:
            raise SamplingError("patch side must be odd")
        if len(self.labels) != len(self.patches):
            raise SamplingError("labels and patches differ in length")
        if self.pixel_coords and len(self.pixel_coords) != len(self.patches):
            raise SamplingError("pixel_coords and patches differ in length")
        if self.domain not in ("source", "target"):
            raise SamplingError(f"unknown domain {self.domain!r}")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def bands(self) -> int:
        return self.patches.shape[3]

    def subset(self, idx) -> "PatchBatch":
        idx = np.asarray(idx, dtype=np.int64)
        coords = [self.pixel_coords[i] for i in idx] if self.pixel_coords else []
        return PatchBatch(self.patches[idx], self.labels[idx], self.domain, coords)


@dataclass
class Episode:
    ways: int
    shots: int
    queries_per_class: int
    support: PatchBatch
    query: PatchBatch
    class_id_map: list[int]

    @property
    def domain(self) -> str:
        return self.support.domain


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # mirror without repeating the edge pixel: -1 -> 1, n -> n-2
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patch(scene: HsiScene, row: int, col: int, patch_size: int) -> np.ndarray:
    """P x P x B window centred on (row, col), mirror-padded at the borders."""
    if not (0 <= row < scene.height and 0 <= col < scene.width):
        raise SamplingError(f"center ({row}, {col}) outside scene {scene.height}x{scene.width}")
    return extract_patches(scene, [(row, col)], patch_size)[0]


def extract_patches(scene: HsiScene, coords, patch_size: int) -> np.ndarray:
    if patch_size < 1 or patch_size % 2 == 0:
        raise SamplingError(f"patch_size must be odd and positive, got {patch_size}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) and (
        coords[:, 0].min() < 0 or coords[:, 0].max() >= scene.height
        or coords[:, 1].min() < 0 or coords[:, 1].max() >= scene.width
    ):
        raise SamplingError("patch center outside scene")
    half = patch_size // 2
    offsets = np.arange(-half, half + 1)
    rows = _reflect(coords[:, :1] + offsets, scene.height)  # (N, P)
    cols = _reflect(coords[:, 1:] + offsets, scene.width)
    return scene.cube[rows[:, :, None], cols[:, None, :]]


def batch_from_pixels(scene: HsiScene, coords, labels, domain: str, patch_size: int) -> PatchBatch:
    coords = [tuple(int(v) for v in c) for c in coords]
    return PatchBatch(extract_patches(scene, coords, patch_size), labels, domain, coords)


def select_target_labels(scene: HsiScene, per_class: int, rng: np.random.Generator,
                         patch_size: int = 9, domain: str = "target") -> PatchBatch:
    """Draw ``per_class`` labeled pixels uniformly from every class of ``scene``.

    Labels in the returned batch are ``scene class id - 1``.
    """
    coords, labels = [], []
    for cls, pixels in labeled_pixel_index(scene).items():
        if len(pixels) < per_class:
            raise SamplingError(f"class {cls} has {len(pixels)} labeled pixels, need {per_class}")
        pick = rng.choice(len(pixels), size=per_class, replace=False)
        coords.extend(pixels[i] for i in sorted(pick))
        labels.extend([cls - 1] * per_class)
    if not coords:
        raise SamplingError("scene has no labeled pixels")
    return batch_from_pixels(scene, coords, labels, domain, patch_size)


def augment_target_pool(pool: PatchBatch, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> PatchBatch:
    """Grow each class to ``augmented_per_class`` samples with Gaussian copies.

    The originals are kept verbatim; the remaining slots cycle over the
    originals and add N(0, noise_sigma^2) to every element.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if len(pool) == 0:
        raise SamplingError("empty target pool")
    classes = np.unique(pool.labels)
    expected = np.arange(classes.max() + 1)
    if not np.array_equal(classes, expected):
        missing = sorted(set(expected.tolist()) - set(classes.tolist()))
        raise SamplingError(f"empty class in pool: {missing}")
    patches, labels, coords = [], [], []
    for cls in classes:
        idx = np.flatnonzero(pool.labels == cls)
        if len(idx) > cfg.augmented_per_class:
            raise SamplingError(f"class {cls} already has more than {cfg.augmented_per_class} samples")
        originals = pool.patches[idx]
        extra = cfg.augmented_per_class - len(idx)
        cycle = np.arange(extra) % len(idx)
        noise = rng.normal(0.0, cfg.noise_sigma, size=(extra,) + originals.shape[1:]) if cfg.noise_sigma > 0 \
            else np.zeros((extra,) + originals.shape[1:])
        copies = (originals[cycle] + noise).astype(np.float32)
        patches.append(np.concatenate([originals, copies]))
        labels.append(np.full(cfg.augmented_per_class, cls))
        if pool.pixel_coords:
            src = [pool.pixel_coords[i] for i in idx]
            coords.extend(src + [src[j] for j in cycle])
    return PatchBatch(np.concatenate(patches), np.concatenate(labels), pool.domain, coords)


def _draw_episode(groups: dict[int, list[int]], ways: int, shots: int, queries: int,
                  rng: np.random.Generator, pixel_key=None):
    """Pick classes and per-class sample indices for one episode.

    ``groups`` maps a class id to candidate sample indices. When ``pixel_key``
    is given, query candidates exclude every sample sharing a pixel with the
    support, so repeated copies of one pixel never straddle the split.
    """
    def distinct(members):
        return len({pixel_key(i) for i in members}) if pixel_key else len(members)

    eligible = [c for c, m in sorted(groups.items())
                if len(m) >= shots + queries and distinct(m) >= shots]
    if len(eligible) < ways:
        raise SamplingError(f"only {len(eligible)} eligible classes, need {ways}")
    chosen = rng.choice(len(eligible), size=ways, replace=False)
    class_ids = [eligible[i] for i in chosen]
    support_idx, query_idx = [], []
    for cls in class_ids:
        members = np.asarray(groups[cls])
        order = rng.permutation(len(members))
        if pixel_key is None:
            support_idx.append(members[order[:shots]])
            query_idx.append(members[order[shots:shots + queries]])
            continue
        picked, used = [], set()
        for i in order:
            key = pixel_key(members[i])
            if key not in used:
                picked.append(members[i])
                used.add(key)
            if len(picked) == shots:
                break
        rest = [members[i] for i in order if pixel_key(members[i]) not in used]
        if len(rest) < queries:
            raise SamplingError(f"class {cls} lacks {queries} queries disjoint from its support")
        support_idx.append(np.asarray(picked))
        query_idx.append(np.asarray(rest[:queries]))
    return class_ids, support_idx, query_idx


def sample_episode(index_by_class: dict[int, list[tuple[int, int]]], scene: HsiScene, cfg: SamplerConfig,
                   rng: np.random.Generator, ways: int | None = None, domain: str | None = None) -> Episode:
    """Sample a C-way K-shot episode from labeled scene pixels."""
    ways = ways or cfg.train_ways
    if ways is None:
        raise SamplingError("episode ways not configured")
    domain = domain or scene.role or "source"
    groups = {c: list(range(len(p))) for c, p in index_by_class.items()}
    class_ids, sup, qry = _draw_episode(groups, ways, cfg.train_shots, cfg.train_queries_per_class, rng)

    def build(parts):
        coords, labels = [], []
        for local, (cls, idx) in enumerate(zip(class_ids, parts)):
            coords.extend(index_by_class[cls][i] for i in idx)
            labels.extend([local] * len(idx))
        return batch_from_pixels(scene, coords, labels, domain, cfg.patch_size)

    return Episode(ways, cfg.train_shots, cfg.train_queries_per_class, build(sup), build(qry), class_ids)


def sample_pool_episode(pool: PatchBatch, cfg: SamplerConfig, rng: np.random.Generator,
                        ways: int | None = None) -> Episode:
    """Sample an episode from a patch pool (the augmented target samples).

    Support and query never share a source pixel; the returned
    ``class_id_map`` holds scene class ids (pool label + 1).
    """
    ways = ways or cfg.train_ways
    if ways is None:
        raise SamplingError("episode ways not configured")
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(pool.labels.tolist()):
        groups.setdefault(lab, []).append(i)
    key = (lambda i: pool.pixel_coords[i]) if pool.pixel_coords else None
    class_ids, sup, qry = _draw_episode(groups, ways, cfg.train_shots, cfg.train_queries_per_class, rng, key)

    def build(parts):
        idx = np.concatenate(parts)
        batch = pool.subset(idx)
        batch.labels = np.repeat(np.arange(len(parts)), [len(p) for p in parts])
        return batch

    return Episode(ways, cfg.train_shots, cfg.train_queries_per_class, build(sup), build(qry),
                   [c + 1 for c in class_ids])


def sample_domain_batch(scene: HsiScene, size: int, rng: np.random.Generator, patch_size: int = 9,
                        labeled_only: bool = False, domain: str | None = None) -> PatchBatch:
    """``size`` patches centred on uniformly random pixels.

    Labels are the 0-based class id where the pixel is labeled, -1 otherwise.
    """
    if size <= 0:
        raise SamplingError(f"domain batch size must be positive, got {size}")
    domain = domain or scene.role or "source"
    if labeled_only:
        flat = np.flatnonzero(scene.labels.ravel())
        if len(flat) == 0:
            raise SamplingError("scene has no labeled pixels")
        pick = flat[rng.integers(0, len(flat), size=size)]
    else:
        pick = rng.integers(0, scene.height * scene.width, size=size)
    rows, cols = np.divmod(pick, scene.width)
    coords = list(zip(rows.tolist(), cols.tolist()))
    labels = scene.labels[rows, cols] - 1
    return batch_from_pixels(scene, coords, labels, domain, patch_size)
