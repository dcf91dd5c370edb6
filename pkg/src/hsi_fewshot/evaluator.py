"""Scene classification through the target branch, accuracy metrics and exports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from hsi_fewshot.errors import HsiError
from hsi_fewshot.network import MultiLevelModel
from hsi_fewshot.objectives import compute_prototypes, squared_distances
from hsi_fewshot.sampling import PatchBatch, extract_patches
from hsi_fewshot.scene_store import HsiScene


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class: list[float]
    confusion: list[list[int]]
    seed: int | None = None

    def as_dict(self) -> dict:
        return {"oa": self.oa, "aa": self.aa, "kappa": self.kappa, "per_class": self.per_class,
                "confusion": self.confusion, "seed": self.seed}


@dataclass
class AggregateReport:
    runs: list[MetricsReport]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.runs]

    def as_dict(self) -> dict:
        return {"seeds": self.seeds, "mean": self.mean, "std": self.std,
                "runs": [r.as_dict() for r in self.runs]}


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    """Rows are true classes 1..C, columns predicted 1..C."""
    true = np.asarray(true, dtype=np.int64) - 1
    pred = np.asarray(pred, dtype=np.int64) - 1
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def compute_metrics(cm, seed=None) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError("confusion matrix must be square and non-empty")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(cm).astype(float)
    rows = cm.sum(axis=1).astype(float)
    cols = cm.sum(axis=0).astype(float)
    oa = diag.sum() / total
    present = rows > 0
    per_class = np.where(present, diag / np.where(present, rows, 1.0), math.nan)
    aa = float(per_class[present].mean())
    p_e = float((rows * cols).sum() / total**2)
    kappa = (oa - p_e) / (1.0 - p_e) if p_e < 1.0 else 1.0
    return MetricsReport(float(oa), aa, float(kappa), [None if math.isnan(v) else float(v) for v in per_class],
                         cm.tolist(), seed)


def aggregate(reports: list[MetricsReport]) -> AggregateReport:
    """Mean and sample (n-1) standard deviation per metric; one run gives std 0."""
    if not reports:
        raise ValueError("no reports to aggregate")
    mean, std = {}, {}
    for key in ("oa", "aa", "kappa"):
        vals = np.array([getattr(r, key) for r in reports])
        mean[key] = float(vals.mean())
        std[key] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return AggregateReport(list(reports), mean, std)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


@torch.no_grad()
def embed_patches(model: MultiLevelModel, patches: np.ndarray, domain: str, batch_size: int = 1024) -> torch.Tensor:
    model.eval()
    out = [model.embed(torch.from_numpy(patches[s]), domain) for s in _batches(len(patches), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, model.feature_dim)


def nearest_class(features: torch.Tensor, references: torch.Tensor, ref_labels: torch.Tensor) -> torch.Tensor:
    """Label of the closest reference under squared Euclidean distance.

    ``argmin`` returns the first minimum and references are ordered by label,
    so ties go to the lower class id.
    """
    order = torch.argsort(ref_labels, stable=True)
    d = squared_distances(features, references[order])
    return ref_labels[order][d.argmin(dim=1)]


@torch.no_grad()
def classify_patches(model: MultiLevelModel, query: np.ndarray, support: PatchBatch, ways: int | None = None,
                     classifier: str = "prototype", batch_size: int = 1024, domain: str = "target") -> np.ndarray:
    """0-based class predictions for query patches given a labeled support set."""
    model.eval()
    s_feat = embed_patches(model, support.patches, domain, batch_size)
    s_lab = torch.from_numpy(support.labels).to(s_feat.device)
    ways = ways or int(s_lab.max()) + 1
    if classifier == "prototype":
        protos = compute_prototypes(s_feat, s_lab, ways)
        refs, ref_labels = protos.vectors, torch.arange(ways, device=s_feat.device)
    elif classifier == "nearest_support":
        refs, ref_labels = s_feat, s_lab
    else:
        raise ValueError(f"unknown classifier {classifier!r}")
    preds = []
    for s in _batches(len(query), batch_size):
        q = model.embed(torch.from_numpy(query[s]), domain)
        q = model.attention(q, s_feat)
        preds.append(nearest_class(q, refs, ref_labels).cpu())
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


def classify_scene(model: MultiLevelModel, scene: HsiScene, support: PatchBatch, classifier: str = "prototype",
                   batch_size: int = 1024, domain: str = "target") -> tuple[np.ndarray, np.ndarray]:
    """Predict every labeled non-support pixel of ``scene``.

    Returns an H x W map of scene class ids (0 for background and support
    pixels) and the confusion matrix over the predicted pixels.
    """
    C = scene.num_classes
    support_classes = set((support.labels + 1).tolist())
    missing = sorted(set(range(1, C + 1)) - support_classes)
    present = set(np.unique(scene.labels[scene.labels > 0]).tolist())
    if set(missing) & present:
        raise HsiError(f"support set has no samples for scene classes {sorted(set(missing) & present)}")
    taken = set(map(tuple, support.pixel_coords))
    rows, cols = np.nonzero(scene.labels)
    keep = [i for i, rc in enumerate(zip(rows.tolist(), cols.tolist())) if rc not in taken]
    rows, cols = rows[keep], cols[keep]
    pred_map = np.zeros(scene.labels.shape, dtype=np.int64)
    cm = np.zeros((C, C), dtype=np.int64)
    patch_size = support.patches.shape[1]
    chunk = max(batch_size, 1) * 8
    for s in _batches(len(rows), chunk):
        coords = np.stack([rows[s], cols[s]], axis=1)
        patches = extract_patches(scene, coords, patch_size)
        pred = classify_patches(model, patches, support, C, classifier, batch_size, domain) + 1
        pred_map[rows[s], cols[s]] = pred
        cm += confusion_matrix(scene.labels[rows[s], cols[s]], pred, C)
    return pred_map, cm


def default_palette(num_classes: int) -> dict[int, tuple[int, int, int]]:
    import matplotlib

    cmap = matplotlib.colormaps["tab20"]
    palette = {0: (0, 0, 0)}
    for c in range(1, num_classes + 1):
        r, g, b, _ = cmap((c - 1) % 20)
        palette[c] = (int(r * 255), int(g * 255), int(b * 255))
    return palette


def load_palette(path) -> dict[int, tuple[int, int, int]]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    palette = {int(k): tuple(int(v) for v in rgb) for k, rgb in raw.items()}
    palette[0] = (0, 0, 0)
    return palette


def render_class_map(predictions: np.ndarray, palette: dict, path) -> Path:
    """Write a paletted PNG whose pixel indices are the class ids."""
    predictions = np.asarray(predictions)
    missing = sorted(set(np.unique(predictions).tolist()) - set(palette))
    if missing:
        raise HsiError(f"no palette entry for classes {missing}")
    if predictions.max(initial=0) > 255 or predictions.min(initial=0) < 0:
        raise HsiError("class ids must lie in 0..255 for a paletted image")
    flat = [0] * 768
    for cls, rgb in palette.items():
        if 0 <= cls <= 255:
            flat[3 * cls:3 * cls + 3] = list(rgb)
    img = Image.fromarray(predictions.astype(np.uint8), mode="P")
    img.putpalette(flat)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path


def read_class_map(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img).astype(np.int64)


def export_embeddings(model: MultiLevelModel, batch: PatchBatch, path, batch_size: int = 1024) -> Path:
    """CSV with header ``f0..f{D-1},label,domain``; labels are scene class ids."""
    feats = embed_patches(model, batch.patches, batch.domain, batch_size).cpu().numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label", "domain"])
        for row, label in zip(feats, batch.labels.tolist()):
            writer.writerow([repr(float(v)) for v in row] + [label + 1, batch.domain])
    return path


def write_metrics(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.as_dict(), indent=2), encoding="utf-8")
    return path


def write_per_class_csv(report: MetricsReport, class_names: list[str], path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "samples", "accuracy"])
        for i, (name, acc) in enumerate(zip(class_names, report.per_class)):
            writer.writerow([i + 1, name, sum(report.confusion[i]), "" if acc is None else f"{acc:.6f}"])
    return Path(path)


def evaluate_state(state, data, cfg) -> tuple[MetricsReport, np.ndarray]:
    """Classify the target scene with the run's real few labeled pixels as support."""
    pred_map, cm = classify_scene(state.model, data.target, data.target_support, cfg.eval.classifier,
                                  cfg.eval.batch_size)
    return compute_metrics(cm, seed=cfg.seed), pred_map


def multi_seed_evaluate(cfg, seeds, source: HsiScene | None = None, target: HsiScene | None = None,
                        out_dir=None, progress=None) -> AggregateReport:
    """Full train + evaluate per seed, then mean and sample std per metric."""
    from hsi_fewshot.trainer import run_training

    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    reports = []
    for seed in seeds:
        run_cfg = cfg.with_overrides([f"seed={int(seed)}"])
        run_dir = Path(out_dir) / f"seed-{seed}" if out_dir is not None else None
        state, data = run_training(run_cfg, run_dir, source, target, progress)
        report, pred_map = evaluate_state(state, data, run_cfg)
        if run_dir is not None:
            write_metrics(report, run_dir / "metrics.json")
        reports.append(report)
    agg = aggregate(reports)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "aggregate.json").write_text(json.dumps(agg.as_dict(), indent=2), encoding="utf-8")
    return agg
