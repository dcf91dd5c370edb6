"""Canonical on-disk hyperspectral scenes.

A scene directory holds three files::

    meta.json   {"height", "width", "bands", "class_names", "scene_id"}
    cube.bin    float32 little-endian, row-major, band fastest
    labels.bin  uint16 little-endian, row-major (0 = unlabeled)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hsi_fewshot.errors import SceneFormatError

CUBE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u2")


@dataclass
class HsiScene:
    cube: np.ndarray  # (H, W, B) float32
    labels: np.ndarray  # (H, W) int64, 0 = background
    class_names: list[str]
    scene_id: str = "scene"
    role: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.cube = np.asarray(self.cube, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = [str(c) for c in self.class_names]
        validate_scene(self)

    @property
    def height(self) -> int:
        return self.cube.shape[0]

    @property
    def width(self) -> int:
        return self.cube.shape[1]

    @property
    def bands(self) -> int:
        return self.cube.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def with_role(self, role: str) -> "HsiScene":
        if role not in ("source", "target"):
            raise ValueError(f"unknown scene role {role!r}")
        out = HsiScene(self.cube, self.labels, self.class_names, self.scene_id)
        out.role = role
        return out


def validate_scene(scene: HsiScene) -> None:
    cube, labels = scene.cube, scene.labels
    if cube.ndim != 3 or min(cube.shape) < 1:
        raise SceneFormatError(f"cube must be a non-empty H x W x B array, got shape {cube.shape}")
    if labels.shape != cube.shape[:2]:
        raise SceneFormatError(
            f"labels shape {labels.shape} does not match cube spatial shape {cube.shape[:2]}"
        )
    if not np.isfinite(cube).all():
        raise SceneFormatError("cube contains NaN or Inf values")
    if labels.size and labels.min() < 0:
        raise SceneFormatError("negative label value")
    if labels.size and labels.max() > len(scene.class_names):
        raise SceneFormatError(
            f"label out of range: max label {int(labels.max())} exceeds class count {len(scene.class_names)}"
        )


def _read_meta(path: Path) -> dict:
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise SceneFormatError(f"missing file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid meta.json: {exc}") from exc
    for key in ("height", "width", "bands", "class_names"):
        if key not in meta:
            raise SceneFormatError(f"meta.json missing key {key!r}")
    for key in ("height", "width", "bands"):
        if not isinstance(meta[key], int) or meta[key] <= 0:
            raise SceneFormatError(f"meta.json {key} must be a positive integer")
    return meta


def _read_payload(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    if not path.is_file():
        raise SceneFormatError(f"missing file: {path}")
    raw = path.read_bytes()
    expected = count * dtype.itemsize
    if len(raw) != expected:
        raise SceneFormatError(
            f"payload size mismatch: {path.name} has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=dtype)


def load_scene(path) -> HsiScene:
    path = Path(path)
    meta = _read_meta(path)
    h, w, b = meta["height"], meta["width"], meta["bands"]
    cube = _read_payload(path / "cube.bin", CUBE_DTYPE, h * w * b).reshape(h, w, b)
    labels = _read_payload(path / "labels.bin", LABEL_DTYPE, h * w).reshape(h, w)
    return HsiScene(
        cube=cube.astype(np.float32),
        labels=labels.astype(np.int64),
        class_names=list(meta["class_names"]),
        scene_id=str(meta.get("scene_id", path.name)),
    )


def save_scene(scene: HsiScene, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if scene.labels.max(initial=0) > np.iinfo(LABEL_DTYPE).max:
        raise SceneFormatError("label values do not fit in uint16")
    meta = {
        "height": scene.height,
        "width": scene.width,
        "bands": scene.bands,
        "class_names": scene.class_names,
        "scene_id": scene.scene_id,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    (path / "cube.bin").write_bytes(np.ascontiguousarray(scene.cube, dtype=CUBE_DTYPE).tobytes())
    (path / "labels.bin").write_bytes(np.ascontiguousarray(scene.labels, dtype=LABEL_DTYPE).tobytes())
    return path


def convert_raw(cube_path, labels_path, shape_json, out_dir) -> Path:
    """Build a scene directory from raw dumps.

    ``shape_json`` is a JSON file with ``height``, ``width``, ``bands`` and
    ``class_names``; optional keys are ``scene_id``, ``cube_dtype``
    (default ``float32``), ``label_dtype`` (default ``uint16``) and
    ``interleave`` (``bip`` = band fastest, the default, or ``bsq`` =
    band-major planes).
    """
    shape = json.loads(Path(shape_json).read_text(encoding="utf-8"))
    for key in ("height", "width", "bands", "class_names"):
        if key not in shape:
            raise SceneFormatError(f"shape description missing key {key!r}")
    h, w, b = int(shape["height"]), int(shape["width"]), int(shape["bands"])
    cube_dtype = np.dtype(shape.get("cube_dtype", "float32")).newbyteorder("<")
    label_dtype = np.dtype(shape.get("label_dtype", "uint16")).newbyteorder("<")
    cube = _read_payload(Path(cube_path), cube_dtype, h * w * b)
    labels = _read_payload(Path(labels_path), label_dtype, h * w)
    interleave = shape.get("interleave", "bip").lower()
    if interleave == "bip":
        cube = cube.reshape(h, w, b)
    elif interleave == "bsq":
        cube = cube.reshape(b, h, w).transpose(1, 2, 0)
    else:
        raise SceneFormatError(f"unsupported interleave {interleave!r}")
    scene = HsiScene(
        cube=cube.astype(np.float32),
        labels=labels.reshape(h, w).astype(np.int64),
        class_names=list(shape["class_names"]),
        scene_id=str(shape.get("scene_id", Path(out_dir).name)),
    )
    return save_scene(scene, out_dir)


def normalize_scene(scene: HsiScene) -> HsiScene:
    """Min-max scale every band to [0, 1]; constant bands become 0."""
    cube = scene.cube.astype(np.float64)
    lo = cube.min(axis=(0, 1), keepdims=True)
    span = cube.max(axis=(0, 1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (cube - lo) / safe, 0.0)
    out = HsiScene(scaled.astype(np.float32), scene.labels.copy(), scene.class_names, scene.scene_id)
    out.role = scene.role
    return out


def labeled_pixel_index(scene: HsiScene) -> dict[int, list[tuple[int, int]]]:
    rows, cols = np.nonzero(scene.labels)  # row-major order
    index: dict[int, list[tuple[int, int]]] = {}
    for r, c in zip(rows.tolist(), cols.tolist()):
        index.setdefault(int(scene.labels[r, c]), []).append((r, c))
    return dict(sorted(index.items()))
