"""Report figures written next to the JSON/CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402


def _moving_average(values, window):
    values = np.asarray(values, dtype=float)
    if len(values) < window or window <= 1:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_training_curves(rows: list[dict], path, window: int = 25) -> Path:
    """Loss components and query accuracy against step, split by episode domain."""
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    keys = [("l_con", "contrastive"), ("l_fsl", "few-shot"), ("l_d", "domain"), ("query_accuracy", "query accuracy")]
    for ax, (key, title) in zip(axes.ravel(), keys):
        for domain, color in (("source", "tab:blue"), ("target", "tab:orange")):
            sel = [r for r in rows if r.get("domain") == domain]
            if not sel:
                continue
            steps = np.array([r["step"] for r in sel])
            smooth = _moving_average([r[key] for r in sel], window)
            ax.plot(steps[len(steps) - len(smooth):], smooth, color=color, lw=1.2, label=domain)
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0, 0].legend(frameon=False)
    for ax in axes[1]:
        ax.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(confusion, class_names: list[str], path, normalize: bool = True) -> Path:
    cm = np.asarray(confusion, dtype=float)
    if normalize:
        rows = cm.sum(axis=1, keepdims=True)
        cm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    n = len(cm)
    size = max(4.0, 0.45 * n + 2)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(cm, cmap="Blues", vmin=0, vmax=1 if normalize else None)
    ax.set_xticks(range(n), class_names, rotation=90, fontsize=8)
    ax.set_yticks(range(n), class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    return _save(fig, path)


def plot_class_map(predictions, palette: dict, class_names: list[str], path, title: str | None = None) -> Path:
    pred = np.asarray(predictions)
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    for cls, color in palette.items():
        rgb[pred == cls] = color
    fig, ax = plt.subplots(figsize=(7, 6))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    handles = [Patch(color=np.array(palette[i + 1]) / 255, label=name)
               for i, name in enumerate(class_names) if i + 1 in palette]
    ax.legend(handles=handles, loc="center left", bbox_to_anchor=(1.01, 0.5), frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
