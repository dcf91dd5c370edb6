"""Learnable components: per-domain mappers, 3-D residual extractor,
query-to-support cross-attention and the conditional domain discriminator."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hsi_fewshot.sampling import PatchBatch


@dataclass
class ModelConfig:
    source_bands: int = 128
    target_bands: int = 200
    mapped_bands: int = 100  # d2
    ways: int = 16  # width of the class-probability vector in conditional mode
    heads: int = 8
    attention_layers: int = 2
    ffn_multiplier: int = 4
    disc_mode: str = "conditional"
    disc_hidden: int = 1024
    disc_dropout: float = 0.5
    grl_coefficient: float = 1.0
    patch_size: int = 9

    def __post_init__(self):
        if self.disc_mode not in ("conditional", "features_only"):
            raise ValueError(f"unknown discriminator mode {self.disc_mode!r}")
        extractor_output_shape(self.mapped_bands, self.patch_size)


def _pool_out(n: int, k: int) -> int:
    return math.ceil(n / k)


def extractor_output_shape(bands: int, patch_size: int) -> tuple[int, int, int, int]:
    """(channels, depth, height, width) produced by the extractor."""
    d, s = bands, patch_size
    for _ in range(2):
        d, s = _pool_out(d, 4), _pool_out(s, 2)
    d, s = d - 2, s - 2
    if d < 1 or s < 1:
        raise ValueError(
            f"{patch_size}x{patch_size}x{bands} input is too small for the extractor's final unpadded convolution"
        )
    return 32, d, s, s


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coefficient, None


def reverse_gradient(x: torch.Tensor, coefficient: float) -> torch.Tensor:
    return GradientReversal.apply(x, coefficient)


class Mapper(nn.Module):
    """1x1 Conv2D + BatchNorm taking d1 bands to d2 bands."""

    def __init__(self, in_bands: int, out_bands: int):
        super().__init__()
        self.in_bands = in_bands
        self.conv = nn.Conv2d(in_bands, out_bands, kernel_size=1)
        self.bn = nn.BatchNorm2d(out_bands)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # (N, P, P, B) -> (N, d2, P, P)
        if patches.shape[-1] != self.in_bands:
            raise ValueError(f"band-count mismatch: mapper expects {self.in_bands}, got {patches.shape[-1]}")
        return self.bn(self.conv(patches.permute(0, 3, 1, 2)))


class ResidualBlock3d(nn.Module):
    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(channels)
        self.conv3 = nn.Conv3d(channels, channels, 3, padding=1)
        self.bn3 = nn.BatchNorm3d(channels)
        self.skip = nn.Conv3d(in_channels, channels, 1, bias=False) if in_channels != channels else nn.Identity()
        self.pool = nn.MaxPool3d((4, 2, 2), ceil_mode=True)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return self.pool(F.relu(h + self.skip(x)))


class FeatureExtractor(nn.Module):
    def __init__(self, bands: int = 100, patch_size: int = 9):
        super().__init__()
        self.bands = bands
        self.patch_size = patch_size
        self.block1 = ResidualBlock3d(1, 8)
        self.block2 = ResidualBlock3d(8, 16)
        self.conv = nn.Conv3d(16, 32, 3)
        c, d, h, w = extractor_output_shape(bands, patch_size)
        self.out_features = c * d * h * w

    def forward(self, mapped: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        # (N, d2, P, P) -> (N, out_features)
        if mapped.shape[1:] != (self.bands, self.patch_size, self.patch_size):
            raise ValueError(
                f"extractor expects {self.bands}x{self.patch_size}x{self.patch_size} input, got {tuple(mapped.shape[1:])}"
            )
        x = self.block1(mapped.unsqueeze(1))
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        x = self.block2(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        x = self.conv(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        return x.flatten(1)


def attention_weights(queries: torch.Tensor, keys: torch.Tensor, d_k: int) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)); accepts a single query row or a matrix."""
    return torch.softmax(queries @ keys.transpose(-2, -1) / math.sqrt(d_k), dim=-1)


class CrossAttention(nn.Module):
    """Multi-head attention from query features to support features (K = V = S)."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.d_k = d_model // heads
        self.head_proj = nn.ModuleDict({
            "query": nn.Linear(d_model, d_model, bias=False),
            "key": nn.Linear(d_model, d_model, bias=False),
            "value": nn.Linear(d_model, d_model, bias=False),
        })
        self.out_proj = nn.Linear(d_model, d_model, bias=False)

    def _split(self, x):
        return x.view(x.shape[0], self.heads, self.d_k).transpose(0, 1)  # (h, n, d_k)

    def forward(self, query, support, return_weights: bool = False):
        q = self._split(self.head_proj["query"](query))
        k = self._split(self.head_proj["key"](support))
        v = self._split(self.head_proj["value"](support))
        weights = attention_weights(q, k, self.d_k)  # (h, nq, ns)
        heads = (weights @ v).transpose(0, 1).reshape(query.shape[0], -1)
        out = self.out_proj(heads)
        return (out, weights) if return_weights else out


class CrossAttentionLayer(CrossAttention):
    """Post-norm transformer layer: attention to the support set, then feed-forward."""

    def __init__(self, d_model: int, heads: int, ffn_multiplier: int = 4):
        super().__init__(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_multiplier * d_model),
            nn.ReLU(),
            nn.Linear(ffn_multiplier * d_model, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, query, support):
        q = self.norm1(query + super().forward(query, support))
        return self.norm2(q + self.ffn(q))


class CrossAttentionStack(nn.Module):
    def __init__(self, d_model: int, heads: int = 8, layers: int = 2, ffn_multiplier: int = 4):
        super().__init__()
        self.num_layers = layers
        for i in range(layers):
            self.add_module(f"layer{i}", CrossAttentionLayer(d_model, heads, ffn_multiplier))

    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.num_layers)]

    def forward(self, query: torch.Tensor, support: torch.Tensor) -> torch.Tensor:
        if support.shape[0] == 0:
            raise ValueError("cross-attention needs at least one support feature")
        for layer in self.layers():
            query = layer(query, support)
        return query


class DomainDiscriminator(nn.Module):
    def __init__(self, feature_dim: int, ways: int, mode: str = "conditional",
                 hidden: int = 1024, dropout: float = 0.5, grl_coefficient: float = 1.0):
        super().__init__()
        self.mode = mode
        self.ways = ways
        self.grl_coefficient = grl_coefficient
        self.in_features = feature_dim * ways if mode == "conditional" else feature_dim
        self.hidden = nn.Linear(self.in_features, hidden)
        self.out = nn.Linear(hidden, 1)
        self.dropout = dropout

    def forward(self, features, class_probs=None, coefficient: float | None = None):
        coefficient = self.grl_coefficient if coefficient is None else coefficient
        x = reverse_gradient(features, coefficient)
        if self.mode == "conditional":
            if class_probs is None:
                raise ValueError("conditional discriminator needs class probabilities")
            if class_probs.shape != (features.shape[0], self.ways):
                raise ValueError(
                    f"class_probs must be {features.shape[0]}x{self.ways}, got {tuple(class_probs.shape)}"
                )
            # outer product p ⊗ f, flattened; probabilities only condition, they are not trained through here
            x = torch.bmm(class_probs.detach().unsqueeze(2), x.unsqueeze(1)).flatten(1)
        x = F.dropout(F.relu(self.hidden(x)), self.dropout, self.training)
        return self.out(x).squeeze(1)


class MultiLevelModel(nn.Module):
    """Everything learnable; parameter names follow the checkpoint scheme."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mapper = nn.ModuleDict({
            "source": Mapper(cfg.source_bands, cfg.mapped_bands),
            "target": Mapper(cfg.target_bands, cfg.mapped_bands),
        })
        self.extractor = FeatureExtractor(cfg.mapped_bands, cfg.patch_size)
        self.feature_dim = self.extractor.out_features
        self.attention = CrossAttentionStack(self.feature_dim, cfg.heads, cfg.attention_layers, cfg.ffn_multiplier)
        self.discriminator = DomainDiscriminator(
            self.feature_dim, cfg.ways, cfg.disc_mode, cfg.disc_hidden, cfg.disc_dropout, cfg.grl_coefficient
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv3d)):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d, nn.LayerNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def device(self):
        return next(self.parameters()).device

    def map_patches(self, batch: PatchBatch | torch.Tensor, domain: str | None = None) -> torch.Tensor:
        if isinstance(batch, PatchBatch):
            domain = domain or batch.domain
            batch = torch.from_numpy(batch.patches)
        return self.mapper[domain](batch.to(self.device))

    def embed(self, batch: PatchBatch | torch.Tensor, domain: str | None = None) -> torch.Tensor:
        return self.extractor(self.map_patches(batch, domain))


# -- checkpoint archive -------------------------------------------------------

_INDEX = "index.json"
_TENSORS = "tensors.bin"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_archive(path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict) -> Path:
    """Single zip archive: ``index.json`` + little-endian ``tensors.bin``.

    Floating tensors are stored as float32, integer tensors as int64,
    byte tensors as uint8.
    """
    path = Path(path)
    blob = io.BytesIO()
    entries = []
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        if arr.dtype == np.uint8:
            arr = arr.astype("u1")
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            arr = arr.astype("<i8")
        else:
            arr = arr.astype("<f4")
        data = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": blob.tell(), "nbytes": len(data)})
        blob.write(data)
    index = {"meta": meta, "tensors": entries}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep identical checkpoints byte-identical
        zf.writestr(zipfile.ZipInfo(_INDEX, _EPOCH), json.dumps(index, indent=1, sort_keys=True))
        zf.writestr(zipfile.ZipInfo(_TENSORS, _EPOCH), blob.getvalue())
    return path


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read(_INDEX))
        payload = zf.read(_TENSORS)
    tensors = {}
    for e in index["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, index["meta"]


def model_tensors(model: MultiLevelModel) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def load_model_tensors(model: MultiLevelModel, tensors: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
    model.load_state_dict({k: torch.as_tensor(tensors[k]).to(state[k].dtype) for k in state})
