"""Node encoders: frozen CNN visual features, transformer sequential
features, and the cross-modal fusion that merges them."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

logger = logging.getLogger(__name__)

_BACKBONES = {
    "resnet18": (torchvision.models.resnet18, "ResNet18_Weights"),
    "resnet50": (torchvision.models.resnet50, "ResNet50_Weights"),
}
# names that are recognised in configs but have no implementation here
UNSUPPORTED_BACKBONES = ("vit", "gnn")

_download_failed: set[str] = set()


def _pretrained_state(name: str):
    if name in _download_failed:
        return None
    try:
        weights = getattr(torchvision.models, _BACKBONES[name][1]).DEFAULT
        return weights.get_state_dict(progress=False)
    except Exception as exc:  # offline, blocked, corrupt cache...
        _download_failed.add(name)
        logger.debug("pretrained %s unavailable: %s", name, exc)
        return None


class Backbone(nn.Module):
    """Residual CNN trunk up to its last convolutional stage.

    ``weights_path`` points at a torchvision-style state dict. Without it the
    packaged pretrained weights are tried once; if those cannot be fetched the
    network keeps a fixed-seed random initialisation and a warning is logged.
    """

    def __init__(self, name: str = "resnet18", weights_path: str | None = None,
                 pretrained: bool = True, frozen: bool = True, seed: int = 0):
        super().__init__()
        if name in UNSUPPORTED_BACKBONES:
            raise NotImplementedError(f"backbone {name!r} is not implemented")
        if name not in _BACKBONES:
            raise ValueError(f"unknown backbone {name!r}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _BACKBONES[name][0](weights=None)

        state = None
        if weights_path is not None and Path(weights_path).is_file():
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        elif pretrained:
            state = _pretrained_state(name)
        if state is not None:
            net.load_state_dict(state)
            self.weights_source = str(weights_path or "torchvision")
        else:
            logger.warning("no pretrained weights for %s; using seed-%d random initialisation", name, seed)
            self.weights_source = f"random-seed-{seed}"

        self.name = name
        self.out_channels = net.fc.in_features
        self.trunk = nn.Sequential(*list(net.children())[:-2])
        self.frozen = frozen
        if frozen:
            self.trunk.requires_grad_(False)
            self.trunk.eval()
        # batch-norm-folded channels-last copy for frozen inference; kept out
        # of the state dict and rebuilt when weights or dtype change
        self.__dict__["_fast"] = None
        self.register_load_state_dict_post_hook(lambda mod, keys: mod.__dict__.update(_fast=None))

    def train(self, mode: bool = True):
        # batch-norm statistics must not drift while frozen
        return super().train(mode and not self.frozen)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 224, 224, 3) or (B, 3, 224, 224) -> (B, C, 7, 7)."""
        if images.shape[-1] == 3:
            images = images.permute(0, 3, 1, 2)
        dtype = next(self.trunk.parameters()).dtype
        images = images.to(dtype)
        if self.frozen:
            fast = self.__dict__["_fast"]
            if fast is None or fast[0] != dtype:
                from torch.fx.experimental.optimization import fuse
                fast = (dtype, fuse(copy.deepcopy(self.trunk)).to(memory_format=torch.channels_last))
                self.__dict__["_fast"] = fast
            with torch.no_grad():
                return fast[1](images.contiguous(memory_format=torch.channels_last)).contiguous()
        return self.trunk(images.contiguous())


class FeatureCache:
    """LRU map from raster bytes to backbone feature maps."""

    def __init__(self, max_items: int = 4096):
        self.max_items = max_items
        self._store: OrderedDict[bytes, torch.Tensor] = OrderedDict()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(pixels: np.ndarray) -> bytes:
        return hashlib.sha1(np.ascontiguousarray(pixels).tobytes()).digest()

    def get(self, key):
        val = self._store.get(key)
        if val is None:
            self.misses += 1
            return None
        self.hits += 1
        self._store.move_to_end(key)
        return val

    def put(self, key, value):
        self._store[key] = value
        self._store.move_to_end(key)
        while len(self._store) > self.max_items:
            self._store.popitem(last=False)

    def __len__(self):
        return len(self._store)

    def clear(self):
        self._store.clear()


def extract_feature_maps(backbone: Backbone, pixels: list[np.ndarray],
                         cache: FeatureCache | None = None, chunk: int = 32) -> torch.Tensor:
    """Feature maps for a list of (224, 224, 3) rasters, batched and cached."""
    out: list[torch.Tensor | None] = [None] * len(pixels)
    todo = []
    keys = [FeatureCache.key(p) for p in pixels] if cache is not None else None
    for i, p in enumerate(pixels):
        hit = cache.get(keys[i]) if cache is not None else None
        if hit is None:
            todo.append(i)
        else:
            out[i] = hit
    for s in range(0, len(todo), chunk):
        idx = todo[s:s + chunk]
        imgs = torch.from_numpy(np.stack([pixels[i] for i in idx]))
        feats = backbone(imgs)
        for j, i in enumerate(idx):
            out[i] = feats[j]
            if cache is not None:
                cache.put(keys[i], feats[j])
    return torch.stack(out)


def global_feature(G: torch.Tensor) -> torch.Tensor:
    """Adaptive average pool to 1x1: (..., C, H, W) -> (..., C)."""
    return G.mean(dim=(-2, -1))


def local_feature(G: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of G (B, C, H, W) at unit-square coords (B, n, 2).

    x runs along W and y along H, at continuous positions x*(W-1), y*(H-1).
    Returns (B, n, C).
    """
    B, C, H, W = G.shape
    coords = coords.to(G.dtype).clamp(0.0, 1.0)
    px = coords[..., 0] * (W - 1)
    py = coords[..., 1] * (H - 1)
    # snap rounding noise so grid-aligned points read stored values exactly
    px = torch.where((px - px.round()).abs() < 1e-6, px.round(), px)
    py = torch.where((py - py.round()).abs() < 1e-6, py.round(), py)
    x0 = px.floor().long().clamp(0, W - 2)
    y0 = py.floor().long().clamp(0, H - 2)
    wx = (px - x0).unsqueeze(1)
    wy = (py - y0).unsqueeze(1)

    flat = G.reshape(B, C, H * W)
    n = coords.shape[1]

    def at(yi, xi):
        idx = (yi * W + xi).unsqueeze(1).expand(B, C, n)
        return flat.gather(2, idx)

    top = (1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)
    bottom = (1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1)
    return ((1 - wy) * top + wy * bottom).transpose(1, 2)


def node_visual_inputs(G: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Pooled global vector broadcast to each node, joined with its local
    sample: (B, n, 2C)."""
    g = global_feature(G).unsqueeze(1).expand(-1, coords.shape[1], -1)
    return torch.cat([g, local_feature(G, coords)], dim=-1)


class VisualEmbedding(nn.Module):
    """Per-node visual embedding Linear(G ⊕ F_i ⊕ P_i) with P_i = Linear([x, y])."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.channels = channels
        self.pos = nn.Linear(2, dim)
        self.proj = nn.Linear(2 * channels + dim, dim)

    def forward(self, vis: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        if vis.shape[-1] != 2 * self.channels:
            raise ValueError(f"expected {2 * self.channels} visual inputs per node, got {vis.shape[-1]}")
        return self.proj(torch.cat([vis, self.pos(coords)], dim=-1))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        B, n, D = x.shape
        q, k, v = self.qkv(x).view(B, n, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        h = F.scaled_dot_product_attention(q, k, v)
        return self.out(h.transpose(1, 2).reshape(B, n, D))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ff_dim):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff(x))


class SequentialEncoder(nn.Module):
    """Transformer encoder over node features (no positional order, so the
    output is permutation-equivariant in the nodes).

    TSP nodes are embedded from (x, y); for CVRP the depot (index 0) has its
    own embedding and customers are embedded from (x, y, demand / Q).
    """

    def __init__(self, problem: str, dim: int, layers: int, heads: int, ff_dim: int):
        super().__init__()
        self.problem = problem
        if problem == "cvrp":
            self.embed_depot = nn.Linear(2, dim)
            self.embed = nn.Linear(3, dim)
        else:
            self.embed = nn.Linear(2, dim)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ff_dim) for _ in range(layers))

    def forward(self, coords: torch.Tensor, demand: torch.Tensor | None = None) -> torch.Tensor:
        if self.problem == "cvrp":
            depot = self.embed_depot(coords[:, :1])
            cust = self.embed(torch.cat([coords[:, 1:], demand[:, 1:, None]], dim=-1))
            x = torch.cat([depot, cust], dim=1)
        else:
            x = self.embed(coords)
        for layer in self.layers:
            x = layer(x)
        return x


class CrossModalAttention(nn.Module):
    """Multi-head attention with sequential queries and visual keys/values.

    Per head: softmax(beta * (T Wq)(V Wk)^T / sqrt(D)) (V Wv); heads are
    concatenated and mapped by Wo. The sqrt(D) uses the full model width.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)
        self.beta = nn.Parameter(torch.ones(()))

    def attention_weights(self, T, V):
        B, n, D = T.shape
        hd = D // self.heads
        q = self.w_q(T).view(B, n, self.heads, hd).transpose(1, 2)
        k = self.w_k(V).view(B, V.shape[1], self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) * (self.beta / math.sqrt(self.dim))
        return torch.softmax(scores, dim=-1)

    def forward(self, T: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
        B, n, D = T.shape
        hd = D // self.heads
        attn = self.attention_weights(T, V)
        v = self.w_v(V).view(B, V.shape[1], self.heads, hd).transpose(1, 2)
        heads = (attn @ v).transpose(1, 2).reshape(B, n, D)
        return self.w_o(heads)


class CrossModalFusion(nn.Module):
    """F = T + a1 * MHA(T, V) + a2 * FF(T + a1 * MHA(T, V)).

    a1 and a2 start at zero, so an untrained fusion passes T through.
    """

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.mha = CrossModalAttention(dim, heads)
        self.ff = FeedForward(dim, ff_dim)
        self.alpha1 = nn.Parameter(torch.zeros(()))
        self.alpha2 = nn.Parameter(torch.zeros(()))

    def forward(self, T: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
        h = T + self.alpha1 * self.mha(T, V)
        return h + self.alpha2 * self.ff(h)
