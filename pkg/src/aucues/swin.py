"""Desk-scale shifted-window attention classifier with exact gradients.

A single-resolution stack of window-attention block pairs (regular, then
cyclically shifted by half a window) over patch tokens, mean-pooled into
an 18-way logit head. Forward/backward run in float64 through the
reverse-mode engine in :mod:`aucues.autodiff`.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .catalog import N_AUS

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    heads: int = 2
    window: int = 4
    depth: int = 1
    use_relative_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError("image_size must be divisible by patch_size")
        if self.grid % self.window != 0:
            raise ShapeError("token grid side must be divisible by window")
        if self.embed_dim % self.heads != 0:
            raise ShapeError("embed_dim must be divisible by heads")
        if self.channels not in (1, 3):
            raise ShapeError("channels must be 1 or 3")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_blocks(self) -> int:
        return 2 * self.depth


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, deterministic per seed."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.embed_dim
    params: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        params[f"{name}.bias"] = rng.uniform(-bound, bound, fan_out)

    linear("patch", config.patch_size**2 * config.channels, d)
    for i in range(config.n_blocks):
        params[f"block{i}.ln1.scale"] = np.ones(d)
        params[f"block{i}.ln1.offset"] = np.zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"block{i}.attn.{proj}", d, d)
        if config.use_relative_bias:
            n_rel = (2 * config.window - 1) ** 2
            params[f"block{i}.attn.rel_bias"] = np.zeros((n_rel, config.heads))
        params[f"block{i}.ln2.scale"] = np.ones(d)
        params[f"block{i}.ln2.offset"] = np.zeros(d)
        linear(f"block{i}.mlp.fc1", d, 4 * d)
        linear(f"block{i}.mlp.fc2", 4 * d, d)
    linear("head", d, N_AUS)
    return params


def relative_index(window: int) -> np.ndarray:
    """(M^2, M^2) index into the (2M-1)^2 relative-offset bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), -1)
    coords = coords.reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


# -- spec-level forward ops (plain arrays) ----------------------------------


def extract_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, N*N, P*P*C) non-overlapping patch rows."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None, :, :, None]
    elif images.ndim == 3 and images.shape[-1] != config.channels:
        images = images[:, :, :, None]
    b, h, w, c = images.shape
    if (h, w, c) != (config.image_size, config.image_size, config.channels):
        raise ShapeError(
            f"expected {config.image_size}x{config.image_size}x{config.channels} images, "
            f"got {h}x{w}x{c}"
        )
    n, p = config.grid, config.patch_size
    x = images.reshape(b, n, p, n, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n * n, p * p * c)


def patch_embed(images: np.ndarray, params: dict, config: ModelConfig) -> np.ndarray:
    """Linear projection of each patch: (B, N, N, D) token grid."""
    b = 1 if np.asarray(images).ndim == 2 else np.asarray(images).shape[0]
    patches = extract_patches(images, config)
    tokens = patches @ params["patch.weight"] + params["patch.bias"]
    n = config.grid
    return tokens.reshape(b, n, n, config.embed_dim)


def cyclic_shift(tokens: np.ndarray, offset: int) -> np.ndarray:
    """Roll the token grid by (-offset, -offset) with wraparound."""
    tokens = np.asarray(tokens)
    grid_axes = (1, 2) if tokens.ndim == 4 else (0, 1)
    side = tokens.shape[grid_axes[0]]
    if not 0 <= offset < side:
        raise ShapeError(f"offset {offset} outside [0, {side})")
    return np.roll(tokens, (-offset, -offset), axis=grid_axes)


def window_attention(window_tokens: np.ndarray, params: dict, config: ModelConfig,
                     block: int = 0) -> np.ndarray:
    """Multi-head scaled dot-product attention within one window."""
    x = np.asarray(window_tokens, dtype=np.float64)
    m2 = config.window**2
    if x.shape != (m2, config.embed_dim):
        raise ShapeError(f"window must be {m2}x{config.embed_dim}, got {x.shape}")
    t = _attend(Tensor(x.reshape(1, 1, m2, config.embed_dim)),
                {k: Tensor(v) for k, v in params.items()}, config, block)
    return t.data.reshape(m2, config.embed_dim)


# -- autodiff graph ----------------------------------------------------------


def _layernorm(x: Tensor, scale: Tensor, offset: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + 1e-6).sqrt() * scale + offset


def _attend(x: Tensor, p: dict[str, Tensor], config: ModelConfig, block: int) -> Tensor:
    """(B, nW, M^2, D) -> same, attention within each window."""
    b, nw, m2, d = x.shape
    h = config.heads
    dh = d // h
    pre = f"block{block}.attn"

    def heads(t):
        return t.reshape(b, nw, m2, h, dh).transpose((0, 1, 3, 2, 4))

    q = heads(x @ p[f"{pre}.wq.weight"] + p[f"{pre}.wq.bias"])
    k = heads(x @ p[f"{pre}.wk.weight"] + p[f"{pre}.wk.bias"])
    v = heads(x @ p[f"{pre}.wv.weight"] + p[f"{pre}.wv.bias"])
    logits = (q @ k.transpose((0, 1, 2, 4, 3))) * (1.0 / np.sqrt(dh))
    if config.use_relative_bias:
        idx = relative_index(config.window).reshape(-1)
        bias = p[f"{pre}.rel_bias"].gather(idx).reshape(m2, m2, h).transpose((2, 0, 1))
        logits = logits + bias
    attn = logits.softmax(axis=-1)
    out = (attn @ v).transpose((0, 1, 3, 2, 4)).reshape(b, nw, m2, d)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite attention output")
    return out @ p[f"{pre}.wo.weight"] + p[f"{pre}.wo.bias"]


def _block(t: Tensor, p: dict[str, Tensor], config: ModelConfig, block: int,
           shift: int) -> Tensor:
    """Pre-norm residual attention + residual MLP on a (B, N, N, D) grid."""
    b, n, _, d = t.shape
    m = config.window
    nw = (n // m) ** 2

    x = _layernorm(t, p[f"block{block}.ln1.scale"], p[f"block{block}.ln1.offset"])
    if shift:
        x = x.roll((-shift, -shift), axis=(1, 2))
    x = (x.reshape(b, n // m, m, n // m, m, d)
          .transpose((0, 1, 3, 2, 4, 5))
          .reshape(b, nw, m * m, d))
    x = _attend(x, p, config, block)
    x = (x.reshape(b, n // m, n // m, m, m, d)
          .transpose((0, 1, 3, 2, 4, 5))
          .reshape(b, n, n, d))
    if shift:
        x = x.roll((shift, shift), axis=(1, 2))
    t = t + x

    y = _layernorm(t, p[f"block{block}.ln2.scale"], p[f"block{block}.ln2.offset"])
    y = (y @ p[f"block{block}.mlp.fc1.weight"] + p[f"block{block}.mlp.fc1.bias"]).gelu()
    y = y @ p[f"block{block}.mlp.fc2.weight"] + p[f"block{block}.mlp.fc2.bias"]
    return t + y


def forward_graph(images: np.ndarray, param_tensors: dict[str, Tensor],
                  config: ModelConfig) -> Tensor:
    """Build the full graph: (B, H, W, C) images -> (B, 18) logit Tensor."""
    patches = extract_patches(images, config)
    b = patches.shape[0]
    n, d = config.grid, config.embed_dim
    t = Tensor(patches) @ param_tensors["patch.weight"] + param_tensors["patch.bias"]
    t = t.reshape(b, n, n, d)
    shift = config.window // 2
    for pair in range(config.depth):
        t = _block(t, param_tensors, config, 2 * pair, shift=0)
        t = _block(t, param_tensors, config, 2 * pair + 1, shift=shift)
    pooled = t.reshape(b, n * n, d).mean(axis=1)
    return pooled @ param_tensors["head.weight"] + param_tensors["head.bias"]


def forward(images: np.ndarray, params: dict[str, np.ndarray],
            config: ModelConfig) -> np.ndarray:
    """(B, H, W, C) or single (H, W) image -> (B, 18) or (18,) logits."""
    single = np.asarray(images).ndim == 2
    tensors = {k: Tensor(v) for k, v in params.items()}
    logits = forward_graph(images, tensors, config).data
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return logits[0] if single else logits


def backward(images: np.ndarray, params: dict[str, np.ndarray],
             dloss_dlogits: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of sum(dloss_dlogits * logits) w.r.t. every parameter."""
    single = np.asarray(images).ndim == 2
    upstream = np.asarray(dloss_dlogits, dtype=np.float64)
    if single:
        upstream = upstream.reshape(1, -1)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    logits = forward_graph(images, tensors, config)
    if upstream.shape != logits.shape:
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} != logits shape {logits.shape}"
        )
    logits.backward(upstream)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in tensors.items()}


# -- checkpoint io ------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], config: ModelConfig) -> None:
    """Atomic write of a versioned npz with the config embedded as JSON."""
    buf = io.BytesIO()
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(config)}
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {k: data[k] for k in data.files if k != "__meta__"}
    return params, ModelConfig(**meta["config"])
