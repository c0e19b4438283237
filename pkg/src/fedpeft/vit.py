"""A small pre-norm Vision Transformer with deep visual prompts and LoRA.

Parameters live in a flat :class:`ParamTree` keyed by slash paths::

    patch_embed/weight, patch_embed/bias, cls_token, pos_embed,
    block/<l>/{ln1,ln2}/{gain,bias}, block/<l>/attn/{W,b}_{Q,K,V,O},
    block/<l>/mlp/{W_1,b_1,W_2,b_2}, norm/{gain,bias}, head/{weight,bias}

Blocks are numbered from 1. Prompts live at ``prompt/<l>`` (R x d) and LoRA
factors at ``lora/<l>/<Q|V>/<A|B>``. Linear weights are stored (in, out) so a
projection is ``z @ W + b``; LoRA factors keep the (out x in) update
convention ``delta_W = B @ A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NonFiniteError, TrainingError
from .rng import Rng
from .tensor import Tape, Tensor

HEAD_STD = 0.02
ATTN_PARTS = ("W_Q", "b_Q", "W_K", "b_K", "W_V", "b_V", "W_O", "b_O")


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    @classmethod
    def vit_b16(cls, num_classes=7):
        """ViT-B/16 at 224px: 12 blocks, d=768, 196 patches."""
        return cls(image_size=224, patch_size=16, channels=3, dim=768, depth=12,
                   heads=12, mlp_ratio=4, num_classes=num_classes)


class ParamTree(dict):
    """Ordered path -> float64 array mapping."""

    def copy(self) -> "ParamTree":
        return ParamTree((k, v.copy()) for k, v in self.items())

    def num_elements(self, paths=None) -> int:
        keys = self.keys() if paths is None else paths
        return int(sum(self[k].size for k in keys))

    def equal(self, other) -> bool:
        return self.keys() == other.keys() and all(
            np.array_equal(self[k], other[k]) for k in self)


@dataclass
class PromptBank:
    """Deep prompts, one R x d matrix per block (absent when R = 0)."""

    num_prompts: int
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return PromptBank(self.num_prompts, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class LoraBank:
    """Bias-free low-rank branches on the Q and V projections of every block."""

    rank: int
    alpha: float
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return LoraBank(self.rank, self.alpha, {k: v.copy() for k, v in self.tensors.items()})


# paths ---------------------------------------------------------------------

def attn_paths(block: int):
    return [f"block/{block}/attn/{p}" for p in ATTN_PARTS]


def block_paths(block: int):
    pre = f"block/{block}"
    return ([f"{pre}/ln1/gain", f"{pre}/ln1/bias"] + attn_paths(block)
            + [f"{pre}/ln2/gain", f"{pre}/ln2/bias",
               f"{pre}/mlp/W_1", f"{pre}/mlp/b_1", f"{pre}/mlp/W_2", f"{pre}/mlp/b_2"])


HEAD_PATHS = ("head/weight", "head/bias")


def backbone_paths(cfg: VitConfig):
    paths = ["patch_embed/weight", "patch_embed/bias", "cls_token", "pos_embed"]
    for l in range(1, cfg.depth + 1):
        paths += block_paths(l)
    return paths + ["norm/gain", "norm/bias"]


def prompt_path(block: int) -> str:
    return f"prompt/{block}"


def lora_paths(block: int, proj: str):
    return f"lora/{block}/{proj}/A", f"lora/{block}/{proj}/B"


def param_shapes(cfg: VitConfig) -> dict:
    d, hdn = cfg.dim, cfg.hidden
    shapes = {
        "patch_embed/weight": (cfg.patch_dim, d),
        "patch_embed/bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for l in range(1, cfg.depth + 1):
        pre = f"block/{l}"
        shapes[f"{pre}/ln1/gain"] = (d,)
        shapes[f"{pre}/ln1/bias"] = (d,)
        for p in "QKVO":
            shapes[f"{pre}/attn/W_{p}"] = (d, d)
            shapes[f"{pre}/attn/b_{p}"] = (d,)
        shapes[f"{pre}/ln2/gain"] = (d,)
        shapes[f"{pre}/ln2/bias"] = (d,)
        shapes[f"{pre}/mlp/W_1"] = (d, hdn)
        shapes[f"{pre}/mlp/b_1"] = (hdn,)
        shapes[f"{pre}/mlp/W_2"] = (hdn, d)
        shapes[f"{pre}/mlp/b_2"] = (d,)
    shapes["norm/gain"] = (d,)
    shapes["norm/bias"] = (d,)
    shapes["head/weight"] = (d, cfg.num_classes)
    shapes["head/bias"] = (cfg.num_classes,)
    return shapes


# initialisation ------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def init_params(cfg: VitConfig, rng: Rng) -> ParamTree:
    """Fresh parameters: Xavier-uniform linear weights, zero biases, unit LN gains."""
    params = ParamTree()
    for path, shape in param_shapes(cfg).items():
        leaf = path.rsplit("/", 1)[-1]
        site = rng.child("init", path)
        if path in ("cls_token", "pos_embed"):
            params[path] = site.normal(0.0, 0.02, shape)
        elif leaf == "gain":
            params[path] = np.ones(shape)
        elif path == "head/weight":
            params[path] = site.normal(0.0, HEAD_STD, shape)
        elif len(shape) == 2:
            params[path] = _xavier(site, shape[0], shape[1], shape)
        else:
            params[path] = np.zeros(shape)
    return params


def attach_head(params: ParamTree, num_classes: int, rng: Rng) -> ParamTree:
    """Copy of ``params`` with a freshly initialised K-way head."""
    if num_classes < 2:
        raise ConfigError("a classification head needs K >= 2")
    out = ParamTree((k, v.copy()) for k, v in params.items() if not k.startswith("head/"))
    d = params["norm/gain"].shape[0]
    out["head/weight"] = rng.child("head").normal(0.0, HEAD_STD, (d, num_classes))
    out["head/bias"] = np.zeros(num_classes)
    return out


def reset_head(params: ParamTree, rng: Rng) -> ParamTree:
    """Discard the current head and draw a new one of the same width."""
    return attach_head(params, params["head/bias"].shape[0], rng)


# forward -------------------------------------------------------------------

def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, C, H, W) -> (n, S, C*p*p), patches in row-major order."""
    n, c, h, w = x.shape
    p = patch_size
    x = x.reshape(n, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def _check_input(cfg, x):
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"expected images (n, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")


class _Lookup:
    def __init__(self, sources, leaves):
        self.sources = [s for s in sources if s]
        self.leaves = leaves or {}

    def __call__(self, path):
        leaf = self.leaves.get(path)
        if leaf is not None:
            return leaf
        for src in self.sources:
            if path in src:
                return Tensor(src[path])
        raise KeyError(path)

    def has(self, path):
        return path in self.leaves or any(path in s for s in self.sources)


def _linear(z, W, b):
    return z @ W + b


def _attention(cfg, z, get, block, lora):
    n, t, d = z.shape
    h, dh = cfg.heads, d // cfg.heads
    a = f"block/{block}/attn"

    def proj(p):
        out = _linear(z, get(f"{a}/W_{p}"), get(f"{a}/b_{p}"))
        if lora is not None and p in "QV":
            pa, pb = lora_paths(block, p)
            if get.has(pa):
                branch = (z @ get(pa).T) @ get(pb).T
                out = out + branch * lora.alpha
        return out

    def heads(u):
        return u.reshape(n, t, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(proj("Q")), heads(proj("K")), heads(proj("V"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(n, t, d)
    return _linear(ctx, get(f"{a}/W_O"), get(f"{a}/b_O"))


def _block(cfg, x, get, block, lora):
    pre = f"block/{block}"
    z = T.layer_norm(x, get(f"{pre}/ln1/gain"), get(f"{pre}/ln1/bias"))
    x = x + _attention(cfg, z, get, block, lora)
    z = T.layer_norm(x, get(f"{pre}/ln2/gain"), get(f"{pre}/ln2/bias"))
    z = T.gelu(_linear(z, get(f"{pre}/mlp/W_1"), get(f"{pre}/mlp/b_1")))
    return x + _linear(z, get(f"{pre}/mlp/W_2"), get(f"{pre}/mlp/b_2"))


def _check_banks(cfg, prompts, lora):
    if prompts is not None:
        for path, p in prompts.tensors.items():
            if p.shape != (prompts.num_prompts, cfg.dim):
                raise DimensionError(f"{path} has shape {p.shape}, expected ({prompts.num_prompts}, {cfg.dim})")
    if lora is not None:
        for path, m in lora.tensors.items():
            want = (lora.rank, cfg.dim) if path.endswith("/A") else (cfg.dim, lora.rank)
            if m.shape != want:
                raise DimensionError(f"{path} has shape {m.shape}, expected {want}")


def encode(cfg: VitConfig, x, params: Mapping, prompts: PromptBank | None = None,
           lora: LoraBank | None = None, leaves: Mapping | None = None) -> Tensor:
    """Final normalised token sequence, shape (n, 1 + S, d).

    ``leaves`` maps paths to caller-owned tensors (e.g. grad-requiring ones)
    that take precedence over the stored arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(cfg, x)
    _check_banks(cfg, prompts, lora)
    n = x.shape[0]
    get = _Lookup([params, prompts.tensors if prompts else None,
                   lora.tensors if lora else None], leaves)
    tokens = _linear(Tensor(patchify(x, cfg.patch_size)),
                     get("patch_embed/weight"), get("patch_embed/bias"))
    cls = T.broadcast_to(get("cls_token").reshape(1, 1, cfg.dim), (n, 1, cfg.dim))
    h = T.concat([cls, tokens], axis=1) + get("pos_embed")
    for l in range(1, cfg.depth + 1):
        path = prompt_path(l)
        if prompts is not None and prompts.num_prompts and get.has(path):
            r = prompts.num_prompts
            p = T.broadcast_to(get(path).reshape(1, r, cfg.dim), (n, r, cfg.dim))
            h = T.concat([h[:, :1], p, h[:, 1:]], axis=1)
            h = _block(cfg, h, get, l, lora)
            h = T.concat([h[:, :1], h[:, 1 + r:]], axis=1)
        else:
            h = _block(cfg, h, get, l, lora)
    return T.layer_norm(h, get("norm/gain"), get("norm/bias"))


def forward(cfg: VitConfig, x, params: Mapping, prompts: PromptBank | None = None,
            lora: LoraBank | None = None, leaves: Mapping | None = None) -> Tensor:
    """Class logits, shape (n, K)."""
    get = _Lookup([params], leaves)
    feats = encode(cfg, x, params, prompts, lora, leaves)[:, 0]
    return _linear(feats, get("head/weight"), get("head/bias"))


def features(cfg, x, params, prompts=None, lora=None) -> np.ndarray:
    """Final class-token representation (n, d)."""
    return encode(cfg, x, params, prompts, lora).data[:, 0].copy()


def predict(cfg, x, params, prompts=None, lora=None, batch_size=256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward(cfg, x[i:i + batch_size], params, prompts, lora).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# centralized training ------------------------------------------------------

def sgd_step(cfg, x, y, params, trainable, lr, prompts=None, lora=None) -> float:
    """One SGD step on ``trainable`` paths, in place. Returns the batch loss."""
    arrays = dict(params)
    if prompts is not None:
        arrays.update(prompts.tensors)
    if lora is not None:
        arrays.update(lora.tensors)
    leaves = {p: Tensor(arrays[p], requires_grad=True) for p in trainable}
    with Tape():
        logits = forward(cfg, x, params, prompts, lora, leaves=leaves)
        loss = T.cross_entropy(logits, y)
    T.backward(loss)
    for p in trainable:
        arrays[p] -= lr * leaves[p].grad
    return loss.item()


def pretrain_desk(cfg: VitConfig, params: ParamTree, dataset, epochs: int, rng: Rng,
                  lr: float = 0.05, batch_size: int = 32) -> ParamTree:
    """Centralized SGD on every parameter; returns the trained copy."""
    params = params.copy()
    n = len(dataset.labels)
    paths = list(params.keys())
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            try:
                loss = sgd_step(cfg, dataset.images[idx], dataset.labels[idx], params, paths, lr)
            except NonFiniteError as exc:
                raise TrainingError(f"pretraining diverged in epoch {epoch}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"pretraining diverged in epoch {epoch}")
    return params
