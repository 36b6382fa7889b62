"""Vision Transformer: patch tokens, pre-norm encoder blocks, class-token head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Dense, LayerNorm, Model, param


@dataclass(frozen=True)
class ViTConfig:
    image_size: tuple[int, int]
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_hidden: int
    num_classes: int
    dropout_rate: float = 0.1
    final_layernorm: bool = True

    @property
    def num_patches(self) -> int:
        h, w = self.image_size
        return (h * w) // (self.patch_size**2)

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * 3

    def validate(self) -> None:
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} is not divisible into {self.patch_size}x{self.patch_size} patches")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.num_heads} heads")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.depth, self.mlp_hidden, self.patch_size, self.num_heads) < 1:
            raise ValueError("depth, mlp_hidden, patch_size and num_heads must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def vit_b16(num_classes: int, **overrides) -> ViTConfig:
    kw = dict(image_size=(224, 224), patch_size=16, embed_dim=768, depth=12, num_heads=12, mlp_hidden=3072)
    kw.update(overrides)
    return ViTConfig(num_classes=num_classes, **kw)


def vit_tiny(num_classes: int, **overrides) -> ViTConfig:
    kw = dict(image_size=(32, 32), patch_size=8, embed_dim=64, depth=2, num_heads=4, mlp_hidden=128)
    kw.update(overrides)
    return ViTConfig(num_classes=num_classes, **kw)


PRESETS = {"b16": vit_b16, "tiny": vit_tiny}


# -- functional pieces ---------------------------------------------------------

def patchify(image, patch_size: int) -> Tensor:
    """Split H x W x C (or B x H x W x C) into row-major flattened patches."""
    x = ad.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    B, H, W, C = x.shape
    P = patch_size
    if H % P or W % P:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {P}")
    x = x.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, (H // P) * (W // P), P * P * C)
    return x.reshape(x.shape[1:]) if single else x


def embed(patches: Tensor, proj: Tensor, cls: Tensor, pos: Tensor) -> Tensor:
    """Project patches, prepend the class token, add positional embeddings."""
    patches = ad.as_tensor(patches)
    single = patches.ndim == 2
    if single:
        patches = patches.reshape((1,) + patches.shape)
    B, Np, _ = patches.shape
    D = proj.shape[1]
    if cls.shape != (D,) or pos.shape != (Np + 1, D):
        raise ShapeError(f"embed: cls {cls.shape} / pos {pos.shape} do not fit {Np} patches of width {D}")
    z = ad.matmul(patches, proj)
    tok = ad.broadcast_leading(cls.reshape(1, D), (B,))
    z = ad.concat([tok, z], axis=1) + pos
    return z.reshape(z.shape[1:]) if single else z


def attention(q: Tensor, k: Tensor, v: Tensor, record: list | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} must agree")
    dk = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ad.matmul(q, k.transpose(axes)) * (1.0 / math.sqrt(dk))
    weights = ad.softmax(scores)
    if record is not None:
        record.append(weights.data)
    return ad.matmul(weights, v)


def msa(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, num_heads: int, record: list | None = None) -> Tensor:
    """Multi-head self-attention; head i uses columns i*d_k:(i+1)*d_k of W_Q, W_K, W_V."""
    single = z.ndim == 2
    if single:
        z = z.reshape((1,) + z.shape)
    B, T, D = z.shape
    if D % num_heads:
        raise ShapeError(f"embed_dim {D} is not divisible by {num_heads} heads")
    dk = D // num_heads

    def split(t):
        return ad.matmul(z, t).reshape(B, T, num_heads, dk).transpose(0, 2, 1, 3)

    heads = attention(split(wq), split(wk), split(wv), record)
    out = ad.matmul(heads.transpose(0, 2, 1, 3).reshape(B, T, D), wo)
    return out.reshape(T, D) if single else out


class EncoderBlock:
    def __init__(self, name: str, cfg: ViTConfig, rng: np.random.Generator):
        D = cfg.embed_dim
        self.num_heads = cfg.num_heads
        self.ln1 = LayerNorm(f"{name}.ln1", D)
        self.wq = Dense(f"{name}.attn.q", D, D, rng, bias=False)
        self.wk = Dense(f"{name}.attn.k", D, D, rng, bias=False)
        self.wv = Dense(f"{name}.attn.v", D, D, rng, bias=False)
        self.wo = Dense(f"{name}.attn.out", D, D, rng, bias=False)
        self.ln2 = LayerNorm(f"{name}.ln2", D)
        self.fc1 = Dense(f"{name}.mlp.fc1", D, cfg.mlp_hidden, rng)
        self.fc2 = Dense(f"{name}.mlp.fc2", cfg.mlp_hidden, D, rng)

    def params(self):
        out = self.ln1.params()
        for d in (self.wq, self.wk, self.wv, self.wo):
            out += d.params()
        return out + self.ln2.params() + self.fc1.params() + self.fc2.params()

    def __call__(self, z: Tensor, rate: float = 0.0, train: bool = False, rng=None, record=None) -> Tensor:
        h = self.ln1(z)
        z = z + msa(h, self.wq.weight, self.wk.weight, self.wv.weight, self.wo.weight, self.num_heads, record)
        h = ad.dropout(ad.gelu(self.fc1(self.ln2(z))), rate, train, rng)
        return z + ad.dropout(self.fc2(h), rate, train, rng)


def encoder_block(z: Tensor, block: EncoderBlock) -> Tensor:
    return block(z)


class _Embedding:
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.proj = Dense("embed.proj", cfg.patch_dim, cfg.embed_dim, rng, bias=False)
        self.cls = param(rng.normal(0.0, 0.02, cfg.embed_dim), "embed.cls")
        self.pos = param(rng.normal(0.0, 0.02, (cfg.num_patches + 1, cfg.embed_dim)), "embed.pos")

    def params(self):
        return [self.proj.weight, self.cls, self.pos]


class ViT(Model):
    arch = "vit"

    def __init__(self, config: ViTConfig, init_seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(init_seed)
        self.embedding = _Embedding(config, rng)
        self.blocks = [EncoderBlock(f"block{i}", config, rng) for i in range(config.depth)]
        self.norm = LayerNorm("final_ln", config.embed_dim) if config.final_layernorm else None
        self.head = Dense("head", config.embed_dim, config.num_classes, rng)
        self.layers = [self.embedding, *self.blocks] + ([self.norm] if self.norm else []) + [self.head]
        self.attention_record: list | None = None
        self._finish(dropout_seed=init_seed + 1)

    @property
    def input_shape(self):
        h, w = self.config.image_size
        return (h, w, 3)

    def encode(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Token sequence after the last encoder block, B x (N_p+1) x D."""
        self._check_input(x)
        cfg = self.config
        train = mode == "train"
        e = self.embedding
        z = embed(patchify(x, cfg.patch_size), e.proj.weight, e.cls, e.pos)
        z = ad.dropout(z, cfg.dropout_rate, train, self.rng)
        for block in self.blocks:
            z = block(z, cfg.dropout_rate, train, self.rng, self.attention_record)
        return z

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        z = self.encode(x, mode)
        if self.norm is not None:
            z = self.norm(z)
        return self.head(z[:, 0, :])


def build_vit(config: ViTConfig, init_seed: int = 0) -> ViT:
    return ViT(config, init_seed)


def vit_forward(model: ViT, batch, mode: str = "eval") -> Tensor:
    return model(batch, mode)
