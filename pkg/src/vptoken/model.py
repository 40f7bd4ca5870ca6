"""Desk-scale multimodal LM with a control-conditioned re-encoding projector.

Components:

* ``f_v`` / ``g_v`` -- primary patch encoder and its linear projector into LM space.
* ``f_D`` / ``g_D`` -- an independently initialised re-encoder (different patch
  size) and a cross-attention projector whose queries are re-encoded patch
  features and whose single key/value position is the hidden state of the
  control token.
* ``lm`` -- decoder-only transformer over a row sequence of embeddings.

Images are ``uint8`` arrays of shape ``(H, W, 3)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import (
    CausalityError,
    CheckpointError,
    ControlArityError,
    DegenerateRegionError,
    InvalidConfigError,
    ShapeError,
)
from .vocab import Vocabulary, extend_vocabulary


@dataclass
class ModelConfig:
    d_h: int = 64
    d_v: int = 64
    d_z: int = 48
    image_size: int = 64
    patch_primary: int = 8
    patch_reencode: int = 16
    lm_layers: int = 4
    lm_heads: int = 4
    enc_layers: int = 2
    enc_heads: int = 4
    max_seq_len: int = 512
    control_tokens: int = 1
    reencoder: str = "separate"  # or "shared"
    base_size: int = 256
    k: int = 8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for p in (self.patch_primary, self.patch_reencode):
            if p <= 0 or self.image_size % p:
                raise InvalidConfigError(f"image_size {self.image_size} not divisible by patch {p}")
        if self.d_h % self.lm_heads or self.d_v % self.enc_heads or self.d_z % self.enc_heads:
            raise InvalidConfigError("hidden sizes must be divisible by head counts")
        if self.reencoder not in ("separate", "shared"):
            raise InvalidConfigError(f"unknown reencoder kind {self.reencoder!r}")
        if self.control_tokens < 1:
            raise InvalidConfigError("control_tokens must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def vocab(self) -> Vocabulary:
        return extend_vocabulary(self.base_size, self.k)

    @property
    def num_primary(self) -> int:
        return (self.image_size // self.patch_primary) ** 2

    @property
    def num_reencode(self) -> int:
        if self.reencoder == "shared":
            return self.num_primary
        return (self.image_size // self.patch_reencode) ** 2

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# -- image helpers ---------------------------------------------------------------


def resize_image(x: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize to ``target x target``."""
    h, w = x.shape[:2]
    if h == 0 or w == 0:
        raise DegenerateRegionError("cannot resize an empty image")
    if h == target and w == target:
        return x
    rows = (np.arange(target) * h) // target
    cols = (np.arange(target) * w) // target
    return x[rows][:, cols]


def image_to_tensor(x: np.ndarray, size: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    x = resize_image(x, size)
    if x.shape != (size, size, 3):
        raise InvalidConfigError(f"image shape {x.shape} after resize, expected ({size}, {size}, 3)")
    return torch.from_numpy(np.ascontiguousarray(x)).permute(2, 0, 1).to(dtype) / 255.0


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, 3, H, W) -> (B, num_patches, 3 * patch * patch)`` in row-major patch order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


# -- building blocks ---------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor | None) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (z.reshape(b, t, self.heads, hd).transpose(1, 2) for z in (q, k, v))
        scores = nx.scale(nx.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(hd))
        mask = None if allowed is None else allowed.unsqueeze(1)
        attn = nx.softmax_with_additive_mask(scores, mask)
        y = nx.matmul(attn, v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_mult: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_mult * d), nn.GELU(), nn.Linear(mlp_mult * d, d))

    def forward(self, x, allowed=None):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


# Positional tables start large: with small ones, rows of an image block look
# alike to attention and training stalls before position-dependent reads emerge.
POS_INIT_STD = 0.5


class VisionEncoder(nn.Module):
    def __init__(self, image_size: int, patch: int, d: int, layers: int, heads: int):
        super().__init__()
        self.patch = patch
        n = (image_size // patch) ** 2
        self.patch_embed = nn.Linear(3 * patch * patch, d)
        self.pos = nn.Parameter(torch.randn(n, d) * POS_INIT_STD)
        self.blocks = nn.ModuleList(Block(d, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(d)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(patchify(images, self.patch)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


class ControlProjector(nn.Module):
    """Cross-attention from re-encoded patch rows (queries) to control hidden states (keys/values)."""

    def __init__(self, d_in: int, d_h: int, n_rows: int):
        super().__init__()
        self.d_h = d_h
        self.q_proj = nn.Linear(d_in, d_h)
        self.pos = nn.Parameter(torch.randn(n_rows, d_h) * 0.02)
        self.ctrl_kv = nn.Linear(d_h, 2 * d_h)
        self.out = nn.Linear(d_h, d_h)
        self.ln = nn.LayerNorm(d_h)
        self.ffn = nn.Sequential(nn.Linear(d_h, 2 * d_h), nn.GELU(), nn.Linear(2 * d_h, d_h))

    def forward(self, z_d: torch.Tensor, h_dc: torch.Tensor, return_attn: bool = False):
        q = self.q_proj(z_d) + self.pos
        k, v = self.ctrl_kv(h_dc).split(self.d_h, dim=-1)
        scores = nx.scale(nx.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(self.d_h))
        attn = nx.softmax_with_additive_mask(scores)
        x = q + self.out(nx.matmul(attn, v))
        x = x + self.ffn(self.ln(x))
        return (x, attn) if return_attn else x


class DecoderLM(nn.Module):
    def __init__(self, vocab_size: int, d: int, layers: int, heads: int, max_seq_len: int):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.pos_emb = nn.Parameter(torch.randn(max_seq_len, d) * POS_INIT_STD)
        self.blocks = nn.ModuleList(Block(d, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.5)


LayerHook = Callable[[int, torch.Tensor], torch.Tensor]


class ToyMLLM(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.vocab = cfg.vocab
        torch.manual_seed(cfg.seed)
        self.f_v = VisionEncoder(cfg.image_size, cfg.patch_primary, cfg.d_v, cfg.enc_layers, cfg.enc_heads)
        self.g_v = nn.Linear(cfg.d_v, cfg.d_h)
        torch.manual_seed(cfg.seed + 7919)
        if cfg.reencoder == "separate":
            self.f_D = VisionEncoder(cfg.image_size, cfg.patch_reencode, cfg.d_z, cfg.enc_layers, cfg.enc_heads)
            d_in = cfg.d_z
        else:
            self.f_D = None
            d_in = cfg.d_v
        self.g_D = ControlProjector(d_in, cfg.d_h, cfg.num_reencode)
        torch.manual_seed(cfg.seed + 104729)
        self.lm = DecoderLM(self.vocab.total_size, cfg.d_h, cfg.lm_layers, cfg.lm_heads, cfg.max_seq_len)
        self.to(cfg.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.g_v.weight.dtype

    def images_tensor(self, images: list[np.ndarray]) -> torch.Tensor:
        size = self.config.image_size
        return torch.stack([image_to_tensor(x, size, self.dtype) for x in images])

    # -- vision path -----------------------------------------------------------
    def encode_image(self, x: np.ndarray) -> torch.Tensor:
        """``z = f_v(x)`` with shape ``(num_primary, d_v)``."""
        return self.f_v(self.images_tensor([x]))[0]

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """``h = g_v(z)``."""
        return self.g_v(z)

    def re_encode(self, x: np.ndarray) -> torch.Tensor:
        """``z_D = f_D(x)``; falls back to ``f_v`` for the shared variant."""
        enc = self.f_D if self.f_D is not None else self.f_v
        return enc(self.images_tensor([x]))[0]

    def control_project(self, z_d: torch.Tensor, h_dc: torch.Tensor, return_attn: bool = False):
        """``h_D = g_D(z_D, h_DC)``."""
        n = self.config.control_tokens
        if h_dc.dim() != 2 or h_dc.shape[0] != n:
            raise ControlArityError(f"expected {n} control row(s), got shape {tuple(h_dc.shape)}")
        if h_dc.shape[1] != self.config.d_h:
            raise ShapeError(f"control rows must have width {self.config.d_h}")
        return self.g_D(z_d, h_dc, return_attn=return_attn)

    # -- language model ----------------------------------------------------------
    def embed_tokens(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        return nx.embedding_lookup(self.lm.tok_emb.weight, ids)

    def llm_forward(
        self,
        embeds: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
        layer_hook: LayerHook | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the decoder over embedding rows.

        ``attn_mask`` is boolean (True = may attend), ``(T, T)`` or ``(B, T, T)``;
        None means plain causal. Returns ``(logits, hidden)`` with the batch
        axis only when the input had one.
        """
        squeeze = embeds.dim() == 2
        if squeeze:
            embeds = embeds.unsqueeze(0)
        b, t, d = embeds.shape
        if t > self.config.max_seq_len:
            raise ShapeError(f"sequence of {t} rows exceeds max_seq_len {self.config.max_seq_len}")
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        if attn_mask is None:
            allowed = causal.expand(b, t, t)
        else:
            allowed = attn_mask if attn_mask.dim() == 3 else attn_mask.unsqueeze(0).expand(b, t, t)
            if allowed.shape != (b, t, t):
                raise ShapeError(f"mask shape {tuple(attn_mask.shape)} for {b}x{t} rows")
            if bool((allowed & ~causal).any()):
                raise CausalityError("attention mask allows a query to see a future position")
        x = embeds + self.lm.pos_emb[:t]
        for i, blk in enumerate(self.lm.blocks):
            if layer_hook is not None:
                x = layer_hook(i, x)
            x = blk(x, allowed)
        hidden = self.lm.ln_f(x)
        logits = self.lm.head(hidden)
        if squeeze:
            return logits[0], hidden[0]
        return logits, hidden

    # -- parameter groups ----------------------------------------------------------
    def param_set(self) -> nx.ParamSet:
        return nx.ParamSet.from_module(self)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(model: ToyMLLM, path: str | Path, extra: dict | None = None) -> None:
    meta = {
        "kind": "vptoken-checkpoint",
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "extra": extra or {},
    }
    nx.save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path: str | Path) -> ToyMLLM:
    tensors, meta = nx.load_tensors(path)
    if meta.get("kind") != "vptoken-checkpoint":
        raise CheckpointError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    if Vocabulary.from_dict(meta["vocab"]) != config.vocab:
        raise CheckpointError("checkpoint vocabulary disagrees with its config")
    model = ToyMLLM(config)
    state = model.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError("checkpoint tensor names do not match the model")
    model.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    model.eval()
    model.checkpoint_extra = meta.get("extra", {})
    return model
