"""Dense-array substrate: masked ops, AdamW, gradient checking, tensor files.

Reverse-mode differentiation is delegated to torch autograd; everything the
rest of the package relies on (mask constants, masked loss, the optimizer,
the finite-difference oracle and the on-disk container) lives here.
"""

from __future__ import annotations

import fnmatch
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, MaskConstructionError, ShapeError, TrainingError


def mask_constant(dtype: torch.dtype) -> float:
    return -1e30 if dtype == torch.float64 else -1e9


# -- core ops ----------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"cannot add {tuple(a.shape)} and {tuple(b.shape)}") from None
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def gelu(a: torch.Tensor) -> torch.Tensor:
    return F.gelu(a)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm params {tuple(weight.shape)} vs input {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"ids outside embedding table of {table.shape[0]} rows")
    return F.embedding(ids, table)


def concat_rows(parts: Iterable[torch.Tensor]) -> torch.Tensor:
    parts = list(parts)
    widths = {p.shape[-1] for p in parts}
    if len(widths) > 1:
        raise ShapeError(f"concat_rows width mismatch {sorted(widths)}")
    return torch.cat(parts, dim=-2)


def softmax_with_additive_mask(scores: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis after adding a large negative constant where ``allowed`` is False.

    A row with no allowed entry is a mask-construction bug and raises.
    """
    if allowed is None:
        return torch.softmax(scores, dim=-1)
    try:
        torch.broadcast_shapes(allowed.shape, scores.shape)
    except RuntimeError:
        raise ShapeError(f"mask {tuple(allowed.shape)} vs scores {tuple(scores.shape)}") from None
    if not bool(allowed.any(dim=-1).all()):
        raise MaskConstructionError("attention mask has a query row with no allowed key")
    bias = torch.zeros(allowed.shape, dtype=scores.dtype, device=scores.device)
    bias = bias.masked_fill(~allowed, mask_constant(scores.dtype))
    return torch.softmax(scores + bias, dim=-1)


def cross_entropy_masked(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over positions where ``loss_mask`` is 1."""
    if logits.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise ShapeError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, mask {tuple(loss_mask.shape)}"
        )
    weight = loss_mask.to(logits.dtype)
    denom = weight.sum()
    if float(denom) == 0.0:
        raise TrainingError("cross_entropy_masked: loss mask selects no position")
    safe_targets = torch.where(loss_mask.bool(), targets, torch.zeros_like(targets))
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), safe_targets.reshape(-1), reduction="none")
    return (nll * weight.reshape(-1)).sum() / denom


# -- parameters & optimizer ----------------------------------------------------


class ParamSet:
    """Named parameters plus per-name trainable flags."""

    def __init__(self, params: Mapping[str, torch.Tensor], trainable: Mapping[str, bool] | None = None):
        self.params = dict(params)
        self.trainable = {n: True for n in self.params}
        if trainable:
            for n, flag in trainable.items():
                if n not in self.params:
                    raise KeyError(n)
                self.trainable[n] = bool(flag)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamSet":
        params = dict(module.named_parameters())
        return cls(params, {n: p.requires_grad for n, p in params.items()})

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, trainable: bool | None = None) -> list[str]:
        if trainable is None:
            return list(self.params)
        return [n for n in self.params if self.trainable[n] == trainable]

    def freeze(self, patterns: Iterable[str]) -> None:
        for pat in patterns:
            for n in self.params:
                if fnmatch.fnmatchcase(n, pat):
                    self.trainable[n] = False
        self.apply_flags()

    def only_train(self, patterns: Iterable[str]) -> None:
        patterns = list(patterns)
        for n in self.params:
            self.trainable[n] = any(fnmatch.fnmatchcase(n, p) for p in patterns)
        self.apply_flags()

    def apply_flags(self) -> None:
        for n, p in self.params.items():
            if isinstance(p, torch.nn.Parameter) or p.is_leaf:
                p.requires_grad_(self.trainable[n])

    def fingerprint(self, names: Iterable[str] | None = None) -> dict[str, str]:
        names = self.names() if names is None else list(names)
        return {n: tensor_hash(self.params[n]) for n in names}


def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: ParamSet,
    grads: Mapping[str, torch.Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> ParamSet:
    """One decoupled-weight-decay Adam update of every trainable parameter, in place."""
    beta1, beta2 = betas
    missing = [n for n in params.names(trainable=True) if n not in grads]
    if missing:
        raise TrainingError(f"no gradient for trainable parameters: {missing[:5]}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name in params.names(trainable=True):
        p, g = params[name], grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.mul_(1.0 - lr * weight_decay)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: dict[str, int]

    def worst(self) -> tuple[str, float]:
        name = max(self.per_tensor, key=self.per_tensor.get)
        return name, self.per_tensor[name]


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: ParamSet | Mapping[str, torch.Tensor],
    epsilon: float = 1e-6,
    n_coords: int = 32,
    seed: int = 0,
    names: Iterable[str] | None = None,
    zero_tol: float | None = None,
    reference: tuple[Callable[[], torch.Tensor], ParamSet | Mapping[str, torch.Tensor]] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``f`` against central differences.

    For each tensor a random subset of ``n_coords`` coordinates (all of them
    when the tensor is smaller) is perturbed by ``+-epsilon``. The error of a
    tensor is ``||g_fd - g_ad|| / max(||g_fd||, ||g_ad||)`` over its sampled
    coordinates; tensors whose sampled gradient is below ``zero_tol`` in both
    routes are scored by absolute error against ``zero_tol``.

    ``reference=(f_ref, params_ref)`` takes the differences on another copy of
    the same function, typically a float64 copy of a float32 model whose own
    rounding noise would swamp the differences.
    """
    tensors = params.params if isinstance(params, ParamSet) else dict(params)
    if reference is None:
        fd_f, fd_tensors = f, tensors
    else:
        fd_f, ref = reference
        fd_tensors = ref.params if isinstance(ref, ParamSet) else dict(ref)
    names = list(tensors) if names is None else list(names)
    for n in names:
        tensors[n].grad = None
    with torch.enable_grad():
        for n in names:
            tensors[n].requires_grad_(True)
        loss = f()
        auto = torch.autograd.grad(loss, [tensors[n] for n in names], allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    per_tensor: dict[str, float] = {}
    checked: dict[str, int] = {}
    for name, g_ad in zip(names, auto):
        t = tensors[name]
        if g_ad is None:
            g_ad = torch.zeros_like(t)
        flat = fd_tensors[name].data.view(-1)
        count = min(n_coords, flat.numel())
        idx = torch.randperm(flat.numel(), generator=gen)[:count]
        fd = torch.empty(count, dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(fd_f())
                flat[i] = orig - epsilon
                down = float(fd_f())
                flat[i] = orig
                fd[j] = (up - down) / (2 * epsilon)
        ad = g_ad.detach().reshape(-1)[idx].to(torch.float64)
        diff = float(torch.linalg.vector_norm(fd - ad))
        scale_ = max(float(torch.linalg.vector_norm(fd)), float(torch.linalg.vector_norm(ad)))
        tol = zero_tol if zero_tol is not None else (1e-9 if t.dtype == torch.float64 else 1e-5)
        if scale_ < tol:
            per_tensor[name] = diff / tol if diff > tol else 0.0
        else:
            per_tensor[name] = diff / scale_
        checked[name] = count
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(worst, per_tensor, checked)


# -- tensor container ----------------------------------------------------------

MAGIC = b"VPTTNSR\x00"
FORMAT_VERSION = 1
_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    name = arr.dtype.name
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {name}")
    return arr.astype(_DTYPES[name], copy=False)


def save_tensors(path: str | Path, tensors: Mapping[str, object], meta: Mapping | None = None) -> None:
    """Write named tensors as ``magic | version | header-len | JSON header | raw LE bytes``."""
    arrays = {name: _to_numpy(t) for name, t in tensors.items()}
    index, offset = [], 0
    for name, arr in arrays.items():
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({"meta": dict(meta or {}), "tensors": index}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
    buf.write(header)
    for arr in arrays.values():
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen])
    body = start + hlen
    out = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        lo = body + entry["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=math.prod(entry["shape"]), offset=lo)
        out[entry["name"]] = arr.reshape(tuple(entry["shape"])).copy()
    return out, header["meta"]
