"""Teacher-forced forward pass, training steps, and the phase schedule.

Phases:

* ``align`` -- only the re-encoding projector learns; captions are predicted
  from re-encoded image rows (skipped for the shared re-encoder).
* ``finetune`` -- everything except the two vision encoders learns, with
  per-sample attention masks and loss masks.
* ``tune_projector`` -- one extra pass that trains only the projection of the
  control hidden state inside the re-encoding projector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .data import (
    GENERATED,
    IMAGE_CROP,
    IMAGE_PRIMARY,
    IMAGE_REENCODED,
    PROMPT_TEXT,
    DialogueSample,
    RowPlan,
    build_attention_mask,
    build_caption_sample,
    mark_mask_modeling,
    row_plan,
)
from .engine import crop_image
from .errors import InvalidConfigError, TrainingError
from .model import ToyMLLM
from .synthetic import SourceRecord

log = logging.getLogger(__name__)

ALIGN_FROZEN = ("f_v.*", "g_v.*", "f_D.*", "lm.*")
FINETUNE_FROZEN = ("f_v.*", "f_D.*")
PROJECTOR_TARGET = ("g_D.ctrl_kv.*",)


@dataclass
class PhaseConfig:
    name: str = "finetune"  # align | finetune | tune_projector
    epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 16
    frozen: tuple[str, ...] = FINETUNE_FROZEN
    trainable_only: tuple[str, ...] = ()  # when set, everything else is frozen
    seed: int = 0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    mask_modeling_ratio: float = 0.0
    strict_control_only: bool = False

    def __post_init__(self):
        if self.name not in ("align", "finetune", "tune_projector"):
            raise InvalidConfigError(f"unknown phase {self.name!r}")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if not 0.0 <= self.mask_modeling_ratio <= 1.0:
            raise InvalidConfigError("mask_modeling_ratio must lie in [0, 1]")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        self.frozen = tuple(self.frozen)
        self.trainable_only = tuple(self.trainable_only)
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


def align_config(**kw) -> PhaseConfig:
    return PhaseConfig(**{"name": "align", "epochs": 1, "learning_rate": 1e-3, "frozen": ALIGN_FROZEN, **kw})


def finetune_config(**kw) -> PhaseConfig:
    return PhaseConfig(**{"name": "finetune", "epochs": 3, "learning_rate": 1e-3, "frozen": FINETUNE_FROZEN, **kw})


def tune_projector_config(**kw) -> PhaseConfig:
    return PhaseConfig(
        **{"name": "tune_projector", "epochs": 1, "learning_rate": 1e-3, "trainable_only": PROJECTOR_TARGET, **kw}
    )


# Values reported for the full-size setting; selectable by name.
FULL_SIZE_PRESETS = {
    "align": dict(name="align", epochs=1, learning_rate=2e-3, batch_size=128, frozen=ALIGN_FROZEN),
    "finetune": dict(name="finetune", epochs=1, learning_rate=2e-5, batch_size=256, frozen=FINETUNE_FROZEN),
}


# -- features --------------------------------------------------------------------------


class FeatureCache:
    """Frozen-encoder outputs per sample; valid while the encoders stay frozen."""

    def __init__(self):
        self._store: dict[tuple, torch.Tensor] = {}

    def get(self, key, fn):
        if key not in self._store:
            with torch.no_grad():
                self._store[key] = fn()
        return self._store[key]


def _source_image(sample: DialogueSample) -> np.ndarray:
    if sample.record is None:
        raise TrainingError(f"sample {sample.id} has no source record")
    return sample.record.image()


def sample_features(model: ToyMLLM, sample: DialogueSample, cache: FeatureCache | None) -> dict:
    """Encoder outputs needed by ``sample``: primary ``z``, crop ``z`` and/or ``z_D``."""
    scene = sample.record.scene.fingerprint() if sample.record is not None else sample.id
    out = {}

    def get(key, fn):
        return fn() if cache is None else cache.get((scene,) + key, fn)

    if IMAGE_PRIMARY in sample.roles:
        out["primary"] = get(("primary",), lambda: model.encode_image(_source_image(sample)))
    if sample.second == "crop":
        box = sample.crop_box
        out["crop"] = get(("crop", box.as_tuple()), lambda: model.encode_image(crop_image(_source_image(sample), box)))
    elif sample.second == "reencode":
        out["reencode"] = get(("reencode",), lambda: model.re_encode(_source_image(sample)))
    return out



def n_second_rows(model: ToyMLLM, sample: DialogueSample) -> int:
    if sample.second == "crop":
        return model.config.num_primary
    if sample.second == "reencode":
        return model.config.num_reencode
    return 0


def plan_for(model: ToyMLLM, sample: DialogueSample) -> RowPlan:
    return row_plan(sample, model.config.num_primary, n_second_rows(model, sample))


# -- teacher-forced forward --------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: torch.Tensor  # (B, T, V)
    hidden: torch.Tensor  # (B, T, d_h)
    targets: torch.Tensor  # (B, T)
    loss_mask: torch.Tensor  # (B, T)
    masks: torch.Tensor  # (B, T, T)
    plans: list[RowPlan]
    h_dc: dict[int, torch.Tensor] = field(default_factory=dict)  # batch index -> control rows
    embeds: torch.Tensor | None = None

    def loss(self) -> torch.Tensor:
        return nx.cross_entropy_masked(self.logits, self.targets, self.loss_mask)


def _embed_rows(model, sample, plan, feats, h_d=None) -> torch.Tensor:
    parts, offset = [], 0
    for kind, n in plan.segments():
        if kind in (PROMPT_TEXT, GENERATED):
            parts.append(model.embed_tokens(plan.token[offset : offset + n]))
        elif kind == IMAGE_PRIMARY:
            parts.append(model.project(feats["primary"]))
        elif kind == IMAGE_CROP:
            parts.append(model.project(feats["crop"]))
        elif kind == IMAGE_REENCODED:
            parts.append(h_d if h_d is not None else torch.zeros(n, model.config.d_h, dtype=model.dtype))
        offset += n
    return torch.cat(parts)


def _pad_stack(rows: Sequence[torch.Tensor], t: int) -> torch.Tensor:
    out = []
    for r in rows:
        if r.shape[0] < t:
            r = torch.cat([r, r.new_zeros(t - r.shape[0], *r.shape[1:])])
        out.append(r)
    return torch.stack(out)


def forward_samples(
    model: ToyMLLM,
    samples: Sequence[DialogueSample],
    cache: FeatureCache | None = None,
    strict_control_only: bool = False,
    embed_override=None,
    layer_hook=None,
) -> ForwardResult:
    """Batched teacher-forced forward.

    Re-encode samples take two passes: the first reads ``h_DC`` at the control
    rows (causality makes it independent of what follows), the second runs
    with ``h_D = g_D(z_D, h_DC)`` in place.
    """
    plans = [plan_for(model, s) for s in samples]
    feats = [sample_features(model, s, cache) for s in samples]
    t = max(len(p) for p in plans)
    b = len(samples)
    masks = torch.ones(b, t, t, dtype=torch.bool).tril()
    for i, (s, p) in enumerate(zip(samples, plans)):
        n = len(p)
        masks[i, :n, :n] = build_attention_mask(s, 0, 0, strict_control_only, plan=p)
    targets = torch.full((b, t), -1, dtype=torch.long)
    loss_mask = torch.zeros(b, t, dtype=torch.long)
    for i, p in enumerate(plans):
        targets[i, : len(p)] = torch.from_numpy(p.target)
        loss_mask[i, : len(p)] = torch.from_numpy(p.loss)

    rows = [_embed_rows(model, s, p, f) for s, p, f in zip(samples, plans, feats)]
    if embed_override is not None:
        rows = [embed_override(i, r) for i, r in enumerate(rows)]
    h_dc: dict[int, torch.Tensor] = {}
    re_idx = [i for i, s in enumerate(samples) if s.second == "reencode"]
    if re_idx:
        sub_t = max(len(plans[i]) for i in re_idx)
        _, hid1 = model.llm_forward(_pad_stack([rows[i] for i in re_idx], sub_t), masks[re_idx][:, :sub_t, :sub_t])
        for j, i in enumerate(re_idx):
            ctrl_rows = [int(np.flatnonzero(plans[i].src == pos)[0]) for pos in samples[i].control_positions]
            h_dc[i] = hid1[j, ctrl_rows]
            h_d = model.control_project(feats[i]["reencode"], h_dc[i])
            rows[i] = _embed_rows(model, samples[i], plans[i], feats[i], h_d)
            if embed_override is not None:
                rows[i] = embed_override(i, rows[i])
    embeds = _pad_stack(rows, t)
    logits, hidden = model.llm_forward(embeds, masks, layer_hook=layer_hook)
    return ForwardResult(logits, hidden, targets, loss_mask, masks, plans, h_dc, embeds)


# -- optimisation ------------------------------------------------------------------------


@dataclass
class TrainState:
    params: nx.ParamSet
    opt: nx.AdamWState = field(default_factory=nx.AdamWState)
    step: int = 0


def prepare_params(model: ToyMLLM, cfg: PhaseConfig) -> nx.ParamSet:
    params = model.param_set()
    if cfg.trainable_only:
        params.only_train(cfg.trainable_only)
    else:
        params.only_train(["*"])
        params.freeze(cfg.frozen)
    return params


def train_step(
    model: ToyMLLM,
    batch: Sequence[DialogueSample],
    state: TrainState,
    cfg: PhaseConfig,
    cache: FeatureCache | None = None,
    metrics: list | None = None,
) -> float:
    """Forward, masked cross-entropy, backward, AdamW. Returns the batch mean loss."""
    trainable = [state.params[n] for n in state.params.names(trainable=True)]
    for p in state.params.params.values():
        p.grad = None
    res = forward_samples(model, batch, cache, cfg.strict_control_only)
    for h in res.h_dc.values():
        if h.requires_grad:
            h.retain_grad()
    loss = res.loss()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at {cfg.name} step {state.step} (batch ids {[s.id for s in batch][:4]})")
    loss.backward()
    grads = {
        n: (p.grad if p.grad is not None else torch.zeros_like(p))
        for n, p in zip(state.params.names(trainable=True), trainable)
    }
    nx.adamw_step(state.params, grads, state.opt, cfg.learning_rate, cfg.betas, cfg.weight_decay)
    state.step += 1
    value = float(loss.detach())
    if metrics is not None:
        entry = {"step": state.step, "phase": cfg.name, "loss": value}
        ctrl = [float(h.grad.norm()) for h in res.h_dc.values() if h.grad is not None]
        if ctrl:
            entry["control_grad_norm"] = sum(ctrl) / len(ctrl)
        metrics.append(entry)
    return value


def _epochs(model, samples, cfg, metrics, cache):
    params = prepare_params(model, cfg)
    state = TrainState(params)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    samples = list(samples)
    losses = []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            losses.append(train_step(model, batch, state, cfg, cache, metrics))
        log.info("%s epoch %d: mean loss %.4f", cfg.name, epoch, float(np.mean(losses[-max(1, len(samples) // cfg.batch_size):])))
    model.eval()
    # leave every parameter trainable-by-default outside a phase
    for p in model.parameters():
        p.requires_grad_(True)
    return losses


def align_phase(model: ToyMLLM, pairs: Iterable[SourceRecord | DialogueSample], cfg: PhaseConfig | None = None, metrics=None):
    cfg = cfg or align_config()
    if cfg.name != "align":
        raise InvalidConfigError("align_phase needs an align PhaseConfig")
    if model.config.reencoder == "shared":
        log.warning("alignment skipped: the shared re-encoder needs no alignment")
        return model
    n_ctrl = model.config.control_tokens
    samples = [p if isinstance(p, DialogueSample) else build_caption_sample(p, model.vocab, n_ctrl) for p in pairs]
    _epochs(model, samples, cfg, metrics, FeatureCache())
    return model


def finetune_phase(model: ToyMLLM, samples: Sequence[DialogueSample], cfg: PhaseConfig | None = None, metrics=None):
    cfg = cfg or finetune_config()
    if cfg.name != "finetune":
        raise InvalidConfigError("finetune_phase needs a finetune PhaseConfig")
    for s in samples:
        if not any(s.loss_mask):
            raise TrainingError(f"sample {s.id} has an empty loss mask")
    if cfg.mask_modeling_ratio > 0:
        samples = mark_mask_modeling(samples, cfg.mask_modeling_ratio, cfg.seed)
    _epochs(model, samples, cfg, metrics, FeatureCache())
    return model


def tune_projector_extra(model: ToyMLLM, samples: Sequence[DialogueSample], epochs: int = 1, cfg: PhaseConfig | None = None, metrics=None):
    cfg = cfg or tune_projector_config(epochs=epochs)
    if cfg.mask_modeling_ratio > 0:
        samples = mark_mask_modeling(samples, cfg.mask_modeling_ratio, cfg.seed)
    _epochs(model, samples, cfg, metrics, FeatureCache())
    return model


def write_metrics(path, metrics: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
