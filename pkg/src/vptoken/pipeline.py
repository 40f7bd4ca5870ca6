"""Experiment configuration: data, model and training schedule in one record."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace

from .data import MODES, build_samples
from .errors import InvalidConfigError
from .model import ModelConfig, ToyMLLM
from .synthetic import TASKS, SourceRecord, gen_captions, gen_records
from . import trainer as tr

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    task: str = "locate-tiny-glyph"
    mode: str = "forced-region"
    n_train: int = 2000
    n_test: int = 500
    train_seed: int = 0
    test_seed: int = 1
    k: int = 8
    control_tokens: int = 1
    reencoder: str = "separate"
    region_repr: str = "tokens"
    mask_modeling: bool = True
    mask_ratio: float = 0.5
    n_captions: int = 500
    align_epochs: int = 1
    align_lr: float = 1e-3
    finetune_epochs: int = 12
    finetune_lr: float = 1e-3
    batch_size: int = 16
    tune_projector: bool = False
    max_tokens: int = 16
    seed: int = 0
    model: dict = field(default_factory=dict)  # extra ModelConfig fields

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfigError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown mode {self.mode!r}")
        if self.region_repr not in ("tokens", "raw-bbox-text"):
            raise InvalidConfigError(f"unknown region_repr {self.region_repr!r}")
        if self.train_seed == self.test_seed:
            raise InvalidConfigError("train_seed and test_seed must differ (held-out split)")
        if min(self.n_train, self.n_test) < 1:
            raise InvalidConfigError("n_train and n_test must be >= 1")
        if isinstance(self.mask_modeling, str):
            self.mask_modeling = self.mask_modeling.lower() in ("on", "true", "1", "yes")
        unknown = set(self.model) - {f.name for f in fields(ModelConfig)}
        if unknown:
            raise InvalidConfigError(f"unknown model fields {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            **{
                "k": self.k,
                "control_tokens": self.control_tokens,
                "reencoder": self.reencoder,
                "seed": self.seed,
                **self.model,
            }
        )


def train_records(cfg: ExperimentConfig) -> list[SourceRecord]:
    return gen_records(cfg.task, cfg.n_train, cfg.train_seed)


def test_records(cfg: ExperimentConfig) -> list[SourceRecord]:
    """Held-out records from a different seed range, minus any scene also seen in training."""
    seen = {r.scene.fingerprint() for r in train_records(cfg)}
    recs = gen_records(cfg.task, cfg.n_test, cfg.test_seed)
    kept = [r for r in recs if r.scene.fingerprint() not in seen]
    if len(kept) < len(recs):
        log.warning("dropped %d test records whose scenes appear in training", len(recs) - len(kept))
    return kept


def train_model(cfg: ExperimentConfig, metrics: list | None = None) -> ToyMLLM:
    return train_on_records(cfg, train_records(cfg), metrics)


def train_on_records(
    cfg: ExperimentConfig, records: list[SourceRecord], metrics: list | None = None, samples=None
) -> ToyMLLM:
    """Build a fresh model and run alignment (when it applies) then finetuning.

    ``samples`` may hold samples already built from ``records`` for ``cfg``.
    """
    model = ToyMLLM(cfg.model_config())
    model.eval()
    if samples is None:
        samples = build_samples(
            records, cfg.mode, model.vocab, region_repr=cfg.region_repr, n_control=cfg.control_tokens, seed=cfg.seed
        )
    uses_reencode = any(s.second == "reencode" for s in samples)
    if uses_reencode and cfg.n_captions > 0:
        tr.align_phase(
            model,
            gen_captions(cfg.n_captions, cfg.train_seed),
            tr.align_config(epochs=cfg.align_epochs, learning_rate=cfg.align_lr, batch_size=cfg.batch_size, seed=cfg.seed),
            metrics,
        )
    ratio = cfg.mask_ratio if cfg.mask_modeling else 0.0
    ft = tr.finetune_config(
        epochs=cfg.finetune_epochs,
        learning_rate=cfg.finetune_lr,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        mask_modeling_ratio=ratio,
    )
    tr.finetune_phase(model, samples, ft, metrics)
    if cfg.tune_projector and uses_reencode:
        tr.tune_projector_extra(
            model,
            samples,
            cfg=tr.tune_projector_config(
                learning_rate=cfg.finetune_lr, batch_size=cfg.batch_size, seed=cfg.seed, mask_modeling_ratio=ratio
            ),
            metrics=metrics,
        )
    return model
