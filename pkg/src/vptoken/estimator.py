"""Estimator-style wrapper: ``fit`` on source records, ``predict`` answers, ``score`` accuracy."""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import prompt_tokens
from .engine import Limits, Policy, generate
from .errors import InvalidConfigError
from .evaluation import MODE_LIMITS, EvalReport, run_eval, score_exact
from .pipeline import ExperimentConfig, train_on_records
from .synthetic import SourceRecord


def check_records(records, need_bbox: bool = False) -> list[SourceRecord]:
    """Coerce dicts to ``SourceRecord`` and reject empty or ill-typed input."""
    if isinstance(records, (str, bytes)) or not hasattr(records, "__iter__"):
        raise InvalidConfigError("records must be an iterable of SourceRecord or dicts")
    out = [r if isinstance(r, SourceRecord) else SourceRecord.from_dict(r) for r in records]
    if not out:
        raise InvalidConfigError("no records given")
    if need_bbox:
        missing = [r.id for r in out if r.bbox is None]
        if missing:
            raise InvalidConfigError(f"{len(missing)} record(s) lack a ground-truth box, e.g. {missing[0]}")
    return out


def check_disjoint(train: Sequence[SourceRecord], test: Sequence[SourceRecord]) -> None:
    """Held-out records must share neither ids nor scenes with training records."""
    ids = {r.id for r in train} & {r.id for r in test}
    scenes = {r.scene.fingerprint() for r in train} & {r.scene.fingerprint() for r in test}
    if ids or scenes:
        raise InvalidConfigError(f"train/test overlap: {len(ids)} id(s), {len(scenes)} scene(s)")


def check_is_fitted(est: "VPTClassifier") -> None:
    if getattr(est, "model_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class VPTClassifier(BaseEstimator):
    """Trains a toy model with perception tokens on ``SourceRecord`` lists.

    ``model_params`` overrides architecture fields (``d_h``, ``lm_layers``, ...).
    """

    def __init__(
        self,
        mode: str = "forced-region",
        k: int = 8,
        control_tokens: int = 1,
        reencoder: str = "separate",
        region_repr: str = "tokens",
        mask_modeling: bool = True,
        finetune_epochs: int = 12,
        learning_rate: float = 1e-3,
        batch_size: int = 16,
        n_captions: int = 500,
        max_tokens: int = 16,
        seed: int = 0,
        model_params: dict | None = None,
    ):
        self.mode = mode
        self.k = k
        self.control_tokens = control_tokens
        self.reencoder = reencoder
        self.region_repr = region_repr
        self.mask_modeling = mask_modeling
        self.finetune_epochs = finetune_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_captions = n_captions
        self.max_tokens = max_tokens
        self.seed = seed
        self.model_params = model_params

    def _config(self, task: str) -> ExperimentConfig:
        return ExperimentConfig(
            task=task,
            mode=self.mode,
            k=self.k,
            control_tokens=self.control_tokens,
            reencoder=self.reencoder,
            region_repr=self.region_repr,
            mask_modeling=self.mask_modeling,
            finetune_epochs=self.finetune_epochs,
            finetune_lr=self.learning_rate,
            batch_size=self.batch_size,
            n_captions=self.n_captions,
            max_tokens=self.max_tokens,
            seed=self.seed,
            model=dict(self.model_params or {}),
        )

    def fit(self, records, y=None):
        records = check_records(records, need_bbox=self.mode == "forced-region")
        if y is not None:
            raise InvalidConfigError("answers are carried by the records; pass y=None")
        cfg = self._config(records[0].task or "locate-tiny-glyph")
        self.metrics_ = []
        model = train_on_records(cfg, records, self.metrics_)
        self.model_ = model
        self.config_ = cfg
        return self

    def _limits(self) -> Limits:
        return Limits(self.max_tokens, *MODE_LIMITS[self.mode])

    def predict(self, records) -> list[str]:
        check_is_fitted(self)
        records = check_records(records)
        vocab = self.model_.vocab
        out = []
        for rec in records:
            trace = generate(self.model_, rec.image(), prompt_tokens(vocab, rec.question, self.mode),
                             self._limits(), Policy(), self.region_repr)
            out.append(vocab.decode(trace.answer_tokens(vocab)))
        return out

    def score(self, records, y=None) -> float:
        """Exact-match accuracy over ``records``."""
        records = check_records(records)
        preds = self.predict(records)
        return sum(score_exact(p, r.answer) for p, r in zip(preds, records)) / len(records)

    def evaluate(self, records) -> EvalReport:
        check_is_fitted(self)
        records = check_records(records)
        return run_eval(self.model_, records, self.mode, self._limits(), region_repr=self.region_repr,
                        config_fingerprint=self.config_.fingerprint())
