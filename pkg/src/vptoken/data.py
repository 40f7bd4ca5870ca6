"""Dialogue samples, their row layout, and attention masks.

A ``DialogueSample`` is a token stream in which each ``<image>`` placeholder
stands for a block of embedding rows. ``RowPlan`` expands the placeholders
into the exact row layout the LM sees; the trainer and the generation
engine both derive their layouts from the same role names::

    prompt-text | image-primary | generated | image-crop / image-reencoded
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .errors import BuilderError, InvalidConfigError, MaskConstructionError
from .grid_codec import (
    GridSpec,
    PixelBox,
    bbox_to_cells,
    cells_to_pixel_box,
    encode_raw_box_tokens,
    encode_region_tokens,
)
from .synthetic import SourceRecord
from .vocab import Vocabulary

MODES = ("forced-region", "forced-reencode", "free-choice", "baseline-no-vpt")
REGION_INSTRUCTION = "please identify the region that can help you answer the question better , and then answer the question ."
REENCODE_INSTRUCTION = "please require additional perception features , and then answer the question ."

# sample-level roles
QUESTION = "question"
IMAGE_PRIMARY = "image-primary"
ASSISTANT_VPT = "assistant-vpt"
IMAGE_SECOND = "image-second"
ASSISTANT_ANSWER = "assistant-answer"

# layout roles shared with the generation engine
PROMPT_TEXT = "prompt-text"
GENERATED = "generated"
IMAGE_CROP = "image-crop"
IMAGE_REENCODED = "image-reencoded"


@dataclass(frozen=True)
class DialogueSample:
    id: str
    mode: str
    tokens: tuple[int, ...]
    roles: tuple[str, ...]
    loss_mask: tuple[int, ...]
    record: SourceRecord | None = field(default=None, compare=False, repr=False)
    second: str | None = None  # "crop", "reencode" or None
    crop_box: PixelBox | None = None
    mask_modeling: bool = False
    n_control: int = 1
    control_token: int = -1

    @property
    def control_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == ASSISTANT_VPT and self.tokens[i] == self.control_token]

    def prompt_length(self) -> int:
        """Number of leading tokens that form the user prompt."""
        for i, r in enumerate(self.roles):
            if r not in (QUESTION, IMAGE_PRIMARY):
                return i
        return len(self.roles)

    def assistant_tokens(self) -> list[int]:
        """Tokens the model emits: vpt group, answer, and the closing EOS."""
        return [t for t, r in zip(self.tokens, self.roles) if r in (ASSISTANT_VPT, ASSISTANT_ANSWER)]


def _make_sample(vocab: Vocabulary, **kw) -> DialogueSample:
    s = DialogueSample(control_token=vocab.reenc_control, **kw)
    if not (len(s.tokens) == len(s.roles) == len(s.loss_mask)):
        raise BuilderError(f"sample {s.id}: tokens/roles/loss_mask length mismatch")
    return s


def _prompt(vocab: Vocabulary, question: str, instruction: str | None):
    text = question if instruction is None else f"{question} {instruction}"
    q = vocab.encode_text(text)
    tokens = [*vocab.encode_text("user"), vocab.image, *q, *vocab.encode_text("assistant")]
    roles = [QUESTION, IMAGE_PRIMARY] + [QUESTION] * (len(q) + 1)
    return tokens, roles


_INSTRUCTIONS = {
    "forced-region": REGION_INSTRUCTION,
    "forced-reencode": REENCODE_INSTRUCTION,
    "free-choice": None,
    "baseline-no-vpt": None,
}


def prompt_tokens(vocab: Vocabulary, question: str, mode: str) -> list[int]:
    """User prompt for ``mode``, ending with the assistant cue; the same template training uses."""
    if mode not in _INSTRUCTIONS:
        raise BuilderError(f"unknown mode {mode!r}")
    return _prompt(vocab, question, _INSTRUCTIONS[mode])[0]


def _assemble(vocab, rec, mode, prompt, vpt, second, crop_box, n_control):
    tokens, roles = list(prompt[0]), list(prompt[1])
    loss = [0] * len(tokens)
    if vpt:
        tokens += vpt
        roles += [ASSISTANT_VPT] * len(vpt)
        loss += [0 if t == vocab.reenc_control else 1 for t in vpt]
        tokens.append(vocab.image)
        roles.append(IMAGE_SECOND)
        loss.append(0)
    answer = vocab.encode_text(rec.answer) + [vocab.eos]
    tokens += answer
    roles += [ASSISTANT_ANSWER] * len(answer)
    loss += [1] * len(answer)
    return _make_sample(
        vocab,
        id=rec.id,
        mode=mode,
        tokens=tuple(tokens),
        roles=tuple(roles),
        loss_mask=tuple(loss),
        record=rec,
        second=second,
        crop_box=crop_box,
        n_control=n_control,
    )


def build_region_sample(
    rec: SourceRecord,
    grid: GridSpec,
    vocab: Vocabulary,
    mode: str = "forced-region",
    region_repr: str = "tokens",
) -> DialogueSample:
    if rec.bbox is None:
        raise BuilderError(f"record {rec.id} has no ground-truth box")
    if mode not in ("forced-region", "free-choice"):
        raise BuilderError(f"region samples are built in forced-region or free-choice mode, not {mode!r}")
    instruction = REGION_INSTRUCTION if mode == "forced-region" else None
    if region_repr == "tokens":
        cells = bbox_to_cells(grid, rec.bbox)
        vpt = encode_region_tokens(vocab, cells)
        crop = cells_to_pixel_box(grid, cells)
    elif region_repr == "raw-bbox-text":
        vpt = encode_raw_box_tokens(vocab, rec.bbox)
        crop = rec.bbox
    else:
        raise BuilderError(f"unknown region representation {region_repr!r}")
    return _assemble(vocab, rec, mode, _prompt(vocab, rec.question, instruction), vpt, "crop", crop, 1)


def build_reencode_sample(
    rec: SourceRecord, vocab: Vocabulary, mode: str = "forced-reencode", n_control: int = 1
) -> DialogueSample:
    if mode not in ("forced-reencode", "free-choice"):
        raise BuilderError(f"re-encode samples are built in forced-reencode or free-choice mode, not {mode!r}")
    instruction = REENCODE_INSTRUCTION if mode == "forced-reencode" else None
    vpt = [vocab.reenc_start] + [vocab.reenc_control] * n_control + [vocab.reenc_end]
    return _assemble(vocab, rec, mode, _prompt(vocab, rec.question, instruction), vpt, "reencode", None, n_control)


def build_plain_sample(rec: SourceRecord, vocab: Vocabulary, mode: str = "baseline-no-vpt") -> DialogueSample:
    """Question answered directly, with no perception group."""
    return _assemble(vocab, rec, mode, _prompt(vocab, rec.question, None), [], None, None, 1)


def build_caption_sample(rec: SourceRecord, vocab: Vocabulary, n_control: int = 1) -> DialogueSample:
    """Alignment sample: re-encode trio, re-encoded image rows, then the caption."""
    vpt = [vocab.reenc_start] + [vocab.reenc_control] * n_control + [vocab.reenc_end]
    s = _assemble(vocab, rec, "align", ([], []), vpt, "reencode", None, n_control)
    # only the caption is supervised while aligning
    return replace(s, loss_mask=tuple(1 if r == ASSISTANT_ANSWER else 0 for r in s.roles))


def mark_mask_modeling(samples: Sequence[DialogueSample], ratio: float = 0.5, seed: int = 0) -> list[DialogueSample]:
    """Flag ``floor(ratio * n + 0.5)`` re-encode samples, chosen by a seeded shuffle."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidConfigError(f"mask-modeling ratio must lie in [0, 1], got {ratio}")
    idx = [i for i, s in enumerate(samples) if s.second == "reencode"]
    n_flag = math.floor(ratio * len(idx) + 0.5)
    order = np.random.default_rng(seed).permutation(len(idx))
    chosen = {idx[j] for j in order[:n_flag]}
    return [replace(s, mask_modeling=i in chosen) for i, s in enumerate(samples)]


def build_samples(
    records: Iterable[SourceRecord],
    mode: str,
    vocab: Vocabulary,
    grid_for=None,
    region_repr: str = "tokens",
    n_control: int = 1,
    plain_fraction: float = 0.2,
    seed: int = 0,
) -> list[DialogueSample]:
    """Build one sample per record for ``mode``.

    ``grid_for(record) -> GridSpec`` supplies the quantisation grid (defaults
    to ``k`` from the vocabulary over the record's canvas). In free-choice
    mode a seeded ``plain_fraction`` of records become plain samples, the
    rest follow their task type.
    """
    if mode not in MODES:
        raise BuilderError(f"unknown mode {mode!r}")
    if grid_for is None:
        grid_for = lambda r: GridSpec(vocab.k, r.scene.canvas, r.scene.canvas)  # noqa: E731
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        if mode == "baseline-no-vpt":
            out.append(build_plain_sample(rec, vocab))
        elif mode == "forced-region":
            out.append(build_region_sample(rec, grid_for(rec), vocab, mode, region_repr))
        elif mode == "forced-reencode":
            out.append(build_reencode_sample(rec, vocab, mode, n_control))
        else:
            if rng.random() < plain_fraction or rec.task_type == "plain":
                out.append(build_plain_sample(rec, vocab, "free-choice"))
            elif rec.task_type == "region-task":
                out.append(build_region_sample(rec, grid_for(rec), vocab, mode, region_repr))
            else:
                out.append(build_reencode_sample(rec, vocab, mode, n_control))
    return out



_SAMPLE_ROLES = (QUESTION, IMAGE_PRIMARY, ASSISTANT_VPT, IMAGE_SECOND, ASSISTANT_ANSWER)


def save_samples(path, samples: Sequence[DialogueSample], meta: dict | None = None) -> None:
    """Store built samples in the tensor container used for checkpoints."""
    lengths = np.array([len(s.tokens) for s in samples], dtype=np.int64)
    tokens = np.array([t for s in samples for t in s.tokens], dtype=np.int64)
    roles = np.array([_SAMPLE_ROLES.index(r) for s in samples for r in s.roles], dtype=np.uint8)
    loss = np.array([m for s in samples for m in s.loss_mask], dtype=np.uint8)
    rows = [
        {
            "id": s.id,
            "mode": s.mode,
            "second": s.second,
            "crop_box": list(s.crop_box.as_tuple()) if s.crop_box is not None else None,
            "mask_modeling": s.mask_modeling,
            "n_control": s.n_control,
            "control_token": s.control_token,
        }
        for s in samples
    ]
    nx.save_tensors(path, {"lengths": lengths, "tokens": tokens, "roles": roles, "loss_mask": loss},
                    {**(meta or {}), "samples": rows})


def load_samples(path, records: Iterable[SourceRecord] = ()) -> tuple[list[DialogueSample], dict]:
    """Inverse of ``save_samples``; source records are re-attached by id."""
    arrays, meta = nx.load_tensors(path)
    by_id = {r.id: r for r in records}
    bounds = np.concatenate([[0], np.cumsum(arrays["lengths"])])
    out = []
    for i, row in enumerate(meta.pop("samples")):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        out.append(
            DialogueSample(
                id=row["id"],
                mode=row["mode"],
                tokens=tuple(int(t) for t in arrays["tokens"][lo:hi]),
                roles=tuple(_SAMPLE_ROLES[r] for r in arrays["roles"][lo:hi]),
                loss_mask=tuple(int(m) for m in arrays["loss_mask"][lo:hi]),
                record=by_id.get(row["id"]),
                second=row["second"],
                crop_box=PixelBox(*row["crop_box"]) if row["crop_box"] is not None else None,
                mask_modeling=row["mask_modeling"],
                n_control=row["n_control"],
                control_token=row["control_token"],
            )
        )
    return out, meta

# -- row layout ----------------------------------------------------------------------


@dataclass
class RowPlan:
    """Placeholder-expanded rows of a sample; the final EOS is not an input row."""

    token: np.ndarray  # token id per row, -1 on image rows
    kind: list[str]  # layout role per row
    role: list[str]  # sample role per row
    target: np.ndarray  # next-token target per row (-1 = none)
    loss: np.ndarray  # 1 where the row's target is supervised
    src: np.ndarray  # index into sample.tokens per row
    next_role: list[str]  # sample role of the token each row predicts

    def __len__(self) -> int:
        return len(self.kind)

    def segments(self) -> list[tuple[str, int]]:
        return merge_segments(self.kind)

    def rows_of(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kind) if k == kind]


def row_plan(sample: DialogueSample, n_primary: int, n_second: int) -> RowPlan:
    tokens, kinds, roles, srcs, sup = [], [], [], [], []
    for i, (t, r) in enumerate(zip(sample.tokens, sample.roles)):
        if r == IMAGE_PRIMARY:
            n, kind = n_primary, IMAGE_PRIMARY
        elif r == IMAGE_SECOND:
            n, kind = n_second, IMAGE_CROP if sample.second == "crop" else IMAGE_REENCODED
        else:
            n, kind = 1, PROMPT_TEXT if r == QUESTION else GENERATED
        is_img = r in (IMAGE_PRIMARY, IMAGE_SECOND)
        tokens += [-1 if is_img else t] * n
        kinds += [kind] * n
        roles += [r] * n
        srcs += [i] * n
        sup += [0 if is_img else sample.loss_mask[i]] * n
    tokens_a = np.asarray(tokens, dtype=np.int64)
    target = np.full(len(tokens), -1, dtype=np.int64)
    loss = np.zeros(len(tokens), dtype=np.int64)
    target[:-1] = tokens_a[1:]
    loss[:-1] = np.asarray(sup[1:], dtype=np.int64)
    target[loss == 0] = -1
    # the last row is the closing EOS: it is never fed back in
    end = len(tokens) - 1
    return RowPlan(
        tokens_a[:end], kinds[:end], roles[:end], target[:end], loss[:end], np.asarray(srcs[:end]), roles[1:]
    )


def merge_segments(kinds: Iterable[str]) -> list[tuple[str, int]]:
    """Run-length encode per-row layout roles into ``(role, length)`` segments."""
    segs: list[tuple[str, int]] = []
    for k in kinds:
        if segs and segs[-1][0] == k:
            segs[-1] = (k, segs[-1][1] + 1)
        else:
            segs.append((k, 1))
    return segs


def build_attention_mask(
    sample: DialogueSample,
    n_primary: int,
    n_second: int,
    strict_control_only: bool = False,
    plan: RowPlan | None = None,
) -> torch.Tensor:
    """Boolean ``T x T`` mask (True = may attend) over the sample's input rows.

    Unflagged samples get the plain causal mask. For mask-modelled samples,
    every row that predicts an answer token is cut off from question and
    primary-image rows; it keeps the re-encode group rows, the re-encoded
    image rows and earlier answer rows (only the control rows plus answer
    rows under ``strict_control_only``).
    """
    plan = plan or row_plan(sample, n_primary, n_second)
    t = len(plan)
    mask = torch.ones(t, t, dtype=torch.bool).tril()
    if not sample.mask_modeling:
        return mask
    answer_rows = answer_query_rows(plan)
    if strict_control_only:
        ctrl = set(sample.control_positions)
        keep = np.array([plan.src[j] in ctrl or plan.role[j] == ASSISTANT_ANSWER for j in range(t)])
    else:
        keep = np.array([r in (ASSISTANT_VPT, IMAGE_SECOND, ASSISTANT_ANSWER) for r in plan.role])
    keep_t = torch.from_numpy(keep)
    for i in answer_rows:
        row = mask[i] & keep_t
        row[i] = True
        mask[i] = row
    if not bool(mask.any(dim=1).all()):
        raise MaskConstructionError(f"sample {sample.id}: a query row has nothing to attend to")
    return mask


def answer_query_rows(plan: RowPlan) -> list[int]:
    """Rows whose next-token target belongs to the answer (including the row just before it)."""
    return [i for i in range(len(plan)) if ASSISTANT_ANSWER in (plan.role[i], plan.next_role[i])]
