"""Token-triggered perception loop.

Decoding proceeds one token at a time over the full embedding sequence (no
KV cache). When a perception group closes, the engine runs the matching
visual action and appends its embedding rows before decoding resumes:

* region group -> crop the source image, resize, ``g_v(f_v(crop))``
* re-encode group -> ``g_D(f_D(image), h_DC)`` where ``h_DC`` is the final
  hidden state at the control row(s)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import GENERATED, IMAGE_CROP, IMAGE_PRIMARY, IMAGE_REENCODED, PROMPT_TEXT, merge_segments
from .errors import DegenerateRegionError, OutOfRangeError, PromptError, VPTError
from .grid_codec import CellBox, GridSpec, PixelBox, cells_to_pixel_box, decode_raw_box_tokens
from .model import ToyMLLM
from .vocab import Kind, MalformedGroup, ReEncodeTrigger, RegionTrigger, classify, scan_for_group


def crop_image(x: np.ndarray, b: PixelBox) -> np.ndarray:
    """Exact sub-raster ``[y_min, y_max) x [x_min, x_max)``."""
    h, w = x.shape[:2]
    if b.empty:
        raise DegenerateRegionError(f"cannot crop empty box {b}")
    if not (0 <= b.x_min and b.x_max <= w and 0 <= b.y_min and b.y_max <= h):
        raise OutOfRangeError(f"{b} outside a {w}x{h} image")
    return x[b.y_min : b.y_max, b.x_min : b.x_max]


@dataclass
class Limits:
    max_tokens: int = 32
    max_region_events: int = 1
    max_reencode_events: int = 1

    def __post_init__(self):
        if min(self.max_tokens, self.max_region_events, self.max_reencode_events) < 0:
            raise ValueError("limits must be >= 0")


@dataclass
class Policy:
    kind: str = "greedy"  # or "temperature"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self._gen = torch.Generator().manual_seed(self.seed)

    def choose(self, logits: torch.Tensor, step: int) -> int:
        if self.kind == "greedy":
            return int(torch.argmax(logits))
        probs = torch.softmax(logits.double() / self.temperature, dim=-1)
        return int(torch.multinomial(probs, 1, generator=self._gen))


class ScriptedPolicy:
    """Ignores the logits and emits a fixed token script, then EOS."""

    def __init__(self, tokens: Sequence[int], eos: int):
        self.tokens = list(tokens)
        self.eos = eos

    def choose(self, logits: torch.Tensor, step: int) -> int:
        return self.tokens[step] if step < len(self.tokens) else self.eos


@dataclass
class PerceptionEvent:
    kind: str  # "region", "reencode" or "malformed"
    step: int
    executed: bool = False
    cells: CellBox | None = None
    pixel_box: PixelBox | None = None
    control_positions: tuple[int, ...] = ()
    malformed: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "step": self.step,
            "executed": self.executed,
            "cells": list(self.cells.as_tuple()) if self.cells else None,
            "pixel_box": list(self.pixel_box.as_tuple()) if self.pixel_box else None,
            "control_positions": list(self.control_positions),
            "malformed": self.malformed,
        }


@dataclass
class GenerationTrace:
    tokens: list[int] = field(default_factory=list)
    layout: list[tuple[str, int]] = field(default_factory=list)
    events: list[PerceptionEvent] = field(default_factory=list)
    stop_reason: str = "token-budget"
    step_lengths: list[int] = field(default_factory=list)
    step_layouts: list[list[tuple[str, int]]] = field(default_factory=list)
    control_hidden: list[torch.Tensor] = field(default_factory=list, repr=False)

    def answer_tokens(self, vocab) -> list[int]:
        """Text tokens after the last closing delimiter."""
        closers = {vocab.region_end, vocab.reenc_end}
        last = max((i for i, t in enumerate(self.tokens) if t in closers), default=-1)
        return [t for t in self.tokens[last + 1 :] if classify(vocab, t).kind is Kind.TEXT]

    def to_record(self, vocab, record_id: str | None = None) -> dict:
        return {
            "id": record_id,
            "tokens": [vocab.token_str(t) for t in self.tokens],
            "answer": vocab.decode(self.answer_tokens(vocab)),
            "events": [e.to_dict() for e in self.events],
            "layout": [[r, n] for r, n in self.layout],
            "stop_reason": self.stop_reason,
        }


def write_traces(path, traces: Sequence[tuple[str, GenerationTrace]], vocab) -> None:
    with open(path, "w") as fh:
        for rid, tr in traces:
            fh.write(json.dumps(tr.to_record(vocab, rid), sort_keys=True) + "\n")


class _Sequence:
    """Embedding rows plus their layout roles, grown as decoding proceeds."""

    def __init__(self):
        self.parts: list[torch.Tensor] = []
        self.kinds: list[str] = []

    def add(self, rows: torch.Tensor, kind: str) -> int:
        start = len(self.kinds)
        self.parts.append(rows)
        self.kinds += [kind] * rows.shape[0]
        return start

    def embeddings(self) -> torch.Tensor:
        return torch.cat(self.parts)

    def layout(self) -> list[tuple[str, int]]:
        return merge_segments(self.kinds)


@torch.no_grad()
def generate(
    model: ToyMLLM,
    image: np.ndarray,
    prompt: Sequence[int],
    limits: Limits | None = None,
    policy: Policy | ScriptedPolicy | None = None,
    region_repr: str = "tokens",
) -> GenerationTrace:
    vocab = model.vocab
    n_ctrl = model.config.control_tokens
    limits = limits or Limits()
    policy = policy or Policy()
    prompt = list(prompt)
    if prompt.count(vocab.image) != 1:
        raise PromptError("prompt must contain exactly one image placeholder")
    h, w = image.shape[:2]
    grid = GridSpec(vocab.k, w, h)

    seq = _Sequence()
    cut = prompt.index(vocab.image)
    if cut:
        seq.add(model.embed_tokens(prompt[:cut]), PROMPT_TEXT)
    seq.add(model.project(model.encode_image(image)), IMAGE_PRIMARY)
    if prompt[cut + 1 :]:
        seq.add(model.embed_tokens(prompt[cut + 1 :]), PROMPT_TEXT)

    trace = GenerationTrace()
    rows_of: list[int] = []  # LM row of each emitted token
    done = {"region": 0, "reencode": 0}
    budget = {"region": limits.max_region_events, "reencode": limits.max_reencode_events}
    hidden = None
    for step in range(limits.max_tokens):
        emb = seq.embeddings()
        logits, hidden = model.llm_forward(emb)
        logits = logits[-1]
        trace.step_lengths.append(emb.shape[0])
        trace.step_layouts.append(seq.layout())
        tok = _forced_control(trace.tokens, vocab, n_ctrl)
        if tok is None:
            tok = policy.choose(logits, step)
        if tok == vocab.eos:
            trace.stop_reason = "eos"
            break
        trace.tokens.append(tok)
        rows_of.append(seq.add(model.embed_tokens([tok]), GENERATED))

        event = _detect(vocab, trace.tokens, n_ctrl, region_repr, grid, step)
        if event is None:
            continue
        trace.events.append(event)
        if event.kind == "malformed":
            continue
        if done[event.kind] >= budget[event.kind]:
            trace.stop_reason = "perception-budget"
            break
        if event.kind == "region":
            crop = crop_image(image, event.pixel_box)
            seq.add(model.project(model.encode_image(crop)), IMAGE_CROP)
        else:
            ctrl_rows = [rows_of[p] for p in event.control_positions]
            h_dc = hidden[ctrl_rows]
            trace.control_hidden.append(h_dc.clone())
            seq.add(model.control_project(model.re_encode(image), h_dc), IMAGE_REENCODED)
        event.executed = True
        done[event.kind] += 1
    else:
        trace.stop_reason = "token-budget"
    trace.layout = seq.layout()
    return trace


def _forced_control(tokens: list[int], vocab, n_ctrl: int) -> int | None:
    """The control token's own prediction is never supervised, so the engine writes it in."""
    trailing = 0
    for t in reversed(tokens):
        if t != vocab.reenc_control:
            break
        trailing += 1
    start_at = len(tokens) - trailing - 1
    if start_at >= 0 and tokens[start_at] == vocab.reenc_start and trailing < n_ctrl:
        return vocab.reenc_control
    return None


def _detect(vocab, tokens, n_ctrl, region_repr, grid, step) -> PerceptionEvent | None:
    if region_repr == "raw-bbox-text" and tokens and tokens[-1] == vocab.region_end:
        start = max((i for i, t in enumerate(tokens) if t == vocab.region_start), default=None)
        if start is None:
            return PerceptionEvent("malformed", step, malformed="raw-box-malformed")
        try:
            box = decode_raw_box_tokens(vocab, tokens[start:], grid)
        except VPTError as exc:
            return PerceptionEvent("malformed", step, malformed=f"raw-box-{type(exc).__name__}")
        return PerceptionEvent("region", step, pixel_box=box)
    found = scan_for_group(vocab, tokens, n_ctrl)
    if found is None:
        return None
    if isinstance(found, MalformedGroup):
        return PerceptionEvent("malformed", step, malformed=found.kind)
    if isinstance(found, RegionTrigger):
        return PerceptionEvent("region", step, cells=found.cells, pixel_box=cells_to_pixel_box(grid, found.cells))
    assert isinstance(found, ReEncodeTrigger)
    return PerceptionEvent("reencode", step, control_positions=found.control_positions)
