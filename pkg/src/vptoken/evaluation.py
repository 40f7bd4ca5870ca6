"""Answer scoring, region metrics, evaluation runs, sweeps and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import prompt_tokens
from .engine import GenerationTrace, Limits, Policy, generate
from .errors import InvalidConfigError, MetricError
from .grid_codec import PixelBox
from .model import ToyMLLM
from .synthetic import SourceRecord
from .vocab import Vocabulary

log = logging.getLogger(__name__)

CSV_COLUMNS = ("task", "mode", "n", "score", "iou", "iogt", "invalid_rate", "runtime_s")

MODE_LIMITS = {
    "forced-region": (1, 0),
    "forced-reencode": (0, 1),
    "free-choice": (1, 1),
    "baseline-no-vpt": (0, 0),
}


def _norm(text: str) -> list[str]:
    return text.strip().lower().split()


def score_exact(answer: str | Sequence[int], gt: str | Sequence[int], vocab: Vocabulary | None = None) -> int:
    """1 iff the trimmed, case-folded word sequences agree. Token ids need ``vocab``."""
    if not isinstance(answer, str):
        answer = vocab.decode(answer)
    if not isinstance(gt, str):
        gt = vocab.decode(gt)
    return int(_norm(answer) == _norm(gt))


def _intersection(a: PixelBox, b: PixelBox) -> int:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(w, 0) * max(h, 0)


def iou(a: PixelBox, b: PixelBox) -> float:
    if a.empty or b.empty:
        raise MetricError(f"iou of a degenerate box: {a} / {b}")
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def iogt(pred: PixelBox, gt: PixelBox) -> float:
    if gt.empty:
        raise MetricError(f"ground-truth box {gt} is empty")
    return _intersection(pred, gt) / gt.area


# -- evaluation ------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    task_scores: dict[str, float]
    task_counts: dict[str, int]
    mean_iou: float | None = None
    mean_iogt: float | None = None
    invalid_rate: float | None = None
    region_attempts: int = 0
    reencode_events: int = 0
    skipped: int = 0
    config: str = ""
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def score(self) -> float:
        n = sum(self.task_counts.values())
        return sum(self.task_scores[t] * self.task_counts[t] for t in self.task_scores) / n if n else 0.0

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime_s")
        return d

    def rows(self) -> list[dict]:
        out = []
        for task in sorted(self.task_scores):
            out.append(
                {
                    "task": task,
                    "mode": self.mode,
                    "n": self.task_counts[task],
                    "score": self.task_scores[task],
                    "iou": self.mean_iou,
                    "iogt": self.mean_iogt,
                    "invalid_rate": self.invalid_rate,
                    "runtime_s": self.runtime_s,
                }
            )
        return out


PolicyFactory = Callable[[SourceRecord, list[int]], object]


def _mode_accepts(mode: str, rec: SourceRecord) -> bool:
    return not (mode == "forced-region" and rec.bbox is None)


def run_eval(
    model: ToyMLLM,
    records: Sequence[SourceRecord],
    mode: str,
    limits: Limits | None = None,
    policy: PolicyFactory | None = None,
    region_repr: str = "tokens",
    config_fingerprint: str = "",
    traces: list | None = None,
) -> EvalReport:
    """Generate an answer per record and aggregate scores and region metrics.

    Region metrics are averaged over region attempts (records where a region
    group was forced or chosen); attempts that yield no valid region score 0
    IoU/IoGT and count towards the invalid rate.
    """
    if mode not in MODE_LIMITS:
        raise InvalidConfigError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    vocab = model.vocab
    n_reg, n_re = MODE_LIMITS[mode]
    if limits is None:
        limits = Limits(max_tokens=16, max_region_events=n_reg, max_reencode_events=n_re)
    scores: dict[str, list[int]] = {}
    ious, iogts, invalid, skipped, reenc = [], [], 0, 0, 0
    for rec in records:
        if not _mode_accepts(mode, rec):
            skipped += 1
            continue
        prompt = prompt_tokens(vocab, rec.question, mode)
        pol = policy(rec, prompt) if policy is not None else Policy()
        tr = generate(model, rec.image(), prompt, limits, pol, region_repr)
        if traces is not None:
            traces.append((rec.id, tr))
        scores.setdefault(rec.task or rec.task_type, []).append(score_exact(tr.answer_tokens(vocab), rec.answer, vocab))
        reenc += sum(1 for e in tr.events if e.kind == "reencode" and e.executed)
        if rec.bbox is None or not _is_region_attempt(tr, vocab, mode):
            continue
        box = next((e.pixel_box for e in tr.events if e.kind == "region" and e.executed), None)
        if box is None:
            invalid += 1
            ious.append(0.0)
            iogts.append(0.0)
        else:
            ious.append(iou(box, rec.bbox))
            iogts.append(iogt(box, rec.bbox))
    if skipped:
        log.warning("skipped %d record(s) that do not fit mode %s", skipped, mode)
    attempts = len(ious)
    return EvalReport(
        mode=mode,
        task_scores={t: float(np.mean(v)) for t, v in scores.items()},
        task_counts={t: len(v) for t, v in scores.items()},
        mean_iou=float(np.mean(ious)) if attempts else None,
        mean_iogt=float(np.mean(iogts)) if attempts else None,
        invalid_rate=invalid / attempts if attempts else None,
        region_attempts=attempts,
        reencode_events=reenc,
        skipped=skipped,
        config=config_fingerprint,
        runtime_s=time.perf_counter() - t0,
    )


def _is_region_attempt(trace: GenerationTrace, vocab: Vocabulary, mode: str) -> bool:
    if mode == "forced-region":
        return True
    return mode == "free-choice" and vocab.region_start in trace.tokens


# -- experiments and sweeps ------------------------------------------------------------

SWEEP_AXES = {
    "k": (4, 8, 16, 32),
    "control_tokens": (1, 2, 4),
    "mask_modeling": (True, False),
    "reencoder": ("separate", "shared"),
    "region_repr": ("tokens", "raw-bbox-text"),
}


def run_experiment(cfg, metrics: list | None = None) -> tuple[ToyMLLM, EvalReport]:
    """Train from ``cfg`` and evaluate on its held-out split."""
    from .pipeline import test_records, train_model

    t0 = time.perf_counter()
    model = train_model(cfg, metrics)
    report = run_eval(
        model,
        test_records(cfg),
        cfg.mode,
        Limits(cfg.max_tokens, *MODE_LIMITS[cfg.mode]),
        region_repr=cfg.region_repr,
        config_fingerprint=cfg.fingerprint(),
    )
    report.runtime_s = time.perf_counter() - t0
    return model, report


@dataclass
class SweepResult:
    axis: str
    values: list
    reports: list[EvalReport]

    def table(self) -> str:
        lines = [f"{self.axis:>14} {'score':>7} {'iou':>7} {'iogt':>7} {'invalid':>8} {'runtime_s':>10}"]
        for v, r in zip(self.values, self.reports):
            lines.append(
                f"{str(v):>14} {r.score:7.3f} {_fmt(r.mean_iou):>7} {_fmt(r.mean_iogt):>7} "
                f"{_fmt(r.invalid_rate):>8} {r.runtime_s:10.1f}"
            )
        return "\n".join(lines) + "\n"


def sweep(axis: str, base, values: Sequence | None = None, metrics: dict | None = None) -> SweepResult:
    """Train and evaluate one variant per axis value from identical seeds."""
    if axis not in SWEEP_AXES:
        raise InvalidConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = list(values if values is not None else SWEEP_AXES[axis])
    reports = []
    for v in values:
        cfg = base.with_(**{axis: v})
        log.info("sweep %s=%s (%s)", axis, v, cfg.fingerprint())
        log_for = [] if metrics is not None else None
        _, rep = run_experiment(cfg, log_for)
        rep.extra[axis] = v
        if metrics is not None:
            metrics[str(v)] = log_for
        reports.append(rep)
    return SweepResult(axis, values, reports)


# -- report files ------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else f"{v:.3f}"


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def report_text(r: EvalReport) -> str:
    lines = [f"mode: {r.mode}", f"config: {r.config}", ""]
    lines.append(f"{'task':<20} {'n':>5} {'score':>7} {'iou':>7} {'iogt':>7} {'invalid':>8}")
    for row in r.rows():
        lines.append(
            f"{row['task']:<20} {row['n']:>5} {row['score']:7.3f} {_fmt(row['iou']):>7} "
            f"{_fmt(row['iogt']):>7} {_fmt(row['invalid_rate']):>8}"
        )
    lines.append(f"\nregion attempts: {r.region_attempts}  re-encode events: {r.reencode_events}  skipped: {r.skipped}")
    lines.append(f"runtime_s: {r.runtime_s:.2f}")
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_csv_value(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_report_csv(path) -> list[dict]:
    """Inverse of the csv writer: empty fields come back as None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k in ("task", "mode"):
                    parsed[k] = v
                elif k == "n":
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v) if v != "" else None
            out.append(parsed)
    return out


def emit_report(r: EvalReport | SweepResult, path) -> dict[str, Path]:
    """Write ``<path>.txt``, ``<path>.csv`` and ``<path>.plot.csv``; returns the paths."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    files = {"text": base.with_suffix(".txt"), "csv": base.with_suffix(".csv"), "plot": base.with_suffix(".plot.csv")}
    if isinstance(r, SweepResult):
        text = f"sweep axis: {r.axis}\n\n" + r.table()
        rows = [dict(row, task=f"{row['task']}[{r.axis}={v}]") for v, rep in zip(r.values, r.reports) for row in rep.rows()]
        series = [(r.axis, v, rep) for v, rep in zip(r.values, r.reports)]
    else:
        text, rows, series = report_text(r), r.rows(), [("mode", r.mode, r)]
    plot = io.StringIO()
    pw = csv.writer(plot, lineterminator="\n")
    pw.writerow(("series", "x", "y"))
    for metric in ("score", "mean_iou", "mean_iogt", "invalid_rate"):
        for _, x, rep in series:
            y = rep.score if metric == "score" else getattr(rep, metric)
            pw.writerow((metric, x, _csv_value(y)))
    files["text"].write_text(text)
    files["csv"].write_text(report_csv(rows))
    files["plot"].write_text(plot.getvalue())
    return files


def report_fingerprint(r: EvalReport) -> str:
    """Hash of everything except wall-clock runtime."""
    return hashlib.sha256(json.dumps(r.to_dict(include_runtime=False), sort_keys=True).encode()).hexdigest()
