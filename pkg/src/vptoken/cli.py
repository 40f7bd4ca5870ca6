"""Command line entry point: build-data, train, eval, generate, sweep.

Settings come from built-in defaults, then an optional ``--config`` file
(YAML or JSON), then explicit flags, each layer overriding the previous one.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .data import MODES, build_samples, load_samples, prompt_tokens, save_samples
from .engine import Limits, Policy, generate, write_traces
from .errors import InvalidConfigError, VPTError
from .evaluation import MODE_LIMITS, SWEEP_AXES, emit_report, run_eval, sweep
from .model import load_checkpoint, save_checkpoint
from .pipeline import ExperimentConfig, test_records, train_on_records, train_records
from .synthetic import TASKS, SourceRecord, gen_records
from .trainer import write_metrics
from .vocab import extend_vocabulary

log = logging.getLogger("vptoken")

# flag dest -> ExperimentConfig field
# settings stored on every dataset line
_DATASET_SETTINGS = ("mode", "k", "region_repr")

_CONFIG_FLAGS = {
    "task": str,
    "mode": str,
    "n_train": int,
    "n_test": int,
    "train_seed": int,
    "test_seed": int,
    "k": int,
    "control_tokens": int,
    "reencoder": str,
    "region_repr": str,
    "mask_modeling": str,
    "mask_ratio": float,
    "n_captions": int,
    "align_epochs": int,
    "align_lr": float,
    "finetune_epochs": int,
    "finetune_lr": float,
    "batch_size": int,
    "tune_projector": str,
    "max_tokens": int,
    "seed": int,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise InvalidConfigError(f"config {path} must hold a mapping")
    return data


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> ExperimentConfig:
    merged = dict(base or {})
    merged.update(load_config_file(getattr(args, "config", None)))
    for name in _CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            merged[name] = v
    for flag in ("mask_modeling", "tune_projector"):
        if isinstance(merged.get(flag), str):
            merged[flag] = merged[flag].lower() in ("on", "true", "1", "yes")
    return ExperimentConfig.from_dict(merged)


def read_dataset(path: Path) -> tuple[dict, list[SourceRecord]]:
    """Line-delimited records; returns the settings shared by every line and the records."""
    records, shared = [], None
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                settings = {k: row.pop(k) for k in _DATASET_SETTINGS if k in row}
                shared = settings if shared is None else {k: v for k, v in shared.items() if settings.get(k) == v}
                records.append(SourceRecord.from_dict(row))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidConfigError(f"cannot read dataset {path}: {exc}") from exc
    if not records:
        raise InvalidConfigError(f"dataset {path} holds no records")
    return shared or {}, records


def write_dataset(path: Path, settings: dict, records: list[SourceRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({**r.to_dict(), **settings}, sort_keys=True) + "\n")


def samples_path(data: Path) -> Path:
    return Path(str(data) + ".samples")


def _cached_samples(data: Path, cfg: ExperimentConfig, records: list[SourceRecord]):
    path = samples_path(data)
    if not path.exists():
        return None
    samples, meta = load_samples(path, records)
    want = {"mode": cfg.mode, "k": cfg.k, "region_repr": cfg.region_repr, "control_tokens": cfg.control_tokens,
            "seed": cfg.seed}
    if any(meta.get(k) != v for k, v in want.items()):
        log.info("sample cache %s does not match the config; rebuilding", path)
        return None
    return samples


# -- subcommands -------------------------------------------------------------------------


def cmd_build_data(args) -> int:
    records = gen_records(args.task, args.n, args.seed)
    vocab = extend_vocabulary(k=args.k)
    # building the samples validates that every record fits the mode
    samples = build_samples(records, args.mode, vocab, region_repr=args.region_repr, n_control=args.control_tokens,
                            seed=args.seed)
    write_dataset(args.out, {"mode": args.mode, "k": args.k, "region_repr": args.region_repr}, records)
    save_samples(samples_path(args.out), samples, {"mode": args.mode, "k": args.k, "region_repr": args.region_repr,
                                                   "control_tokens": args.control_tokens, "seed": args.seed})
    print(f"wrote {len(records)} records ({len(samples)} {args.mode} samples) to {args.out}")
    return 0


def cmd_train(args) -> int:
    samples = None
    if args.data:
        settings, records = read_dataset(args.data)
        cfg = resolve_config(args, settings)
        samples = _cached_samples(args.data, cfg, records)
    else:
        cfg = resolve_config(args)
        records = train_records(cfg)
    metrics: list = []
    model = train_on_records(cfg, records, metrics, samples=samples)
    save_checkpoint(model, args.out, {"experiment": cfg.to_dict()})
    if args.metrics:
        write_metrics(args.metrics, metrics)
    final = metrics[-1]["loss"] if metrics else float("nan")
    print(f"saved {args.out} (final loss {final:.4f}, {len(metrics)} steps)")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    # the checkpoint's own experiment settings are the lowest layer
    cfg = resolve_config(args, model.checkpoint_extra.get("experiment"))
    records = read_dataset(args.data)[1] if args.data else test_records(cfg)
    limits = Limits(cfg.max_tokens, *MODE_LIMITS[cfg.mode])
    traces: list = []
    report = run_eval(model, records, cfg.mode, limits, region_repr=cfg.region_repr,
                      config_fingerprint=cfg.fingerprint(), traces=traces)
    files = emit_report(report, args.out)
    if args.traces:
        write_traces(args.traces, traces, model.vocab)
    print(files["text"].read_text(), end="")
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, records = read_dataset(args.data)
    rec = next((r for r in records if r.id == args.record_id), None)
    if rec is None:
        raise InvalidConfigError(f"record {args.record_id!r} not in {args.data}")
    n_reg, n_re = MODE_LIMITS[args.mode]
    limits = Limits(args.max_tokens, args.max_region_events if args.max_region_events is not None else n_reg,
                    args.max_reencode_events if args.max_reencode_events is not None else n_re)
    policy = Policy(args.policy, args.temperature, args.seed)
    trace = generate(model, rec.image(), prompt_tokens(model.vocab, rec.question, args.mode), limits, policy,
                     args.region_repr)
    if args.out:
        write_traces(args.out, [(rec.id, trace)], model.vocab)
    print(json.dumps(trace.to_record(model.vocab, rec.id), sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = None
    if args.values:
        cast = {"k": int, "control_tokens": int, "mask_modeling": lambda v: v.lower() in ("on", "true", "1")}
        values = [cast.get(args.axis, str)(v) for v in args.values.split(",")]
    result = sweep(args.axis, cfg, values)
    emit_report(result, args.out)
    print(f"sweep axis: {args.axis}\n" + result.table(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vptoken", description="Perception-token toy model: data, training, evaluation.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="generate a synthetic dataset file")
    p.add_argument("--task", choices=TASKS, default="locate-tiny-glyph")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--mode", choices=MODES, default="forced-region")
    p.add_argument("--region-repr", choices=("tokens", "raw-bbox-text"), default="tokens")
    p.add_argument("--control-tokens", type=int, default=1)
    p.add_argument("--out", type=Path, required=True, help="line-delimited records; samples go to <out>.samples")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="train a model; writes a checkpoint and a metrics log")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="dataset file; defaults to records generated from the config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--metrics", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes report files")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset file; defaults to the config's held-out split")
    p.add_argument("--out", type=Path, required=True, help="report path prefix")
    p.add_argument("--traces", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode one record and dump its trace")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--record-id", required=True)
    p.add_argument("--mode", choices=list(MODE_LIMITS), default="forced-region")
    p.add_argument("--region-repr", choices=("tokens", "raw-bbox-text"), default="tokens")
    p.add_argument("--max-tokens", type=int, default=16)
    p.add_argument("--max-region-events", type=int)
    p.add_argument("--max-reencode-events", type=int)
    p.add_argument("--policy", choices=("greedy", "temperature"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep", help="train and evaluate one variant per value of an ablation axis")
    _add_config_flags(p)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", help="comma-separated subset of the axis values")
    p.add_argument("--out", type=Path, required=True, help="report path prefix")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
