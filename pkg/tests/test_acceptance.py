"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The verdicts are printed in the terminal summary under "acceptance criteria".
Criteria 7-9 train models from scratch and take most of the runtime.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from vptoken import numerics as nx
from vptoken.data import (
    GENERATED,
    IMAGE_CROP,
    IMAGE_PRIMARY,
    IMAGE_REENCODED,
    PROMPT_TEXT,
    QUESTION,
    answer_query_rows,
    build_attention_mask,
    build_region_sample,
    build_reencode_sample,
    mark_mask_modeling,
)
from vptoken.engine import Limits, ScriptedPolicy, generate
from vptoken.evaluation import run_experiment
from vptoken.grid_codec import (
    CellBox,
    GridSpec,
    PixelBox,
    bbox_to_cells,
    cells_to_pixel_box,
    decode_region_tokens,
    encode_region_tokens,
)
from vptoken.model import ModelConfig, ToyMLLM, load_checkpoint, save_checkpoint
from vptoken.pipeline import ExperimentConfig
from vptoken.synthetic import gen_records
from vptoken.trainer import forward_samples, plan_for
from vptoken.vocab import extend_vocabulary

COUNT_EPOCHS = 24
SMALL = dict(d_h=32, d_v=32, d_z=24, lm_layers=2, lm_heads=2, enc_layers=1, enc_heads=2)


# -- 1. codec correctness ------------------------------------------------------------------


def test_criterion_01_codec(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []
    for k in (4, 8, 16, 32):
        vocab = extend_vocabulary(256, k)
        for x0 in range(k):
            for x1 in range(x0, k):
                for y0 in range(k):
                    for y1 in range(y0, k):
                        c = CellBox(x0, y0, x1, y1)
                        if decode_region_tokens(vocab, encode_region_tokens(vocab, c)) != c:
                            failures.append(("roundtrip", k, c))
    for _ in range(10):
        k = int(rng.choice([4, 8, 16, 32]))
        w, h = (int(v) for v in rng.integers(k, 1000, size=2))
        if cells_to_pixel_box(GridSpec(k, w, h), CellBox(0, 0, k - 1, k - 1)) != PixelBox(0, 0, w, h):
            failures.append(("full", k, w, h))
    for _ in range(10_000):
        k = int(rng.choice([4, 8, 16, 32]))
        w, h = (int(v) for v in rng.integers(k, 600, size=2))
        x0, x1 = sorted(int(v) for v in rng.choice(w + 1, size=2, replace=False))
        y0, y1 = sorted(int(v) for v in rng.choice(h + 1, size=2, replace=False))
        g, b = GridSpec(k, w, h), PixelBox(x0, y0, x1, y1)
        if not cells_to_pixel_box(g, bbox_to_cells(g, b)).contains(b):
            failures.append(("contain", k, w, h, b))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    acceptance(1, ok, f"{len(failures)} failures, {elapsed:.1f}s (limit 10s)")
    assert ok, failures[:5]


# -- 2. formula fidelity -------------------------------------------------------------------


def _oracle_box(k, w, h, c):
    f = lambda num, den: math.floor(Fraction(num, den))  # noqa: E731
    return (f(c[0] * w, k), f(c[1] * h, k), f((c[2] + 1) * w, k), f((c[3] + 1) * h, k))


def test_criterion_02_formula(acceptance):
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.choice([4, 8, 16, 32]))
        w, h = (int(v) for v in rng.integers(k, 2000, size=2))
        x0, x1 = sorted(int(v) for v in rng.integers(0, k, size=2))
        y0, y1 = sorted(int(v) for v in rng.integers(0, k, size=2))
        got = cells_to_pixel_box(GridSpec(k, w, h), CellBox(x0, y0, x1, y1)).as_tuple()
        mismatches += got != _oracle_box(k, w, h, (x0, y0, x1, y1))
    acceptance(2, mismatches == 0, f"{mismatches} mismatches over 1000 pairs")
    assert mismatches == 0


# -- 3. gradient integrity -----------------------------------------------------------------


def _fd_samples(m, seed):
    v = m.vocab
    return [
        build_region_sample(gen_records("locate-tiny-glyph", 1, seed)[0], GridSpec(8, 256, 256), v),
        mark_mask_modeling([build_reencode_sample(gen_records("count-glyphs", 1, seed)[0], v)], 1.0)[0],
    ]


def _fd_worst(dtype: str, seed: int) -> float:
    """Worst per-tensor error over every parameter tensor, h_DC path included."""
    m = ToyMLLM(ModelConfig(**SMALL, dtype=dtype, seed=seed))
    m.eval()
    samples = _fd_samples(m, seed)
    reference = None
    if dtype == "float32":
        # differences on an exact float64 copy; float32 rounding noise alone exceeds 1e-3
        ref = ToyMLLM(ModelConfig(**SMALL, dtype="float64", seed=seed))
        ref.load_state_dict({k: t.double() for k, t in m.state_dict().items()})
        ref.eval()
        reference = (lambda: forward_samples(ref, samples).loss(), ref.param_set())
    rep = nx.finite_diff_check(lambda: forward_samples(m, samples).loss(), m.param_set(), epsilon=1e-6,
                               n_coords=4, seed=seed, zero_tol=1e-7 if dtype == "float32" else 1e-9,
                               reference=reference)
    assert rep.checked["g_D.ctrl_kv.weight"] > 0 and rep.checked["lm.blocks.0.attn.qkv.weight"] > 0
    return rep.max_rel_error


def test_criterion_03_gradients(acceptance):
    t0 = time.perf_counter()
    worst = {dt: max(_fd_worst(dt, s) for s in (0, 1, 2)) for dt in ("float32", "float64")}
    elapsed = time.perf_counter() - t0
    ok = worst["float32"] <= 1e-3 and worst["float64"] <= 1e-5 and elapsed < 300
    acceptance(3, ok, f"max rel err fp32 {worst['float32']:.2e} (<=1e-3, float64 differences), "
                      f"fp64 {worst['float64']:.2e} (<=1e-5), {elapsed:.0f}s")
    assert ok


# -- 4. mask-modelling contract --------------------------------------------------------------


def test_criterion_04_mask_modeling(acceptance):
    m = ToyMLLM(ModelConfig(**{**SMALL, "lm_layers": 3}))
    m.eval()
    v = m.vocab
    recs = gen_records("count-glyphs", 5, 2)
    plain = [build_reencode_sample(r, v) for r in recs]
    flagged = mark_mask_modeling(plain, 1.0)
    problems = []
    gen = torch.Generator().manual_seed(0)

    for s in flagged:
        res = forward_samples(m, [s])
        plan = res.plans[0]
        ans = answer_query_rows(plan)
        for label, rows in (("question", [j for j, r in enumerate(plan.role) if r == QUESTION]),
                            ("primary", plan.rows_of(IMAGE_PRIMARY))):
            # record every layer's input, then rerun with the perturbed rows while pinning
            # every other non-answer row to its recorded value: the answer rows may only
            # change if some layer lets them read a perturbed row
            inputs = []
            with torch.no_grad():
                base = forward_samples(m, [s], layer_hook=lambda i, x: inputs.append(x.clone()) or x).logits
                noise = torch.randn(len(rows), m.config.d_h, generator=gen)
                keep = [j for j in range(len(plan)) if j not in set(ans)]

                def pin(i, x):
                    x = x.clone()
                    x[0, keep] = inputs[i][0, keep]
                    x[0, rows] = inputs[i][0, rows] + noise
                    return x

                pert = forward_samples(m, [s], layer_hook=pin).logits
            if not torch.equal(base[0, ans], pert[0, ans]):
                problems.append(f"{s.id}: answer logits moved under {label} perturbation")
        # and the direct check: the mask itself never lets an answer row see those rows
        mask = build_attention_mask(s, 0, 0, plan=plan)
        blocked = [j for j, r in enumerate(plan.role) if r == QUESTION] + plan.rows_of(IMAGE_PRIMARY)
        if mask[ans][:, blocked].any():
            problems.append(f"{s.id}: mask lets an answer row see a blocked row")

    for s in plain:
        plan = plan_for(m, s)
        mask = build_attention_mask(s, 0, 0, plan=plan)
        if not torch.equal(mask, torch.ones_like(mask).tril()):
            problems.append(f"{s.id}: unflagged mask differs from causal")

    for s in flagged + plain:
        res = forward_samples(m, [s])
        logits = res.logits.detach().requires_grad_(True)
        nx.cross_entropy_masked(logits, res.targets, res.loss_mask).backward()
        ctrl = int(np.flatnonzero(res.plans[0].src == s.control_positions[0])[0])
        # the row predicting the control token carries no loss and no gradient
        if torch.count_nonzero(logits.grad[0, ctrl - 1]) or res.loss_mask[0, ctrl - 1]:
            problems.append(f"{s.id}: gradient at the control position")

    acceptance(4, not problems, f"{len(problems)} violations over {len(flagged)} flagged / {len(plain)} unflagged samples")
    assert not problems, problems[:5]


# -- 5. engine / trainer layout identity ---------------------------------------------------------


def test_criterion_05_layout_identity(acceptance):
    m = ToyMLLM(ModelConfig(**SMALL))
    m.eval()
    v = m.vocab
    samples = []
    for i, r in enumerate(gen_records("locate-tiny-glyph", 50, 7) + gen_records("identify-at-cell", 50, 7)):
        samples.append(build_region_sample(r, GridSpec(8, 256, 256), v, "free-choice" if i % 2 else "forced-region"))
    for i, r in enumerate(gen_records("count-glyphs", 100, 7)):
        samples.append(build_reencode_sample(r, v, "free-choice" if i % 2 else "forced-reencode"))
    mismatches = []
    for s in samples:
        n = s.prompt_length()
        tr = generate(m, s.record.image(), s.tokens[:n], Limits(32, 1, 1), ScriptedPolicy(s.assistant_tokens(), v.eos))
        if tr.layout != plan_for(m, s).segments() or not all(e.executed for e in tr.events):
            mismatches.append(s.id)
    kinds = {s.second for s in samples}
    ok = not mismatches and len(samples) == 200 and kinds == {"crop", "reencode"}
    acceptance(5, ok, f"{len(samples) - len(mismatches)}/{len(samples)} layouts identical (crop and re-encode)")
    assert ok, mismatches[:5]


# -- 6. scripted-engine oracle ----------------------------------------------------------------


def test_criterion_06_scripted_engine(acceptance):
    m = ToyMLLM(ModelConfig(**SMALL))
    m.eval()
    v = m.vocab
    image = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    text_before, text_after = v.encode_text("user"), v.encode_text("what symbol is on the small tile ? assistant")
    prompt = text_before + [v.image] + text_after
    head = [(PROMPT_TEXT, len(text_before)), (IMAGE_PRIMARY, 64), (PROMPT_TEXT, len(text_after))]
    region = [v.region_start, v.x(0), v.y(0), v.x(7), v.y(7), v.region_end]
    reenc = [v.reenc_start, v.reenc_control, v.reenc_end]
    cases = {
        "region": (region, head + [(GENERATED, 6), (IMAGE_CROP, 64)], [True], "eos"),
        "re-encode": (reenc, head + [(GENERATED, 3), (IMAGE_REENCODED, 16)], [True], "eos"),
        "budget": (region + region, head + [(GENERATED, 6), (IMAGE_CROP, 64), (GENERATED, 6)], [True, False],
                   "perception-budget"),
    }
    failed = []
    for name, (script, layout, executed, stop) in cases.items():
        tr = generate(m, image, prompt, Limits(32, 1, 1), ScriptedPolicy(script, v.eos))
        if tr.layout != layout or [e.executed for e in tr.events] != executed or tr.stop_reason != stop:
            failed.append((name, tr.layout, [e.executed for e in tr.events], tr.stop_reason))
    acceptance(6, not failed, f"{len(cases) - len(failed)}/{len(cases)} scripted examples match the hand oracle")
    assert not failed, failed


# -- trained experiments (criteria 7-9) ---------------------------------------------------------

LOCATE = ExperimentConfig(task="locate-tiny-glyph", mode="forced-region", n_train=2000, n_test=500,
                          finetune_epochs=12)
COUNT = ExperimentConfig(task="count-glyphs", mode="forced-reencode", n_train=2000, n_test=500,
                         finetune_epochs=COUNT_EPOCHS)

_RUNS: dict = {}


def _run(name: str, cfg: ExperimentConfig):
    """Train + evaluate once per session; returns (report, metrics, seconds)."""
    if name not in _RUNS:
        t0 = time.perf_counter()
        metrics: list = []
        _, report = run_experiment(cfg, metrics)
        _RUNS[name] = (report, metrics, time.perf_counter() - t0)
    return _RUNS[name]


@pytest.mark.slow
def test_criterion_07_crop_necessity(acceptance):
    vpt, _, t_vpt = _run("locate-tokens", LOCATE)
    base, _, t_base = _run("locate-baseline", LOCATE.with_(mode="baseline-no-vpt"))
    gain = vpt.score - base.score
    n = sum(vpt.task_counts.values())
    ok = (n == 500 and gain >= 0.10 and vpt.mean_iou >= 0.5 and vpt.mean_iogt >= 0.6
          and t_vpt + t_base <= 30 * 60)
    acceptance(7, ok, f"acc {vpt.score:.3f} vs baseline {base.score:.3f} (+{100 * gain:.1f} pts, >=10), "
                      f"IoU {vpt.mean_iou:.3f} (>=0.5), IoGT {vpt.mean_iogt:.3f} (>=0.6), n={n}, "
                      f"{(t_vpt + t_base) / 60:.1f} min for both models (<=30)")
    assert ok


@pytest.mark.slow
def test_criterion_08_tokens_vs_raw_boxes(acceptance):
    tok, _, _ = _run("locate-tokens", LOCATE)
    raw, _, _ = _run("locate-raw", LOCATE.with_(region_repr="raw-bbox-text"))
    ok = raw.invalid_rate > tok.invalid_rate and raw.mean_iou < tok.mean_iou
    acceptance(8, ok, f"invalid rate raw {raw.invalid_rate:.3f} vs tokens {tok.invalid_rate:.3f} (need raw higher), "
                      f"IoU raw {raw.mean_iou:.3f} vs tokens {tok.mean_iou:.3f} (need raw lower)")
    assert ok


def _control_grad(metrics) -> float:
    g = [m["control_grad_norm"] for m in metrics if m["phase"] == "finetune" and "control_grad_norm" in m]
    return float(np.mean(g))


@pytest.mark.slow
def test_criterion_09_mask_modeling_trend(acceptance):
    on, m_on, _ = _run("count-mask-on", COUNT.with_(mask_modeling=True))
    off, m_off, _ = _run("count-mask-off", COUNT.with_(mask_modeling=False))
    g_on, g_off = _control_grad(m_on), _control_grad(m_off)
    ok = on.score >= off.score - 0.01 and g_on > g_off
    acceptance(9, ok, f"re-encode acc on {on.score:.3f} vs off {off.score:.3f} (>= -1 pt), "
                      f"control grad norm on {g_on:.4f} vs off {g_off:.4f} (need on larger)")
    assert ok


# -- 10. determinism and persistence -----------------------------------------------------------


def test_criterion_10_determinism(acceptance, tmp_path):
    cfg = ExperimentConfig(n_train=24, n_test=10, finetune_epochs=1, batch_size=8, max_tokens=10, model=SMALL)
    m1, r1 = run_experiment(cfg)
    m2, r2 = run_experiment(cfg)
    same_report = r1.to_dict(include_runtime=False) == r2.to_dict(include_runtime=False)
    path = tmp_path / "m.vpt"
    save_checkpoint(m1, path)
    loaded = load_checkpoint(path)
    samples = [build_region_sample(r, GridSpec(8, 256, 256), m1.vocab) for r in gen_records("locate-tiny-glyph", 4, 9)]
    with torch.no_grad():
        same_logits = torch.equal(forward_samples(m1, samples).logits, forward_samples(loaded, samples).logits)
    ok = same_report and same_logits
    acceptance(10, ok, f"reports identical: {same_report}, checkpoint logits identical: {same_logits}")
    assert ok
