import numpy as np
import pytest
import torch

from vptoken.data import GENERATED, IMAGE_CROP, IMAGE_PRIMARY, IMAGE_REENCODED, PROMPT_TEXT, build_region_sample, \
    build_reencode_sample, prompt_tokens
from vptoken.engine import Limits, Policy, ScriptedPolicy, crop_image, generate
from vptoken.errors import DegenerateRegionError, OutOfRangeError, PromptError
from vptoken.grid_codec import GridSpec, PixelBox
from vptoken.model import ModelConfig, ToyMLLM
from vptoken.synthetic import gen_records
from vptoken.trainer import forward_samples, plan_for


@pytest.fixture(scope="module")
def model():
    m = ToyMLLM(ModelConfig(d_h=32, d_v=32, d_z=24, lm_layers=2, lm_heads=2, enc_layers=1, enc_heads=2))
    return m.eval()


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)


def test_crop_examples(image):
    assert np.array_equal(crop_image(image, PixelBox(0, 0, 64, 64)), image)
    c = crop_image(image, PixelBox(16, 16, 48, 48))
    assert c.shape[:2] == (32, 32)
    assert np.array_equal(c, image[16:48, 16:48])
    with pytest.raises(DegenerateRegionError):
        crop_image(image, PixelBox(10, 10, 10, 20))
    with pytest.raises(OutOfRangeError):
        crop_image(image, PixelBox(0, 0, 65, 10))


def _prompt(vocab):
    return vocab.encode_text("user") + [vocab.image] + vocab.encode_text("what symbol is on the small tile ? assistant")


def test_scripted_region_layout(model, image):
    v = model.vocab
    prompt = _prompt(v)
    script = [v.region_start, v.x(0), v.y(0), v.x(7), v.y(7), v.region_end]
    tr = generate(model, image, prompt, Limits(16, 1, 1), ScriptedPolicy(script, v.eos))
    n_text = len(prompt) - 1
    assert tr.layout == [(PROMPT_TEXT, 1), (IMAGE_PRIMARY, 64), (PROMPT_TEXT, n_text - 1), (GENERATED, 6),
                         (IMAGE_CROP, 64)]
    assert tr.stop_reason == "eos"
    (ev,) = tr.events
    assert ev.kind == "region" and ev.executed and ev.pixel_box == PixelBox(0, 0, 64, 64)
    assert tr.step_lengths[-1] == 1 + 64 + (n_text - 1) + 6 + 64


def test_scripted_reencode_appends_rows(model, image):
    v = model.vocab
    script = [v.reenc_start, v.reenc_control, v.reenc_end]
    tr = generate(model, image, _prompt(v), Limits(16, 1, 1), ScriptedPolicy(script, v.eos))
    assert tr.layout[-2:] == [(GENERATED, 3), (IMAGE_REENCODED, 16)]
    assert tr.events[0].kind == "reencode" and tr.events[0].executed
    assert tr.control_hidden[0].shape == (1, model.config.d_h)


def test_control_token_forced(model, image):
    v = model.vocab
    # the script asks for a text token where the control token belongs; the engine overrides it
    script = [v.reenc_start, v.encode_text("red")[0], v.reenc_end]
    tr = generate(model, image, _prompt(v), Limits(16, 1, 1), ScriptedPolicy(script, v.eos))
    assert tr.tokens[:3] == [v.reenc_start, v.reenc_control, v.reenc_end]


def test_budget_stop(model, image):
    v = model.vocab
    group = [v.region_start, v.x(0), v.y(0), v.x(3), v.y(3), v.region_end]
    tr = generate(model, image, _prompt(v), Limits(32, 1, 1), ScriptedPolicy(group + group, v.eos))
    assert [e.executed for e in tr.events] == [True, False]
    assert tr.stop_reason == "perception-budget"
    assert sum(n for k, n in tr.layout if k == IMAGE_CROP) == 64


def test_malformed_group_not_executed(model, image):
    v = model.vocab
    script = [v.region_start, v.x(5), v.y(0), v.x(2), v.y(7), v.region_end]
    tr = generate(model, image, _prompt(v), Limits(16, 1, 1), ScriptedPolicy(script, v.eos))
    assert tr.events and tr.events[0].kind == "malformed" and not tr.events[0].executed
    assert IMAGE_CROP not in dict(tr.layout)


def test_zero_max_tokens(model, image):
    tr = generate(model, image, _prompt(model.vocab), Limits(0, 1, 1))
    assert tr.tokens == [] and tr.events == [] and tr.stop_reason == "token-budget"


def test_prompt_errors(model, image):
    v = model.vocab
    with pytest.raises(PromptError):
        generate(model, image, v.encode_text("user what"))
    with pytest.raises(PromptError):
        generate(model, image, [v.image, v.image])


def test_temperature_policy_seeded(model, image):
    p = _prompt(model.vocab)
    a = generate(model, image, p, Limits(6, 1, 1), Policy("temperature", 1.0, seed=5))
    b = generate(model, image, p, Limits(6, 1, 1), Policy("temperature", 1.0, seed=5))
    assert a.tokens == b.tokens


@pytest.mark.parametrize("kind", ["region", "reencode"])
def test_engine_matches_teacher_forcing(model, kind):
    """Replaying a training sample through the engine gives the training layout and h_DC."""
    v = model.vocab
    if kind == "region":
        rec = gen_records("locate-tiny-glyph", 1, 4)[0]
        s = build_region_sample(rec, GridSpec(v.k, 256, 256), v)
    else:
        rec = gen_records("count-glyphs", 1, 4)[0]
        s = build_reencode_sample(rec, v)
    n_prompt = s.prompt_length()
    emitted = s.assistant_tokens()
    tr = generate(model, rec.image(), s.tokens[:n_prompt], Limits(32, 1, 1), ScriptedPolicy(emitted, v.eos))
    assert tr.tokens == emitted[:-1]
    plan = plan_for(model, s)
    assert tr.layout == plan.segments()
    res = forward_samples(model, [s])
    if kind == "reencode":
        torch.testing.assert_close(tr.control_hidden[0], res.h_dc[0], rtol=1e-5, atol=1e-5)
    assert tr.step_lengths[-1] == len(plan.kind)


def test_prompt_tokens_decode(model):
    v = model.vocab
    p = prompt_tokens(v, "what symbol is on the small tile ?", "forced-region")
    assert p.count(v.image) == 1
