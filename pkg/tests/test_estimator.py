import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vptoken.errors import InvalidConfigError
from vptoken.estimator import VPTClassifier, check_disjoint, check_is_fitted, check_records
from vptoken.synthetic import gen_records


@pytest.fixture(scope="module")
def fitted():
    tiny = dict(d_h=32, d_v=32, d_z=24, lm_layers=1, lm_heads=2, enc_layers=1, enc_heads=2)
    est = VPTClassifier(finetune_epochs=1, batch_size=4, max_tokens=8, model_params=tiny)
    return est.fit(gen_records("locate-tiny-glyph", 8, 0))


def test_params_round_trip():
    est = VPTClassifier(k=16, mode="forced-reencode")
    assert est.get_params()["k"] == 16
    c = clone(est)
    assert c.get_params() == est.get_params()


def test_check_records():
    recs = gen_records("count-glyphs", 2, 0)
    assert check_records([r.to_dict() for r in recs]) == recs
    with pytest.raises(InvalidConfigError):
        check_records([])
    with pytest.raises(InvalidConfigError):
        check_records("abc")
    with pytest.raises(InvalidConfigError):
        check_records(recs, need_bbox=True)


def test_check_disjoint():
    a, b = gen_records("count-glyphs", 5, 0), gen_records("count-glyphs", 5, 1)
    check_disjoint(a, b)
    with pytest.raises(InvalidConfigError):
        check_disjoint(a, a[:1])


def test_not_fitted():
    with pytest.raises(NotFittedError):
        VPTClassifier().predict(gen_records("count-glyphs", 1, 0))
    with pytest.raises(NotFittedError):
        check_is_fitted(VPTClassifier())


def test_fit_predict_score(fitted):
    test = gen_records("locate-tiny-glyph", 3, 1)
    preds = fitted.predict(test)
    assert len(preds) == 3 and all(isinstance(p, str) for p in preds)
    assert 0.0 <= fitted.score(test) <= 1.0
    assert fitted.metrics_ and fitted.metrics_[-1]["phase"] == "finetune"
    assert fitted.model_.config.d_h == 32
    rep = fitted.evaluate(test)
    assert rep.region_attempts == 3 and rep.mode == "forced-region"


def test_fit_rejects_y():
    with pytest.raises(InvalidConfigError):
        VPTClassifier().fit(gen_records("locate-tiny-glyph", 2, 0), y=["a", "b"])
