import pytest

from backtrack_audit.language import ModelSyntaxError, dump, fingerprint, parse
from backtrack_audit.scenarios import BALANCED, EXAMPLE1, UNBALANCED
from backtrack_audit.scm_core import Normal, Or, Threshold, build_model


def test_parse_forms():
    decls = parse(
        """
        # comment line
        exo U_A ~ bernoulli(0.5)
        exo U_Z ~ normal(A/2, 1)   # mean over a parent
        exo U_P ~ point(0)
        exo U_T ~ uniform(0, 1)
        endo A = linear(0) + U_A
        endo Q = gt(2*A - 1, 0.5)
        endo Yhat = or(A, gt(Q, 0)) + U_P
        """
    )
    assert len(decls) == 7
    assert isinstance(decls[1], Normal) and decls[1].mean.terms == (("A", 0.5),)
    assert isinstance(decls[5], Threshold) and decls[5].index.terms == (("A", 2.0),) and decls[5].index.intercept == -1.0
    assert isinstance(decls[6], Or) and decls[6].exo == "U_P"


def test_syntax_error_position():
    with pytest.raises(ModelSyntaxError) as info:
        parse("exo U ~ normal(0, 1)\nendo X = linaer(0) + U")
    assert info.value.line == 2
    assert info.value.column == 10
    with pytest.raises(ModelSyntaxError) as info:
        parse("exo U ~ normal(0, 1) $")
    assert info.value.column == 22
    with pytest.raises(ModelSyntaxError, match="line 1"):
        parse("endo X = linear(0)")


def test_negative_sd_reported_with_line():
    with pytest.raises(ModelSyntaxError, match="line 2"):
        parse("exo U ~ normal(0, 1)\nexo W ~ normal(0, -1)")


@pytest.mark.parametrize("text", [EXAMPLE1, BALANCED, UNBALANCED])
def test_dump_round_trip(text):
    model = build_model(text)
    again = build_model(dump(model))
    assert dump(again) == dump(model)
    assert again.mechanisms == model.mechanisms
    assert again.noise == model.noise
    assert fingerprint(again) == fingerprint(model)


def test_infinite_cutoff_round_trip():
    m = build_model("exo U ~ normal(0, 1)\nendo X = linear(0) + U\nendo Y = gt(X, -inf)")
    assert "gt(X, -inf)" in dump(m)
    assert build_model(dump(m)).mechanisms["Y"].cutoff == float("-inf")
