import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridivf.core import UsageError
from hybridivf.filters import (
    MAX_DEPTH,
    And,
    AttributeCodebook,
    BinnedAttribute,
    CategoricalAttribute,
    FilterSyntaxError,
    FilterValidationError,
    IntegerAttribute,
    Not,
    Op,
    Or,
    Predicate,
    encode_attributes,
    eval_filter,
    eval_filter_block,
    parse_filter,
    quantile_edges,
    to_text,
    validate,
)

from naive_filter import evaluate, random_expr, render


def P(attr, op, *vals):
    return Predicate(attr, Op(op), tuple(vals))


# -- parsing ---------------------------------------------------------------------


def test_parse_conjunction():
    assert parse_filter("a0 >= 10 AND a1 = 5") == And(P(0, ">=", 10), P(1, "=", 5))


def test_parse_precedence_or_loosest():
    got = parse_filter("NOT a2 IN (1,2) OR a0 BETWEEN -3 AND 3")
    assert got == Or(Not(P(2, "IN", 1, 2)), P(0, "BETWEEN", -3, 3))


def test_parse_and_binds_tighter_than_or():
    assert parse_filter("a0=1 or a1=2 and a2=3") == Or(P(0, "=", 1), And(P(1, "=", 2), P(2, "=", 3)))
    assert parse_filter("(a0=1 or a1=2) and a2=3") == And(Or(P(0, "=", 1), P(1, "=", 2)), P(2, "=", 3))


def test_parse_case_insensitive_keywords():
    assert parse_filter("not a0 between 1 and 2") == Not(P(0, "BETWEEN", 1, 2))
    assert parse_filter("a1 In (4)") == P(1, "IN", 4)


@pytest.mark.parametrize("op", ["=", "!=", "<", "<=", ">", ">="])
def test_parse_each_operator(op):
    assert parse_filter(f"a3 {op} -7") == P(3, op, -7)


def test_parse_attribute_out_of_range():
    with pytest.raises(FilterValidationError):
        parse_filter("a7 = 1", 4)


@pytest.mark.parametrize(
    "text, offset",
    [
        ("a9 =", 4),
        ("a0 = 1 AND", 10),
        ("(a0 = 1", 7),
        ("a0 = 1)", 6),
        ("a0 ~ 1", 3),
        ("b0 = 1", 0),
        ("a0 BETWEEN 1 2", 13),
        ("a0 IN ()", 7),
        ("a0 = 1.5", 5),
    ],
)
def test_syntax_errors_report_offset(text, offset):
    with pytest.raises(FilterSyntaxError) as exc:
        parse_filter(text, 10)
    assert exc.value.offset == offset
    assert f"offset {offset}" in str(exc.value)


def test_empty_text_rejected():
    with pytest.raises(FilterSyntaxError):
        parse_filter("   ")


def test_between_requires_ordered_bounds():
    with pytest.raises(FilterValidationError):
        parse_filter("a0 BETWEEN 5 AND 1")


def test_depth_limit():
    ok = "NOT " * (MAX_DEPTH - 1) + "a0 = 1"
    assert parse_filter(ok) is not None
    with pytest.raises(FilterSyntaxError):
        parse_filter("NOT " * MAX_DEPTH + "a0 = 1")
    with pytest.raises(FilterSyntaxError):
        parse_filter("(" * (MAX_DEPTH + 1) + "a0 = 1" + ")" * (MAX_DEPTH + 1))


def test_long_chains_stay_shallow():
    text = " AND ".join(f"a{i % 4} != {i}" for i in range(500))
    f = parse_filter(text, 4)
    validate(f, 4)
    assert len(f.children) == 500


def test_validate_programmatic_tree():
    with pytest.raises(FilterValidationError):
        validate(And(P(0, "=", 1), P(5, "=", 1)), 4)
    validate(None, 4)


# -- evaluation ------------------------------------------------------------------


def test_eval_examples():
    assert eval_filter(parse_filter("a0 >= 0 AND a1 < 0"), [5, -3]) is True
    assert eval_filter(None, [1, 2, 3]) is True
    assert eval_filter(parse_filter("a1 IN (1, 2)"), [0, 3]) is False


def test_eval_block_empty_and_all_true():
    f = parse_filter("a0 >= 0")
    assert eval_filter_block(f, np.empty((0, 2), np.int64)).shape == (0,)
    block = np.array([[1, 2], [3, 4]])
    assert eval_filter_block(parse_filter("a0 > -100 OR a0 <= -100"), block).all()
    assert eval_filter_block(None, block).all()


def test_random_expressions_match_naive_interpreter():
    rnd = random.Random(42)
    rng = np.random.default_rng(42)
    for _ in range(300):
        node = random_expr(rnd, 4)
        text = render(node, rnd)
        f = parse_filter(text, 4)
        block = rng.integers(-7, 8, size=(40, 4))
        expected = np.array([evaluate(node, row) for row in block.tolist()])
        rowwise = np.array([eval_filter(f, row) for row in block])
        np.testing.assert_array_equal(rowwise, expected, err_msg=text)
        np.testing.assert_array_equal(eval_filter_block(f, block), expected, err_msg=text)


def test_int64_extremes():
    lo, hi = -(2**63), 2**63 - 1
    f = parse_filter(f"a0 BETWEEN {lo} AND {hi}")
    block = np.array([[lo], [0], [hi]], dtype=np.int64)
    assert eval_filter_block(f, block).all()
    assert eval_filter_block(parse_filter(f"a0 = {hi}"), block).tolist() == [False, False, True]
    with pytest.raises(FilterValidationError):
        parse_filter(f"a0 = {hi + 1}")


# -- properties --------------------------------------------------------------------

ints = st.integers(-50, 50)
preds = st.one_of(
    st.builds(lambda a, o, v: P(a, o, v), st.integers(0, 2), st.sampled_from(["=", "!=", "<", "<=", ">", ">="]), ints),
    st.builds(lambda a, x, y: P(a, "BETWEEN", min(x, y), max(x, y)), st.integers(0, 2), ints, ints),
    st.builds(lambda a, vs: P(a, "IN", *vs), st.integers(0, 2), st.lists(ints, min_size=1, max_size=4)),
)
exprs = st.recursive(
    preds,
    lambda kids: st.one_of(
        st.builds(Not, kids),
        st.lists(kids, min_size=2, max_size=3).map(lambda cs: And(*cs)),
        st.lists(kids, min_size=2, max_size=3).map(lambda cs: Or(*cs)),
    ),
    max_leaves=12,
)
rows = st.lists(ints, min_size=3, max_size=3)


@settings(max_examples=300, deadline=None)
@given(exprs)
def test_print_parse_round_trip(f):
    assert parse_filter(to_text(f), 3) == f


@settings(max_examples=300, deadline=None)
@given(exprs, exprs, rows)
def test_de_morgan(p, q, row):
    assert eval_filter(Not(And(p, q)), row) == eval_filter(Or(Not(p), Not(q)), row)
    assert eval_filter(Not(Or(p, q)), row) == eval_filter(And(Not(p), Not(q)), row)


@settings(max_examples=300, deadline=None)
@given(st.integers(-(2**62), 2**62), st.integers(-(2**62), 2**62), st.integers(-(2**62), 2**62))
def test_between_is_ge_and_le(a, b, v):
    lo, hi = min(a, b), max(a, b)
    between = P(0, "BETWEEN", lo, hi)
    pair = And(P(0, ">=", lo), P(0, "<=", hi))
    assert eval_filter(between, [v]) == eval_filter(pair, [v])
    block = np.array([[v]], dtype=np.int64)
    assert eval_filter_block(between, block)[0] == eval_filter_block(pair, block)[0]


@settings(max_examples=200, deadline=None)
@given(exprs, st.lists(rows, min_size=0, max_size=30))
def test_block_equals_rowwise(f, block_rows):
    block = np.array(block_rows, dtype=np.int64).reshape(len(block_rows), 3)
    expected = [eval_filter(f, r) for r in block_rows]
    assert eval_filter_block(f, block).tolist() == expected


# -- encoding ----------------------------------------------------------------------


def test_categorical_encoding():
    cat = CategoricalAttribute("color", {"red": 0, "blue": 1})
    cb = AttributeCodebook([cat])
    assert encode_attributes(["red"], cb).tolist() == [0]
    with pytest.raises(UsageError, match="color"):
        encode_attributes(["green"], cb)
    with pytest.raises(UsageError):
        CategoricalAttribute("bad", {"x": 0, "y": 2})


def test_binned_encoding_and_clamping():
    b = BinnedAttribute("size", (0.0, 10.0))
    assert b.encode(5.5) == 0
    assert b.encode(-3) == 0
    assert b.encode(99) == 0
    b = BinnedAttribute("size", (0.0, 1.0, 2.0, 4.0))
    assert [b.encode(v) for v in (-1, 0, 0.5, 1, 3.9, 4, 100)] == [0, 0, 0, 1, 2, 2, 2]
    with pytest.raises(UsageError):
        BinnedAttribute("x", (1.0, 1.0))
    with pytest.raises(UsageError):
        b.encode(float("nan"))


def test_quantile_binning_populations():
    rng = np.random.default_rng(0)
    sample = rng.uniform(0, 1, 1000)
    b = BinnedAttribute.from_quantiles("u", sample, 8)
    # Oracle: sort, then cut at every 125th sample.
    s = np.sort(sample)
    cut_points = s[::125][1:]
    oracle_counts = np.diff(np.concatenate([[0], np.searchsorted(s, cut_points), [len(s)]]))
    counts = np.bincount([b.encode(v) for v in sample], minlength=8)
    assert counts.shape == (8,)
    assert np.all(np.abs(counts - 125) <= 25)
    assert np.all(np.abs(oracle_counts - 125) <= 25)
    assert quantile_edges(sample, 8)[0] == sample.min()


def test_codebook_json_round_trip(tmp_path):
    cb = AttributeCodebook(
        [
            CategoricalAttribute.from_values("tag", ["cat", "dog", "cat", "bird"]),
            BinnedAttribute("width", (0.0, 64.0, 512.0)),
            IntegerAttribute("year"),
        ]
    )
    path = tmp_path / "codebook.json"
    cb.save(path)
    back = AttributeCodebook.load(path)
    assert back.to_json() == cb.to_json()
    assert back.encode(["dog", 100.0, 2024]).tolist() == [1, 1, 2024]
    with pytest.raises(UsageError):
        back.encode(["dog", 1.0])
