import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from corpus import CORPUS
from oracle import Oracle, same_result
from taskdb.backends.stub import StubModel
from taskdb.errors import ExecutionError, ShapeMismatch
from taskdb.executor import (Channel, EmbeddingCache, RowBatch, Table, WindowState, content_key, decode_output,
                             default_stages, execute, load_table, pipeline_run, save_table, window_accumulate,
                             window_cleanup, window_infer)
from taskdb.executor.eval import aggregate, arith, compare, compile_expr, sort_key
from taskdb.executor.operators import LocalHandle
from taskdb.planner import parse_query
from taskdb.tensor import Mvec

BATCHES = (1, 4, 8, 16, 32)


@pytest.fixture(scope="module")
def oracle(demo_engine):
    return Oracle(demo_engine)


@pytest.fixture(scope="module")
def expected(oracle):
    return {name: oracle.run(sql) for name, sql, _ in CORPUS}


# -- end to end against the oracle ------------------------------------------------------

@pytest.mark.parametrize("cache", [False, True])
@pytest.mark.parametrize("B", BATCHES)
@pytest.mark.parametrize("name,sql,ordered", CORPUS, ids=[c[0] for c in CORPUS])
def test_corpus_matches_oracle(demo_engine, expected, name, sql, ordered, B, cache):
    res = demo_engine.query(sql, batch_size=B, pipeline=False, cache=cache)
    assert same_result(res.rows.tuples(), expected[name], ordered)


@pytest.mark.parametrize("name,sql,ordered", CORPUS, ids=[c[0] for c in CORPUS])
def test_pipeline_matches_sequential(demo_engine, name, sql, ordered):
    for B in (1, 16):
        seq = demo_engine.query(sql, batch_size=B, pipeline=False)
        pip = demo_engine.query(sql, batch_size=B, pipeline=True)
        assert same_result(pip.rows.tuples(), seq.rows.tuples(), ordered)
        assert pip.rows.names == seq.rows.names


def predicates():
    num = st.sampled_from(["u.age", "u.id", "u.age - u.id", "u.age / (u.id - 5)", "r.rating"])
    cmp = st.builds(lambda c, op, k: f"{c} {op} {k}", num, st.sampled_from(["<", "<=", ">", ">=", "=", "!="]),
                    st.integers(-5, 60))
    text = st.builds(lambda c, v: f"{c} = '{v}'", st.sampled_from(["u.gender", "u.location"]),
                     st.sampled_from(["male", "female", "other", "Paris", "nowhere"]))
    model = st.builds(lambda v: f"sentiment_classifier(r.comment) = '{v}'", st.sampled_from(["POS", "NEG", "NEU"]))
    leaf = st.one_of(cmp, text, model, st.just("u.age = 'x'"), st.just("u.location < 3"))
    return st.recursive(leaf, lambda inner: st.one_of(
        st.builds(lambda a, b: f"({a} AND {b})", inner, inner),
        st.builds(lambda a, b: f"({a} OR {b})", inner, inner),
        st.builds(lambda a: f"NOT ({a})", inner)), max_leaves=4)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(predicates(), st.sampled_from(BATCHES), st.booleans())
def test_prop_random_predicates_match_oracle(demo_engine, oracle, pred, B, pipeline):
    sql = f"SELECT u.id, r.id, u.gender FROM user u, review r WHERE u.id = r.uid AND {pred}"
    got = demo_engine.query(sql, batch_size=B, pipeline=pipeline).rows.tuples()
    assert same_result(got, oracle.run(sql), False)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.sampled_from(["u.gender", "u.location", "u.age > 30"]),
       st.sampled_from(["COUNT(*)", "SUM(u.age)", "AVG(u.age)", "MIN(u.location)", "MAX(u.age * 2)",
                        "COUNT(DISTINCT u.location)", "AVG(sentiment_classifier(r.comment) = 'POS')"]),
       st.integers(0, 60))
def test_prop_random_groupings_match_oracle(demo_engine, oracle, key, agg, k):
    sql = (f"SELECT {key}, {agg} FROM user u, review r WHERE u.id = r.uid AND u.age >= {k} GROUP BY {key}")
    assert same_result(demo_engine.query(sql).rows.tuples(), oracle.run(sql), False)


# -- metrics ---------------------------------------------------------------------------

@pytest.mark.parametrize("B", BATCHES)
def test_predict_batch_count(demo_engine, B):
    res = demo_engine.query("SELECT sentiment_classifier(r.comment) FROM review r", batch_size=B, pipeline=False)
    pred = [n for n in res.metrics.nodes.values() if n.kind == "PREDICT"][0]
    assert pred.batches == math.ceil(100 / B) and res.metrics.input_rows == 100


def test_warm_cache_skips_extractor(fresh_engine):
    sql = "SELECT r.id, sentiment_classifier(r.comment) FROM review r"
    cold = fresh_engine.query(sql)
    warm = fresh_engine.query(sql)
    distinct = len(set(fresh_engine.tables["review"].columns["comment"]))
    assert cold.metrics.extractor_calls == distinct
    assert warm.metrics.extractor_calls == 0 and warm.metrics.cache_hits == 100
    assert warm.rows.tuples() == cold.rows.tuples()
    assert warm.metrics.makespan < cold.metrics.makespan
    nocache = fresh_engine.query(sql, cache=False)
    assert nocache.metrics.extractor_calls == 100 and sorted(nocache.rows.tuples()) == sorted(cold.rows.tuples())


def test_sequential_makespan_is_sum(demo_engine):
    m = demo_engine.query("SELECT imagerecognition(p.img) FROM product p", pipeline=False).metrics
    assert m.makespan == pytest.approx(m.total_seconds)
    p = demo_engine.query("SELECT imagerecognition(p.img) FROM product p", pipeline=True).metrics
    assert p.makespan <= p.total_seconds + 1e-12


# -- errors ------------------------------------------------------------------------------

def test_bad_tensor_names_predict_node(fresh_engine):
    imgs = [Mvec.from_array(np.zeros((3, 8, 8)))] * 3 + [Mvec.from_array(np.zeros(5))]
    fresh_engine.add_table(Table("bad", {"id": [1, 2, 3, 4], "img": imgs}), persist=False)
    g = fresh_engine.plan("SELECT imagerecognition(b.img) FROM bad b", batch_size=2)
    pid = g.predict_nodes()[0].node_id
    for pipeline in (False, True):
        with pytest.raises(ExecutionError) as ei:
            fresh_engine.run(g, pipeline=pipeline)
        assert ei.value.node_id == pid and isinstance(ei.value.cause, ShapeMismatch)
        assert "row 3" in str(ei.value)


def test_type_error_in_filter(fresh_engine):
    g = fresh_engine.plan("SELECT u.id FROM user u WHERE u.gender * 2 > 1")
    fid = next(n.node_id for n in g.nodes.values() if n.kind == "FILTER")
    with pytest.raises(ExecutionError) as ei:
        fresh_engine.run(g, pipeline=True)
    assert ei.value.node_id == fid and isinstance(ei.value.cause, TypeError)


def test_bad_schedule_rejected(demo_engine):
    g = demo_engine.plan("SELECT u.id FROM user u WHERE u.age > 3")
    from taskdb.errors import PlanError
    with pytest.raises(PlanError):
        execute(g, demo_engine.runtime(), sigma=list(reversed(list(g.nodes))))


# -- pipelining internals ------------------------------------------------------------

def test_channel_backpressure_in_simulated_time():
    import threading
    ch = Channel(1, threading.Event())
    assert ch.put("a", 0.0) == 0.0
    item, take = ch.get(5.0)                 # consumer is busy until t=5
    assert (item, take) == ("a", 5.0)
    assert ch.put("b", 1.0) == 5.0           # second put waits for the first take
    assert ch.stalls == 1 and ch.max_depth == 1
    with pytest.raises(ValueError):
        Channel(0, threading.Event())


def test_capacity_one_pipeline(demo_engine):
    sql = "SELECT r.id, sentiment_classifier(r.comment), imagerecognition(r.img) FROM review r"
    g = demo_engine.plan(sql, batch_size=4)
    rt = demo_engine.runtime()
    try:
        rows, m = pipeline_run(g, rt, capacity=1)
    finally:
        rt.close()
    seq = demo_engine.query(sql, batch_size=4, pipeline=False).rows
    assert sorted(rows.tuples()) == sorted(seq.tuples())
    assert len(m.stages) == len(default_stages(g)) >= 3


def test_default_stages_split_predicts(demo_engine):
    g = demo_engine.plan("SELECT sentiment_classifier(r.comment) FROM review r WHERE r.rating > 2")
    stages = default_stages(g)
    kinds = [[g.nodes[v].kind for v in s] for s in stages]
    assert ["PREDICT"] in kinds
    assert sorted(v for s in stages for v in s) == sorted(g.nodes)


# -- expression semantics ---------------------------------------------------------------

def ev(text, row=None):
    q = parse_query(f"SELECT {text} FROM t")
    from taskdb.planner.dsl import Column, Ref

    def resolve(e):
        if isinstance(e, Column):
            return Ref(e.name)
        if hasattr(e, "__dataclass_fields__"):
            kw = {}
            for f in e.__dataclass_fields__:
                v = getattr(e, f)
                kw[f] = tuple(resolve(x) for x in v) if isinstance(v, tuple) else resolve(v)
            return type(e)(**kw)
        return e
    return compile_expr(resolve(q.items[0].expr))(row or {})


@pytest.mark.parametrize("a", [True, False, None])
@pytest.mark.parametrize("b", [True, False, None])
def test_three_valued_logic(a, b):
    lit = {True: "TRUE", False: "FALSE", None: "NULL"}
    t = {True: 1, None: 0.5, False: 0}
    rev = {1: True, 0.5: None, 0: False}
    assert ev(f"{lit[a]} AND {lit[b]}") == rev[min(t[a], t[b])]
    assert ev(f"{lit[a]} OR {lit[b]}") == rev[max(t[a], t[b])]
    assert ev(f"NOT {lit[a]}") == rev[1 - t[a]]


def test_cross_kind_comparisons():
    assert compare("=", 1, "1") is False and compare("!=", 1, "1") is True
    assert compare("<", 1, "1") is None and compare("<", None, 1) is None
    assert compare("=", 1, 1.0) is True
    m = Mvec((1,), [1.0])
    assert compare("<", m, m) is None


def test_arithmetic():
    assert arith("/", 1, 0) is None and arith("%", 5, 0) is None
    assert ev("7 / 2") == 3.5 and ev("7 % 4") == 3 and ev("-x", {"x": None}) is None
    assert ev("'a' + 'b'") == "ab"
    with pytest.raises(TypeError):
        arith("*", "a", 2)
    assert ev("ROUND(2.345, 2)") == 2.35 and ev("LENGTH('abc')") == 3 and ev("ABS(NULL)") is None


def test_aggregates_edge_cases():
    q = parse_query("SELECT SUM(x), AVG(x), COUNT(x), COUNT(*), MIN(x), MAX(x) FROM t").items
    rows = [{"x": v} for v in (1, None, True, 2)]
    from taskdb.planner.dsl import Ref
    vals = [aggregate(i.expr, rows, (lambda r: r["x"])) for i in q]
    assert vals == [4, 4 / 3, 3, 4, 1, 2]
    assert isinstance(vals[0], int)
    empty = [aggregate(i.expr, [], lambda r: r["x"]) for i in q]
    assert empty == [None, None, 0, 0, None, None]
    assert sorted([Mvec((1,), [0.0]), "a", 2, None], key=sort_key)[0] is None
    assert [type(v) for v in sorted([Mvec((1,), [0.0]), "a", 2], key=sort_key)] == [int, str, Mvec]
    assert Ref  # imported for parity with the executor's resolved form


def test_decode_output():
    y = Mvec((4,), [0.1, 0.9, 0.3, 5.0])
    assert decode_output(y, "Classification", ("a", "b", "c")) == "b"   # extra outputs are ignored
    assert decode_output(y, "Regression", None) == 0.1
    assert decode_output(y, None, None) is y
    assert decode_output(None, "Regression", None) is None


# -- windows -------------------------------------------------------------------------------

def test_window_three_phases():
    model = LocalHandle(StubModel.identity(2))
    st_ = WindowState(3)
    released = []
    for i in range(7):
        row = {"i": i}
        if window_accumulate(st_, row, Mvec((2,), [i, -i])) is not None:
            window_infer(st_, model, None)
            released += window_cleanup(st_)
    window_infer(st_, model, None)
    released += window_cleanup(st_)
    assert [r["i"] for r, _ in released] == list(range(7))
    assert [y.data[1] for _, y in released] == [-i for i in range(7)]
    assert st_.batches == 3 and st_.emitted == 7 and st_.last_stacked_shape == (1, 2)


def test_window_null_rows_skip_model():
    model = LocalHandle(StubModel.identity(1))
    st_ = WindowState(3)
    for v in (Mvec((1,), [1.0]), None, Mvec((1,), [3.0])):
        window_accumulate(st_, {}, v)
    window_infer(st_, model, None, convert=lambda vals: vals)
    out = window_cleanup(st_)
    assert out[1][1] is None and out[2][1].data[0] == 3.0 and st_.last_stacked_shape == (2, 1)


def test_window_state_rejects_zero():
    with pytest.raises(ValueError):
        WindowState(0)


# -- cache and tables ---------------------------------------------------------------------

def test_cache_lru():
    c = EmbeddingCache(2)
    a, b, d = (content_key("x", s) for s in ("a", "b", "d"))
    c.put(a, Mvec((1,), [1.0]))
    c.put(b, Mvec((1,), [2.0]))
    assert c.get(a) is not None      # refresh a
    c.put(d, Mvec((1,), [3.0]))      # evicts b
    assert c.get(b) is None and len(c) == 2
    assert c.hits == 1 and c.misses == 1 and c.hit_rate == 0.5
    assert content_key("x", "a") == content_key("x", b"a") != content_key("y", "a")
    with pytest.raises(ValueError):
        EmbeddingCache(0)


def test_table_round_trip(tmp_path):
    t = Table("mix", {"id": [1, 2], "name": ["a,b", ""], "x": [1.5, None],
                      "m": [Mvec((2, 1), [1.0, 2.0]), Mvec((2, 1), [3.0, 4.0])]})
    back = load_table(save_table(t, tmp_path))
    assert back.columns["id"] == [1, 2] and back.columns["x"][0] == 1.5
    assert back.columns["m"][1] == t.columns["m"][1]
    with pytest.raises(ShapeMismatch):
        RowBatch({"a": [1], "b": []})


def test_null_model_input_gives_null(fresh_engine):
    fresh_engine.add_table(Table("n", {"id": [1, 2, 3], "c": ["good", None, "bad"]}), persist=False)
    sql = "SELECT n.id, sentiment_classifier(n.c) FROM n n"
    for pipeline in (False, True):
        rows = dict(fresh_engine.query(sql, batch_size=2, pipeline=pipeline).rows.tuples())
        assert rows[2] is None and rows[1] in ("POS", "NEG", "NEU")
    assert fresh_engine.query(sql).metrics.extractor_calls == 0   # both texts cached on the first run
