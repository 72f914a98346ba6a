import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from taskdb.backends.cost import CPU_DEFAULT, GPU_DEFAULT, DeviceKind, ModelProfile, choose_device, total_cost
from taskdb.backends.zoo import PROFILES
from taskdb.errors import (CycleDetected, DuplicateTask, MissingProfile, NoFeasibleBatch, PlanError,
                           QuerySyntaxError, SelectionUnavailable, UnknownColumn, UnknownTable, UnknownTask)
from taskdb.planner import (CONTROL, DATA, OperatorNode, PlanContext, PlanDag, TaskRegistry, TaskSpec,
                            batch_objective, build_dag, choose_batch_size, discover_dependencies,
                            estimate_cardinalities, explain_plan, parse_query, place_operators, register_task)
from taskdb.planner import dsl
from taskdb.planner.dag import Edge
from taskdb.planner.placement import DEFAULT_CANDIDATES

THREE_TABLE_QUERY = ("SELECT U.gender, U.location, AVG(sentiment_classifier(R.comment) = 'POS') "
          "FROM user AS U, product AS P, review AS R "
          "WHERE U.id = R.uid AND P.id = R.pid AND imagerecognition(P.img) = 'iPhone 16' "
          "AND imagerecognition(R.img) = 'iPhone 16' GROUP BY U.gender, U.location")


@pytest.fixture
def ctx():
    reg = TaskRegistry()
    reg.add(register_task(TaskRegistry(), TaskSpec("sentiment_classifier", "Text", ("POS", "NEG", "NEU")),
                          model_id=1))
    reg.add(register_task(TaskRegistry(), TaskSpec("imagerecognition", "Image", ("iPhone 16", "Other")),
                          model_id=2))
    reg.add(register_task(TaskRegistry(), TaskSpec("forecast", "Series", None, "Regression"), model_id=3))
    return PlanContext(
        schemas={"user": ["id", "gender", "location", "age"], "product": ["id", "name", "img", "price"],
                 "review": ["id", "uid", "pid", "comment", "img", "rating"], "t": ["img", "x"],
                 "series": ["id", "sensor", "window"]},
        tasks=reg, models={"rawnet": 4},
        row_counts={"user": 20, "product": 10, "review": 100, "t": 10_000, "series": 10_000})


def kinds(g):
    out = {}
    for n in g.nodes.values():
        out[n.kind] = out.get(n.kind, 0) + 1
    return out


def dag(sql, ctx):
    return build_dag(parse_query(sql, ctx))


# -- parsing -----------------------------------------------------------------------

def test_simple_predict_shape(ctx):
    g = dag("SELECT sentiment_classifier(comment) FROM review", ctx)
    assert kinds(g) == {"SCAN": 1, "PREDICT": 1, "OUTPUT": 1}
    assert [g.nodes[v].kind for v in discover_dependencies(g).order] == ["SCAN", "PREDICT", "OUTPUT"]


def test_filter_wraps_predict(ctx):
    g = dag('SELECT * FROM t WHERE ImageRecognition(img)="iPhone 16"', ctx)
    assert kinds(g) == {"SCAN": 1, "PREDICT": 1, "FILTER": 1, "OUTPUT": 1}
    pred = g.predict_nodes()[0]
    filt = next(n for n in g.nodes.values() if n.kind == "FILTER")
    assert filt.inputs == [pred.node_id]
    assert pred.params["out"] in dsl.render(filt.params["predicate"])


@pytest.mark.parametrize("text,line,col", [("SELEC x", 1, 1), ("SELECT a FROM", 1, 14),
                                           ("SELECT a FROM t\n WHERE b = = 1", 2, 12),
                                           ("SELECT a FROM t WHERE #", 1, 23)])
def test_syntax_error_positions(text, line, col):
    with pytest.raises(QuerySyntaxError) as ei:
        parse_query(text)
    assert (ei.value.line, ei.value.column) == (line, col)


def test_unknown_names(ctx):
    with pytest.raises(UnknownTable):
        parse_query("SELECT a FROM nowhere", ctx)
    with pytest.raises(UnknownTask):
        parse_query("SELECT ghost(x) FROM t", ctx)
    with pytest.raises(UnknownColumn):
        parse_query("SELECT nope FROM t", ctx)


def test_ambiguous_column(ctx):
    with pytest.raises(PlanError):
        parse_query("SELECT id FROM user, review", ctx)


def test_ddl_and_model_select():
    stmt = parse_query("CREATE TASK sentiment_classifier (INPUT=Text_Blob, OUTPUT in 'POS, NEG, NEU', "
                       "Type ='Classification')")
    assert stmt == dsl.CreateTask("sentiment_classifier", "Text", ("POS", "NEG", "NEU"), "Classification", None)
    assert parse_query("SELECT MODEL FOR TASK s") == dsl.SelectModel("s")
    reg = parse_query("CREATE TASK f (INPUT=Series, TYPE=Regression)")
    assert reg.output_labels is None and reg.task_type == "Regression"
    with pytest.raises(QuerySyntaxError):
        parse_query("CREATE TASK c (INPUT=Text)")


def test_render_round_trip():
    sql = "SELECT a + 1 * b, NOT (c < 2 OR d = 'x') FROM t WHERE -e >= 3"
    sel = parse_query(sql)
    again = parse_query("SELECT " + ", ".join(dsl.render(i.expr) for i in sel.items) + " FROM t WHERE "
                        + dsl.render(sel.where))
    assert again.items == sel.items and again.where == sel.where


# -- DAG construction -------------------------------------------------------------------

def test_chain_three_nodes(ctx):
    g = dag("SELECT x FROM t WHERE x > 1", ctx)
    assert len(g.nodes) == 3 and len(g.edges) == 2


def test_three_table_operator_set(ctx):
    g = dag(THREE_TABLE_QUERY, ctx)
    k = kinds(g)
    # three tables: one scan each and two joins; the two image predicates are pushed to their scans
    assert k["SCAN"] == 3 and k["JOIN"] == 2 and k["PREDICT"] == 3 and k["GROUPBY"] == 1 and k["OUTPUT"] == 1
    preds = g.predict_nodes()
    filters_fed = [n for n in g.nodes.values() if n.kind == "FILTER" and
                   any(g.nodes[i].kind == "PREDICT" for i in n.inputs)]
    assert len(filters_fed) == 2
    assert {p.params["task"] for p in preds} == {"imagerecognition", "sentiment_classifier"}


def test_two_table_variant_matches_hand_trace(ctx):
    sql = ("SELECT AVG(sentiment_classifier(R.comment) = 'POS') FROM product AS P, review AS R "
           "WHERE P.id = R.pid AND imagerecognition(P.img) = 'iPhone 16' "
           "AND imagerecognition(R.img) = 'iPhone 16'")
    k = kinds(dag(sql, ctx))
    assert k == {"SCAN": 2, "PREDICT": 3, "FILTER": 2, "JOIN": 1, "AGGREGATE": 1, "OUTPUT": 1}


def test_relational_only(ctx):
    g = dag("SELECT gender, COUNT(*) FROM user GROUP BY gender", ctx)
    assert not g.predict_nodes()
    g.validate()


def test_same_task_call_hoisted_once(ctx):
    g = dag("SELECT sentiment_classifier(comment), COUNT(*) FROM review GROUP BY sentiment_classifier(comment)",
            ctx)
    assert len(g.predict_nodes()) == 1


def test_plan_text_round_trip(ctx):
    g = dag(THREE_TABLE_QUERY, ctx)
    place_operators(g, [CPU_DEFAULT, GPU_DEFAULT], {1: PROFILES["text_light"], 2: PROFILES["image"]},
                    estimate_cardinalities(g, ctx.row_counts))
    back = PlanDag.from_text(g.to_text())
    assert back.to_text() == g.to_text()
    assert explain_plan(back).splitlines()[:2] == explain_plan(g).splitlines()[:2]


def test_group_rules(ctx):
    with pytest.raises(PlanError):
        dag("SELECT gender, age FROM user GROUP BY gender", ctx)
    with pytest.raises(PlanError):
        dag("SELECT gender FROM user WHERE COUNT(*) > 1", ctx)


# -- dependencies and ordering ---------------------------------------------------------

def manual(n_nodes, edges, inputs=None):
    g = PlanDag()
    inputs = inputs or {}
    for v in range(1, n_nodes + 1):
        g.nodes[v] = OperatorNode(v, "PROJECT", {}, inputs.get(v, []))
    g.edges = [Edge(u, v) for u, v in edges]
    return g


def test_diamond():
    g = manual(4, [(1, 2), (1, 3), (2, 4), (3, 4)])
    s = discover_dependencies(g)
    assert s.order[0] == 1 and s.order[-1] == 4 and s.order == [1, 2, 3, 4]
    assert s.deps[4] == [2, 3]


def test_two_cycle():
    with pytest.raises(CycleDetected) as ei:
        discover_dependencies(manual(2, [(1, 2), (2, 1)]))
    assert set(ei.value.cycle) == {1, 2}


def test_data_vs_control_labels():
    # 1 PREDICT feeds 2 FILTER (tuples); 2 gates 3 PREDICT without passing tuples; 4 reads 3
    g = manual(4, [(1, 2), (2, 3), (3, 4)], inputs={2: [1], 4: [3]})
    labels = discover_dependencies(g).labels
    assert labels[(1, 2)] == DATA and labels[(2, 3)] == CONTROL and labels[(3, 4)] == DATA


def test_add_edge_infers_label(ctx):
    g = dag("SELECT x FROM t WHERE x > 1", ctx)
    scan = next(n for n in g.nodes.values() if n.kind == "SCAN")
    g.add_edge(scan.node_id, g.output.node_id)      # the output reads the filter, not the scan
    assert g.edges[-1].label == CONTROL


def random_dag(rng, n):
    perm = list(range(1, n + 1))
    rng.shuffle(perm)          # a hidden topological order, unrelated to node ids
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.15:
                edges.add((perm[i], perm[j]))
    return perm, sorted(edges)


def has_cycle(n, edges):
    """Independent check: some node reaches itself."""
    adj = {v: [b for a, b in edges if a == v] for v in range(1, n + 1)}
    for s in adj:
        seen, stack = set(), list(adj[s])
        while stack:
            v = stack.pop()
            if v == s:
                return True
            if v not in seen:
                seen.add(v)
                stack.extend(adj[v])
    return False


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 50))
def test_prop_sigma_respects_edges(seed, n):
    _, edges = random_dag(random.Random(seed), n)
    s = discover_dependencies(manual(n, edges))
    pos = s.position()
    assert sorted(s.order) == list(range(1, n + 1))
    assert all(pos[u] < pos[v] for u, v in edges)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9), st.integers(2, 30), st.data())
def test_prop_cycle_detection_matches_reachability(seed, n, data):
    rng = random.Random(seed)
    perm, edges = random_dag(rng, n)
    if data.draw(st.booleans()):
        i, j = sorted(rng.sample(range(n), 2))
        edges = edges + [(perm[j], perm[i])]     # back edge against the hidden order
    cyclic = has_cycle(n, edges)
    if cyclic:
        with pytest.raises(CycleDetected) as ei:
            discover_dependencies(manual(n, edges))
        cyc = ei.value.cycle
        assert cyc[0] == cyc[-1] and all((a, b) in edges for a, b in zip(cyc, cyc[1:]))
    else:
        discover_dependencies(manual(n, edges))


def test_sigma_canonical(ctx):
    a, b = dag(THREE_TABLE_QUERY, ctx), dag(THREE_TABLE_QUERY, ctx)
    assert discover_dependencies(a).order == discover_dependencies(b).order
    assert explain_plan(a) == explain_plan(b)


# -- placement -------------------------------------------------------------------------

def placed(sql, ctx, profiles):
    g = dag(sql, ctx)
    return place_operators(g, [CPU_DEFAULT, GPU_DEFAULT], profiles, estimate_cardinalities(g, ctx.row_counts))


def test_series_on_cpu_image_on_gpu(ctx):
    g = placed("SELECT forecast(window) FROM series", ctx, {3: PROFILES["series"]})
    assert g.predict_nodes()[0].assigned_device.kind is DeviceKind.CPU
    g = placed("SELECT imagerecognition(img) FROM t", ctx, {2: PROFILES["image"]})
    assert g.predict_nodes()[0].assigned_device.kind is DeviceKind.GPU


def test_mixed_plan_is_heterogeneous(ctx):
    sql = ("SELECT imagerecognition(R.img), sentiment_classifier(R.comment) FROM review R")
    g = placed(sql, ctx, {1: PROFILES["text_light"], 2: PROFILES["image"]})
    dev = {n.params["task"]: n.assigned_device.kind for n in g.predict_nodes()}
    assert dev == {"imagerecognition": DeviceKind.GPU, "sentiment_classifier": DeviceKind.CPU}
    assert all(n.assigned_device.kind is DeviceKind.CPU for n in g.nodes.values() if n.kind != "PREDICT")


def test_missing_profile(ctx):
    with pytest.raises(MissingProfile):
        placed("SELECT forecast(window) FROM series", ctx, {})


def test_cardinalities(ctx):
    g = dag("SELECT x FROM t WHERE x > 1", ctx)
    est = estimate_cardinalities(g, ctx.row_counts)
    scan, filt, out = sorted(est)
    assert (est[scan], est[filt], est[out]) == (10_000, 5_000, 5_000)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e10), st.floats(0, 1e9), st.integers(1, 10**6))
def test_prop_placement_is_argmin(flops, size, rows):
    ctx = PlanContext(schemas={"t": ["x"]}, tasks=None, models={"m": 1}, row_counts={"t": rows})
    prof = ModelProfile(flops, size)
    g = build_dag(parse_query("SELECT m(x) FROM t", ctx))
    devs = [CPU_DEFAULT, GPU_DEFAULT]
    place_operators(g, devs, {1: prof}, estimate_cardinalities(g, ctx.row_counts))
    d = g.predict_nodes()[0].assigned_device
    assert total_cost(prof, d, rows).total == min(total_cost(prof, x, rows).total for x in devs)
    assert d == choose_device(prof, devs, rows)


# -- batch size --------------------------------------------------------------------------

def test_image_batch_in_expected_range():
    B = choose_batch_size(PROFILES["image"], GPU_DEFAULT, 10_000)
    assert 8 <= B <= 32


def test_no_feasible_batch():
    with pytest.raises(NoFeasibleBatch):
        choose_batch_size(ModelProfile(1, 1, row_bytes=100), CPU_DEFAULT, 10, mem_budget=50)


def test_zero_setup_prefers_smallest_batch():
    prof = ModelProfile(1e6, 0.0, row_bytes=1e3)     # CPU transfer cost is zero
    assert choose_batch_size(prof, CPU_DEFAULT, 1000) == 1


def test_objective_closed_form():
    prof, d = PROFILES["image"], GPU_DEFAULT
    B, n = 16, 100
    setup = prof.model_size / d.mem_bw + prof.model_size / d.gpu_bw + d.latency
    per_row = prof.model_flops / d.flops * max(1.0, B * prof.row_bytes / d.cache_bytes)
    assert batch_objective(prof, d, n, B) == pytest.approx(math.ceil(n / B) * (setup + B * per_row))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e10), st.floats(0, 1e9), st.floats(0, 1e7), st.integers(1, 10**5), st.floats(1e3, 1e10),
       st.sampled_from([CPU_DEFAULT, GPU_DEFAULT]))
def test_prop_batch_choice_feasible_and_optimal(flops, size, row_bytes, rows, budget, d):
    prof = ModelProfile(flops, size, row_bytes)
    try:
        B = choose_batch_size(prof, d, rows, budget)
    except NoFeasibleBatch:
        assert row_bytes > budget
        return
    assert B * row_bytes <= budget
    best = batch_objective(prof, d, rows, B)
    for c in DEFAULT_CANDIDATES:
        if c * row_bytes <= budget:
            assert best <= batch_objective(prof, d, rows, c)
            if batch_objective(prof, d, rows, c) == best:
                assert B <= c


# -- explain -----------------------------------------------------------------------------

def test_explain_lists_each_node_once_in_order(ctx):
    g = placed(THREE_TABLE_QUERY, ctx, {1: PROFILES["text_light"], 2: PROFILES["image"]})
    text = explain_plan(g)
    order = discover_dependencies(g).order
    heads = [int(line.split("]")[0].split("[")[1]) for line in text.splitlines() if line.startswith("  [")]
    assert heads == order
    assert "cost: exec=" in text and "trans=" in text


def test_explain_unplaced(ctx):
    text = explain_plan(dag("SELECT x FROM t WHERE x > 1", ctx))
    assert text.count("device=unassigned") == 3 and "cost:" not in text


# -- tasks ---------------------------------------------------------------------------

class FakeSelector:
    def select(self, features):
        return 7 if features[0] > 0 else 8


def test_register_task_binds_selector_choice(tmp_path):
    reg = TaskRegistry(tmp_path / "tasks.jsonl")
    e = register_task(reg, TaskSpec("s", "Text", ("A", "B")), FakeSelector(), [1.0, 2.0])
    assert e.model_id == 7
    with pytest.raises(DuplicateTask):
        register_task(reg, TaskSpec("S", "Text", ("A",)), FakeSelector(), [1.0])
    with pytest.raises(SelectionUnavailable):
        register_task(reg, TaskSpec("t", "Text", ("A",)), None, [1.0])
    again = TaskRegistry(tmp_path / "tasks.jsonl")
    assert again.get("s").model_id == 7 and again.get("s").features == (1.0, 2.0)


def test_rebind_persists(tmp_path):
    from taskdb.planner import reselect
    reg = TaskRegistry(tmp_path / "tasks.jsonl")
    register_task(reg, TaskSpec("s", "Text", ("A",)), model_id=3, features=[-1.0])
    assert reselect(reg, "s", FakeSelector()) == 8 and reg.get("s").model_id == 3
    reselect(reg, "s", FakeSelector(), rebind=True)
    assert TaskRegistry(tmp_path / "tasks.jsonl").get("s").model_id == 8


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("c", "Text", None, "Classification")
    with pytest.raises(ValueError):
        TaskSpec("c", "Audio", ("a",))
