import csv
import random
import xml.etree.ElementTree as ET

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fixture_unit
from secprompt.corpus import CorpusSpec, generate_programs, version_study
from secprompt.evaluation import (
    EXACT_LIMIT, CostSummary, FuzzSpec, GedCosts, LabeledGraph, SizeLimitExceeded, bar_chart_svg,
    cost_summary, emit_report, fuzz_compare, ged, ged_approx, ged_exact, inter_intra_study, similarity,
)
from secprompt.frontend import GraphKind, SourceUnit
from secprompt.frontend.graphs import build_graph, featurize
from secprompt.ggan import GganModel, _adjacency
from secprompt.loop import run_promsec
from secprompt.templates import CodeContext


def random_graph(rng, n):
    labels = [rng.choice("abc") for _ in range(n)]
    edges = [(u, v, rng.choice("xy")) for u in range(n) for v in range(n) if u != v and rng.random() < 0.3]
    return labels, edges


def nx_ged(g):
    labels, edges = g
    d = nx.DiGraph()
    d.add_nodes_from((i, {"label": x}) for i, x in enumerate(labels))
    d.add_edges_from((u, v, {"kind": k}) for u, v, k in edges)
    return d


def nx_distance(a, b):
    return nx.graph_edit_distance(nx_ged(a), nx_ged(b), node_match=lambda x, y: x["label"] == y["label"],
                                  edge_match=lambda x, y: x["kind"] == y["kind"])


graphs = st.integers(0, 10_000).flatmap(
    lambda seed: st.integers(1, 5).map(lambda n: random_graph(random.Random(seed), n)))


# -- graph edit distance -----------------------------------------------------------------

def test_exact_matches_networkx_on_small_graphs():
    rng = random.Random(3)
    for _ in range(60):
        a, b = random_graph(rng, rng.randint(1, 5)), random_graph(rng, rng.randint(1, 5))
        assert ged_exact(a, b).distance == pytest.approx(nx_distance(a, b), abs=1e-9)


def test_approx_is_an_upper_bound():
    rng = random.Random(4)
    for _ in range(60):
        a, b = random_graph(rng, rng.randint(1, 8)), random_graph(rng, rng.randint(1, 8))
        r = ged_approx(a, b)
        assert not r.exact and r.distance >= ged_exact(a, b).distance - 1e-9


@settings(max_examples=40, deadline=None)
@given(graphs, graphs, graphs)
def test_exact_ged_is_a_metric(a, b, c):
    ab, ba = ged_exact(a, b).distance, ged_exact(b, a).distance
    assert ged_exact(a, a).distance == 0
    assert ab == ba
    assert ab <= ged_exact(a, c).distance + ged_exact(c, b).distance + 1e-9


def test_single_relabel_costs_one():
    a = (["x", "y", "z"], [(0, 1, "e"), (1, 2, "e")])
    b = (["x", "w", "z"], [(0, 1, "e"), (1, 2, "e")])
    r = ged_exact(a, b)
    assert r.exact and r.distance == 1 and (r.node_ops, r.edge_ops) == (1, 0)


def test_empty_and_edge_only_cases():
    assert ged_exact(([], []), (["a", "b"], [(0, 1)])).distance == 3
    assert ged_exact((["a", "b"], [(0, 1, "x")]), (["a", "b"], [(0, 1, "y")])).distance == 1
    assert ged_exact((["a", "b"], [(0, 1)]), (["a", "b"], [(1, 0)])).distance == 2


def test_costs_are_configurable():
    a, b = (["a"], []), (["b"], [])
    assert ged_exact(a, b, GedCosts(node_relabel=5.0)).distance == 2.0  # delete + insert beats relabel
    assert ged_exact(a, b, GedCosts(node_relabel=1.5)).distance == 1.5


def test_exact_refuses_large_graphs():
    big = ([str(i) for i in range(EXACT_LIMIT + 1)], [])
    with pytest.raises(SizeLimitExceeded):
        ged_exact(big, big)
    assert not ged(big, big).exact and ged(big, big).distance == 0


def test_ged_on_program_graphs(vocab):
    g = build_graph(CodeContext(fixture_unit("fig15.src")).tree, vocab, GraphKind.CFG)
    h = g.copy()
    h.nodes[1].label = h.nodes[2].label if h.nodes[2].label != h.nodes[1].label else h.nodes[3].label
    assert ged(g, g).distance == 0 and ged(g, h).distance == 1
    assert LabeledGraph.of(g).labels == [n.label for n in g.nodes]


# -- similarity --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def encoder():
    return GganModel(seed=0)


def f3_graph(vocab):
    return build_graph(CodeContext(fixture_unit("f3.src")).tree, vocab, GraphKind.AST)


def test_similarity_identity(encoder, vocab):
    g = f3_graph(vocab)
    assert similarity(g, g, encoder) == pytest.approx(1.0, abs=1e-12)


def test_similarity_permutation_invariant(encoder, vocab):
    g = f3_graph(vocab)
    X, A = featurize(g, vocab), _adjacency(g.neighbor_lists())
    p = np.random.default_rng(0).permutation(len(g.nodes))
    e1 = encoder.embed_hard(X, A).value
    e2 = encoder.embed_hard(X[p], A[np.ix_(p, p)]).value
    assert np.allclose(e1, e2, atol=1e-12)


def test_similarity_drops_under_label_noise(encoder, vocab):
    g = f3_graph(vocab)
    h = g.copy()
    rng = random.Random(0)
    labels = [n.label for n in g.nodes]
    for n in rng.sample(h.nodes, len(h.nodes) // 2):
        n.label = rng.choice([x for x in labels if x != n.label])
    assert similarity(g, h, encoder) < 1.0 - 1e-6


def test_similarity_needs_one_vocabulary(encoder, vocab):
    g = f3_graph(vocab)
    h = g.copy()
    h.vocab_id = "other"
    with pytest.raises(ValueError):
        similarity(g, h, encoder)


# -- inter/intra version study -------------------------------------------------------------

F3 = fixture_unit("f3.src")


def test_study_identical_versions():
    assert inter_intra_study(F3, [F3, F3]) == (0.0, 0.0)


def test_study_one_relabel_from_original():
    v = SourceUnit(F3.text.replace("os.system(", "os.popen("))
    assert v.text != F3.text
    inter, intra = inter_intra_study(F3, [v, v], GraphKind.AST)
    assert (inter, intra) == (1.0, 0.0)


def test_study_needs_two_versions():
    with pytest.raises(ValueError):
        inter_intra_study(F3, [F3])


def test_version_study_on_corpus():
    study = version_study(generate_programs(CorpusSpec(count=60)))
    assert len(study) == 10
    inter, intra = np.mean([inter_intra_study(o, vs) for o, vs in study], axis=0)
    # alternates differ only at fix sites here, so versions sit closer to each
    # other than to the original
    assert inter > intra > 0


# -- fuzzing -------------------------------------------------------------------------------

BASE = "def f(a, b):\n    return a * 2 + b\n"
SPEC = {"entrypoint": "f", "params": [{"kind": "int", "low": -50, "high": 50}] * 2}


def test_fuzz_defaults():
    s = FuzzSpec(**SPEC)
    assert (s.trials, s.threshold) == (1000, 0.01)


def test_fuzz_identical_program_has_zero_diff():
    r = fuzz_compare(SourceUnit(BASE), SourceUnit(BASE), FuzzSpec(**SPEC))
    assert r.mean_abs_diff == 0.0 and r.passed and r.trials == 1000 and not r.failures


def test_fuzz_small_offset_passes():
    r = fuzz_compare(SourceUnit(BASE), SourceUnit(BASE.replace("+ b", "+ b + 0.005")), FuzzSpec(**SPEC, trials=100))
    assert r.mean_abs_diff == pytest.approx(0.005) and r.passed


def test_fuzz_sign_swap_fails():
    r = fuzz_compare(SourceUnit(BASE), SourceUnit(BASE.replace("return", "return -")), FuzzSpec(**SPEC, trials=100))
    assert not r.passed and r.failures


def test_fuzz_is_deterministic():
    other = SourceUnit(BASE.replace("a * 2", "a * 3"))
    spec = FuzzSpec(**SPEC, trials=50, seed=4)
    assert fuzz_compare(SourceUnit(BASE), other, spec) == fuzz_compare(SourceUnit(BASE), other, spec)


def test_fuzz_matching_exceptions_agree():
    src = SourceUnit("def f(a, b):\n    if a < 0:\n        raise ValueError(a)\n    return b\n")
    assert fuzz_compare(src, src, FuzzSpec(**SPEC, trials=50)).mean_abs_diff == 0.0


def test_fuzz_structured_length_mismatch():
    a = SourceUnit("def f(a, b):\n    return [a, b]\n")
    b = SourceUnit("def f(a, b):\n    return [a, b, 0]\n")
    r = fuzz_compare(a, b, FuzzSpec(**SPEC, trials=20))
    assert r.mean_abs_diff == 1.0 and r.failures[0]["reason"] == "length mismatch"


def test_fuzz_timeout_counts_as_failure():
    slow = SourceUnit("def f(a, b):\n    while a > 1000:\n        pass\n    while True:\n        pass\n")
    r = fuzz_compare(SourceUnit(BASE), slow, FuzzSpec(**SPEC, trials=3, timeout=0.2))
    assert r.mean_abs_diff == 1.0 and r.failures[0]["reason"] == "timeout"


def test_fuzz_blocks_network():
    net = SourceUnit("import socket\n\n\ndef f(a, b):\n    socket.create_connection(('example.com', 80))\n    return a\n")
    r = fuzz_compare(SourceUnit(BASE), net, FuzzSpec(**SPEC, trials=5))
    assert r.mean_abs_diff == 1.0 and r.failures[0]["reason"] == "execution error"


def test_fuzz_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        FuzzSpec("f", [{"kind": "bytes"}])
    with pytest.raises(ValueError):
        FuzzSpec("f", [], threshold=0)
    p = tmp_path / "spec.json"
    p.write_text('{"entrypoint": "f", "params": [{"kind": "str", "max_len": 3}], "trials": 5}')
    s = FuzzSpec.load(p)
    assert all(len(x[0]) <= 3 for x in s.inputs()) and s.inputs() == s.inputs()


# -- costs and reports ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ledgers():
    from test_loop import V0, V1, client_for
    m = GganModel(seed=0)
    return [run_promsec(SourceUnit(V1), m, client_for(V0), run_id="r1"),
            run_promsec(SourceUnit(V1), m, client_for(V1), run_id="r2")]


def test_cost_summary_empty():
    from secprompt.loop import RunLedger
    assert cost_summary(RunLedger("x", {})) == CostSummary()


def test_cost_summary_single_iteration(ledgers):
    s = cost_summary(ledgers[0])
    assert (s.llm_queries, s.analyses) == (2, 2)
    assert s.input_tokens > 0 and s.output_tokens > 0


def test_cost_summary_is_additive(ledgers):
    total = cost_summary(ledgers[0]) + cost_summary(ledgers[1])
    assert total.llm_queries == sum(led.llm_queries() for led in ledgers)
    assert total.analyses == sum(led.analyses() for led in ledgers)


def test_emit_report(tmp_path, ledgers):
    paths = emit_report(ledgers, tmp_path)
    names = {p.name for p in paths}
    assert {"r1.csv", "r2.csv", "corpus.csv", "cwe_histogram.csv"} <= names
    rows = list(csv.DictReader((tmp_path / "corpus.csv").open()))
    assert [r["status"] for r in rows] == ["secured", "budget-exhausted"]
    hist = list(csv.DictReader((tmp_path / "cwe_histogram.csv").open()))
    assert hist == [{"cwe": "78", "before": "2", "after": "1"}]
    for svg in (tmp_path / "charts").glob("*.svg"):
        root = ET.parse(svg).getroot()
        assert root.tag.endswith("svg") and root.get("version") == "1.1"


def test_emit_report_needs_ledgers(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_bar_chart_escapes_text():
    svg = bar_chart_svg("a<b", ["x&y"], {"s": [1.0]})
    root = ET.fromstring(svg)
    assert root.find("{http://www.w3.org/2000/svg}text").text == "a<b"
