from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fixture_unit
from secprompt.frontend import (
    EdgeKind, LexError, MalformedAst, ParseError, SourceUnit, TokenKind, VocabError,
    build_ast, build_cfg, build_dfg, featurize, lex, parse, parse_text, unparse, untokenize,
)
from secprompt.frontend.graphs import defs_uses, reachable
from secprompt.frontend.vocab import NodeVocab
from secprompt.templates import CodeContext
from secprompt.edits import apply_plan, enumerate_candidates


def shape(g):
    return [n.label for n in g.nodes], sorted((e.src, e.dst, e.kind.value) for e in g.edges)


def roundtrip(text, vocab):
    ast = build_ast(parse_text(text), vocab)
    again = build_ast(parse_text(unparse(ast).text), vocab)
    return shape(ast) == shape(again)


# -- lexer ---------------------------------------------------------------------

def test_lex_minimal_statement():
    toks = lex("x = 1\n")
    assert [(t.kind, t.lexeme) for t in toks] == [
        (TokenKind.IDENT, "x"), (TokenKind.OPERATOR, "="), (TokenKind.NUMBER, "1"),
        (TokenKind.NEWLINE, "\n"), (TokenKind.EOF, "")]


def test_lex_empty_is_just_eof():
    assert [t.kind for t in lex("")] == [TokenKind.EOF]


def _indent_oracle(text):
    """Independent indentation scanner: (indents, dedents) from leading whitespace alone."""
    stack, ind, ded = [0], 0, 0
    for line in text.splitlines():
        if not line.strip():
            continue
        width = len(line) - len(line.lstrip(" "))
        if width > stack[-1]:
            stack.append(width)
            ind += 1
        while width < stack[-1]:
            stack.pop()
            ded += 1
    return ind, ded + len(stack) - 1


def test_fix01_indent_dedent_pairs():
    text = fixture_unit("fix01.src").text
    kinds = Counter(t.kind for t in lex(text))
    ind, ded = _indent_oracle(text)
    assert ind == ded == kinds[TokenKind.INDENT] == kinds[TokenKind.DEDENT]
    assert ind == 7  # def, if, nested if, nested else, elif, else, while


def test_lexemes_reproduce_text(corpus60):
    for e in corpus60[:10]:
        assert untokenize(lex(e.unit)) == e.unit.text


@pytest.mark.parametrize("text", ["x = 1\n\tpass\n", "x = $\n", "if a:\n    b()\n  c()\n"])
def test_lex_errors_carry_location(text):
    with pytest.raises(LexError) as info:
        lex(text)
    assert info.value.line >= 1 and info.value.col >= 1


# -- parser --------------------------------------------------------------------

def test_parse_assignment():
    t = parse_text("x = 1")
    assert [(n.kind, n.payload) for n in t.nodes] == [
        ("Module", ""), ("Assign", ""), ("Name", "x"), ("Num", "1")]


def test_parse_if_else_has_two_suites():
    t = parse_text("if a:\n  b()\nelse:\n  c()")
    node = t[t[t.root].children[0]]
    assert node.kind == "If"
    assert [t[c].kind for c in node.children[1:]] == ["Suite", "Suite"]


def test_parse_error_reports_expected_tokens():
    with pytest.raises(ParseError) as info:
        parse_text("def f(:\n    pass\n")
    assert info.value.line == 1
    assert info.value.expected


def test_spans_nest_inside_parents():
    t = parse_text(fixture_unit("fix01.src").text)
    for i, node in enumerate(t.nodes):
        for c in node.children:
            s = t[c].span
            assert (node.span[0], node.span[1]) <= (s[0], s[1])
            assert (s[2], s[3]) <= (node.span[2], node.span[3])


def test_corpus_parses(corpus60):
    for e in corpus60:
        parse(lex(e.unit))
        parse(lex(e.twin))


# -- graphs --------------------------------------------------------------------

def test_single_assignment_ast_has_four_nodes(vocab):
    g = build_ast(parse_text("x = 1\n"), vocab)
    assert [n.kind for n in g.nodes] == ["Module", "Assign", "Name", "Num"]
    assert sorted((e.src, e.dst) for e in g.edges if e.kind is EdgeKind.CHILD) == [(0, 1), (1, 2), (1, 3)]
    assert {e.kind for e in g.edges} <= {EdgeKind.CHILD, EdgeKind.NEXT_SIBLING}


def test_empty_module_ast(vocab):
    assert len(build_ast(parse_text(""), vocab)) == 1


def test_function_ast_root_over_arguments_and_body(vocab):
    g = build_ast(parse_text(fixture_unit("fig15.src").text), vocab)
    fn = g.children(0)[0]
    assert g.nodes[fn].kind == "FunctionDef"
    assert [g.nodes[c].kind for c in g.children(fn)] == ["Params", "Suite"]
    g.validate()


def test_straight_line_cfg(vocab):
    g = build_cfg(parse_text("x = 1\ny = 2\n"), vocab)
    assert [n.kind for n in g.nodes][0] == "ENTRY" and g.nodes[-1].kind == "EXIT"
    assert sorted((e.src, e.dst) for e in g.edges) == [(0, 1), (1, 2), (2, 3)]


def test_if_else_cfg_is_a_diamond(vocab):
    g = build_cfg(parse_text("if a:\n    b()\nelse:\n    c()\n"), vocab)
    cond = next(n.id for n in g.nodes if n.kind == "If")
    out = {e.kind: e.dst for e in g.successors(cond)}
    assert set(out) == {EdgeKind.FLOW_TRUE, EdgeKind.FLOW_FALSE}
    joins = {g.successors(out[k])[0].dst for k in out}
    assert joins == {g.exit_of(g.nodes[cond].scope)}


def test_while_loop_has_back_edge(vocab):
    g = build_cfg(parse_text("i = 0\nwhile i < 3:\n    i = i + 1\nprint(i)\n"), vocab)
    cond = next(n.id for n in g.nodes if n.kind == "While")
    body = next(e.dst for e in g.successors(cond) if e.kind is EdgeKind.FLOW_TRUE)
    # the condition is reachable again from its own body
    assert cond in reachable(g, [body])


def test_cfg_entry_exit_per_function(vocab):
    g = build_cfg(parse_text(fixture_unit("fix01.src").text), vocab)
    g.validate()
    scopes = Counter((n.scope, n.kind) for n in g.nodes if n.kind in ("ENTRY", "EXIT"))
    assert set(scopes.values()) == {1}
    assert {s for s, _ in scopes} == {"<module>", "classify"}


def test_dfg_single_def_use(vocab):
    g = build_dfg(parse_text("x = input()\nrun(x)\n"), vocab)
    assert [(g.nodes[e.src].tag, g.nodes[e.dst].tag, e.var) for e in g.edges] == [
        ("S:Assign=call:input", "S:Expr=call:run/name", "x")]


def test_dfg_redefinition_kills(vocab):
    g = build_dfg(parse_text("x=1\nx=2\ny=x\n"), vocab)
    assert [(e.src, e.dst) for e in g.edges] == [(2, 3)]


def _brute_def_use(tree, cfg):
    """Def-use pairs by enumerating every CFG path from each definition."""
    du = [defs_uses(tree, n) for n in cfg.nodes]
    succ = {i: [e.dst for e in cfg.successors(i)] for i in range(len(cfg.nodes))}
    pairs = set()
    for d, (defs, _) in enumerate(du):
        for var in defs:
            stack = [(s, (d,)) for s in succ[d]]
            while stack:
                v, path = stack.pop()
                if v in path[1:]:
                    continue
                if var in du[v][1]:
                    pairs.add((d, v, var))
                if var in du[v][0]:
                    continue
                stack.extend((s, path + (v,)) for s in succ[v])
    return pairs


def test_dfg_branch_join(vocab):
    text = fixture_unit("dfg_join.src").text
    tree = parse_text(text)
    g = build_dfg(tree, vocab)
    ret = next(n.id for n in g.nodes if n.kind == "Return")
    into_ret = [(g.nodes[e.src].kind, e.var) for e in g.edges if e.dst == ret]
    assert into_ret == [("Assign", "x"), ("Assign", "x")]
    assert {(e.src, e.dst, e.var) for e in g.edges} == _brute_def_use(tree, build_cfg(tree, vocab))


_VARS = ("a", "b", "c")


@st.composite
def loop_free_function(draw):
    budget = [draw(st.integers(1, 6))]

    def block(depth):
        lines = []
        while budget[0] > 0 and (not lines or draw(st.booleans())):
            budget[0] -= 1
            pad = "    " * depth
            if depth < 3 and budget[0] > 0 and draw(st.integers(0, 3)) == 0:
                lines.append(f"{pad}if {draw(st.sampled_from(_VARS))}:")
                lines += block(depth + 1) or [f"{pad}    pass"]
                if draw(st.booleans()):
                    lines.append(f"{pad}else:")
                    lines += block(depth + 1) or [f"{pad}    pass"]
            elif draw(st.booleans()):
                lines.append(f"{pad}{draw(st.sampled_from(_VARS))} = "
                             f"{draw(st.sampled_from(_VARS))} + 1")
            else:
                lines.append(f"{pad}use({draw(st.sampled_from(_VARS))})")
        return lines

    body = block(1) or ["    pass"]
    return "def f(a):\n" + "\n".join(body) + "\n"


@settings(max_examples=150, deadline=None)
@given(loop_free_function())
def test_dfg_matches_path_enumeration(vocab, text):
    tree = parse_text(text)
    cfg = build_cfg(tree, vocab)
    g = build_dfg(tree, vocab, cfg)
    assert {(e.src, e.dst, e.var) for e in g.edges} == _brute_def_use(tree, cfg)


def test_graphs_are_deterministic(vocab, corpus60):
    text = corpus60[3].unit.text
    for build in (build_ast, build_cfg, build_dfg):
        a, b = build(parse_text(text), vocab), build(parse_text(text), vocab)
        assert shape(a) == shape(b) and [n.span for n in a.nodes] == [n.span for n in b.nodes]


# -- unparse -------------------------------------------------------------------

def test_roundtrip_simple(vocab):
    assert roundtrip("x = 1", vocab)


def test_roundtrip_fixtures(vocab):
    for name in ("fix01.src", "dfg_join.src", "f3.src", "fig15.src"):
        assert roundtrip(fixture_unit(name).text, vocab), name


def test_roundtrip_corpus(vocab, corpus60):
    assert all(roundtrip(e.unit.text, vocab) and roundtrip(e.twin.text, vocab) for e in corpus60)


def test_unparse_inserted_sanitizer_call(vocab):
    text = "def f():\n    host = input()\n    cmd = 'ping ' + host\n    system(cmd)\n"
    ctx = CodeContext(SourceUnit(text))
    g = build_ast(ctx.tree, vocab)
    cands = enumerate_candidates(ctx, g)
    acts = {v: a for v, cs in enumerate(cands) for a in cs if a.template == "T78-quote-insert"}
    assert len(acts) == 1
    gh, _ = apply_plan(g, acts)
    lines = unparse(gh).text.splitlines()
    assert lines[2] == "    host = shlex.quote(host)"
    assert [l for i, l in enumerate(lines) if i != 2] == text.splitlines()


def test_unparse_rejects_bad_arity(vocab):
    g = build_ast(parse_text("x = 1\n"), vocab)
    g.edges = [e for e in g.edges if e.dst != 3]
    g.nodes = g.nodes[:3]
    with pytest.raises(MalformedAst):
        unparse(g)


# -- featurize -----------------------------------------------------------------

def test_featurize_one_node(vocab):
    X = featurize(build_ast(parse_text(""), vocab), vocab)
    assert X.shape == (1, vocab.dim) and X.sum() == 1.0


def test_featurize_rows_are_one_hot_and_histogram_matches(vocab):
    g = build_cfg(parse_text(fixture_unit("f3.src").text), vocab)
    X = featurize(g, vocab)
    assert np.all(X.sum(axis=1) == 1.0)
    hist = Counter(int(i) for i in X.argmax(axis=1))
    assert hist == Counter(g.labels())


def test_unknown_label_raises():
    small = NodeVocab(["Module"])
    with pytest.raises(VocabError):
        build_ast(parse_text("x = 1\n"), small)
