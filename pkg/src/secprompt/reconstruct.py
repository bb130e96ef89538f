"""Turn an edited code graph back into source text, and check the result."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import networkx as nx
from networkx.algorithms.isomorphism import categorical_multiedge_match, categorical_node_match

from .edits import ActionKind, EditAction, apply_plan
from .frontend import GraphDoc, GraphKind, Origin, SourceUnit, default_vocab, lex, parse
from .frontend.graphs import EdgeKind, FLOW_KINDS, GEdge, GNode, build_graph
from .frontend.lexer import LexError
from .frontend.syntax import STATEMENT_KINDS, ParseError
from .templates import CodeContext, TemplateBank, TemplateMismatch, bind, default_bank

log = logging.getLogger(__name__)


class ProvenanceLost(Exception):
    pass


class SpanNotFound(Exception):
    pass


class ReconstructionError(Exception):
    pass


@dataclass
class GraphDiff:
    kind: GraphKind
    deletes: list[int] = field(default_factory=list)
    relabels: list[tuple[int, int, int, str | None]] = field(default_factory=list)  # id, old, new, template
    inserts: list[tuple[int, str]] = field(default_factory=list)  # anchor id, template
    edge_deltas: dict[str, list[tuple[int, int, str]]] = field(default_factory=dict)

    def __bool__(self):
        return bool(self.deletes or self.relabels or self.inserts)

    def size(self) -> int:
        return len(self.deletes) + len(self.relabels) + len(self.inserts)


@dataclass
class AppliedEdit:
    kind: str  # delete | delete-as-pass | relabel | insert | import
    node: int | None
    template: str | None
    lines: tuple[int, int]  # original line span (insert: the anchor's last line)
    text: str = ""


@dataclass
class ReconstructionResult:
    unit: SourceUnit
    applied: list[AppliedEdit]
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (edit, reason)
    consistent: bool = False
    source_graph: GraphDoc | None = None
    reason: str = ""


# -- diff ----------------------------------------------------------------------------------

def diff_graphs(g: GraphDoc, gh: GraphDoc) -> GraphDiff:
    for n in gh.nodes:
        if n.origin is None and n.anchor is None and n.template is None:
            raise ProvenanceLost(f"node {n.id} of the edited graph has no provenance")
    diff = GraphDiff(g.kind)
    origins = {n.origin for n in gh.nodes if n.origin is not None}
    if g.kind is GraphKind.AST:
        parent = {e.dst: e.src for e in g.edges if e.kind is EdgeKind.CHILD}
        replaced = {n.origin for n in gh.nodes if n.origin is not None and n.template is not None}
        for n in g.nodes:
            if (n.id not in origins and n.kind in STATEMENT_KINDS
                    and parent.get(n.id) in origins and n.id not in replaced):
                diff.deletes.append(n.id)
    else:
        diff.deletes = [n.id for n in g.nodes if n.id not in origins]
    for n in gh.nodes:
        if n.origin is not None and n.origin < len(g.nodes):
            old = g.nodes[n.origin]
            if n.template is not None or n.label != old.label:
                diff.relabels.append((n.origin, old.label, n.label, n.template))
        if n.anchor is not None:
            diff.inserts.append((n.anchor, n.template))
    diff.relabels.sort()
    diff.inserts.sort()
    if g.kind is not GraphKind.AST:
        old_edges = {(e.src, e.dst, e.kind.value) for e in g.edges}
        new_edges = set()
        for e in gh.edges:
            a, b = gh.nodes[e.src].origin, gh.nodes[e.dst].origin
            if a is not None and b is not None:
                new_edges.add((a, b, e.kind.value))
        diff.edge_deltas = {"removed": sorted(old_edges - new_edges), "added": sorted(new_edges - old_edges)}
    return diff


def diff_to_actions(diff: GraphDiff, g: GraphDoc) -> dict[int, EditAction]:
    acts = {}
    for v in diff.deletes:
        acts[v] = EditAction.delete()
    for v, _, new, tid in diff.relabels:
        acts[v] = EditAction(ActionKind.RELABEL, new, tid)
    for v, tid in diff.inserts:
        acts[v] = EditAction(ActionKind.INSERT_AFTER, None, tid)
    return acts


# -- text edits ----------------------------------------------------------------------------

def _stmt_of(graph: GraphDoc, v: int) -> int | None:
    if not 0 <= v < len(graph.nodes):
        return None
    n = graph.nodes[v]
    if n.kind in ("ENTRY", "EXIT"):
        return None
    return n.syn


def apply_edits(original: SourceUnit, ast: GraphDoc, cfg: GraphDoc, diff: GraphDiff,
                bank: TemplateBank | None = None) -> ReconstructionResult:
    """Rewrite ``original`` so that it realizes ``diff``; unmappable edits are skipped."""
    bank = bank or default_bank()
    source = ast if diff.kind is GraphKind.AST else cfg
    ctx = CodeContext(original, cfg=None)
    t = ctx.tree
    parent = ctx.parent
    lines = original.text.split("\n")
    edits = []  # (kind, node, template, stmt, text)
    skipped = []

    def locate(v):
        stmt = _stmt_of(source, v)
        if stmt is None or not ctx.is_simple(stmt):
            raise SpanNotFound(f"node {v} does not map to a simple statement")
        return stmt

    for v in diff.deletes:
        try:
            edits.append(("delete", v, None, locate(v), ""))
        except SpanNotFound as exc:
            skipped.append((f"delete {v}", str(exc)))
    for v, _, _, tid in diff.relabels:
        try:
            if tid is None or tid not in bank:
                raise TemplateMismatch(f"relabel of node {v} names no known template")
            stmt = locate(v)
            b = bind(bank[tid], ctx, stmt)
            edits.append(("relabel", v, tid, stmt, b.text, b.requires))
        except (SpanNotFound, TemplateMismatch) as exc:
            skipped.append((f"relabel {v} {tid}", str(exc)))
    for v, tid in diff.inserts:
        try:
            if tid not in bank:
                raise TemplateMismatch(f"unknown template {tid}")
            stmt = locate(v)
            b = bind(bank[tid], ctx, stmt)
            edits.append(("insert", v, tid, stmt, b.text, b.requires))
        except (SpanNotFound, TemplateMismatch) as exc:
            skipped.append((f"insert {v} {tid}", str(exc)))

    def render(chosen):
        """Produce (text, applied list) for a subset of edits."""
        ops = []  # (position, order, start, end, new_lines)
        applied = []
        deleted_by_suite: dict[int, list] = {}
        insert_suites = set()
        for e in chosen:
            if e[0] == "insert":
                insert_suites.add(parent[e[3]])
        for e in chosen:
            if e[0] == "delete":
                deleted_by_suite.setdefault(parent[e[3]], []).append(e)
        as_pass = set()
        for suite, dels in deleted_by_suite.items():
            if len(dels) == len(t[suite].children) and suite not in insert_suites:
                last = max(dels, key=lambda e: t[e[3]].span[0])
                as_pass.add(id(last))
        requires = []
        for e in chosen:
            kind, v, tid, stmt = e[:4]
            l, c, el, _ = t[stmt].span
            indent = " " * (c - 1)
            if kind == "delete":
                if id(e) in as_pass:
                    ops.append((l, 1, l, el, [indent + "pass"]))
                    applied.append(AppliedEdit("delete-as-pass", v, None, (l, el), "pass"))
                else:
                    ops.append((l, 1, l, el, []))
                    applied.append(AppliedEdit("delete", v, None, (l, el)))
            elif kind == "relabel":
                ops.append((l, 1, l, el, [indent + e[4]]))
                applied.append(AppliedEdit("relabel", v, tid, (l, el), e[4]))
                requires += e[5]
            else:
                ops.append((el + 1, 0, el + 1, el, [indent + e[4]]))
                applied.append(AppliedEdit("insert", v, tid, (el, el), e[4]))
                requires += e[5]
        modules = sorted(set(requires))
        if modules:
            pos = _import_position(t)
            ops.append((pos, -1, pos, pos - 1, [f"import {m}" for m in modules]))
            for m in modules:
                applied.append(AppliedEdit("import", None, None, (pos - 1, pos - 1), f"import {m}"))
        out = list(lines)
        for pos, _, start, end, new in sorted(ops, key=lambda o: (o[0], o[1]), reverse=True):
            out[start - 1:end] = new
        return "\n".join(out), applied

    text, applied = render(edits)
    if not _parses(text):
        kept = []
        for e in edits:
            trial, _ = render(kept + [e])
            if _parses(trial):
                kept.append(e)
            else:
                skipped.append((f"{e[0]} {e[1]} {e[2]}", "result does not reparse"))
        text, applied = render(kept)
    unit = SourceUnit(text, origin=Origin.RECONSTRUCTED)
    if not _parses(text):  # pragma: no cover - guarded by the greedy fallback above
        raise ReconstructionError("reconstructed text does not parse")
    return ReconstructionResult(unit, applied, skipped, False, source)


def _parses(text: str) -> bool:
    try:
        parse(lex(SourceUnit(text)))
        return True
    except (ParseError, LexError):
        return False


def _import_position(tree) -> int:
    """Line before which new imports go: after the leading import block, else line 1."""
    pos = 1
    for c in tree[tree.root].children:
        if tree[c].kind in ("Import", "ImportFrom"):
            pos = tree[c].span[2] + 1
        else:
            break
    return pos


# -- consistency ------------------------------------------------------------------------------

def realized_actions(result: ReconstructionResult, vocab=None) -> dict[int, EditAction]:
    vocab = vocab or default_vocab()
    g = result.source_graph
    acts = {}
    for a in result.applied:
        if a.kind == "delete":
            acts[a.node] = EditAction.delete()
        elif a.kind == "delete-as-pass":
            acts[a.node] = EditAction(ActionKind.RELABEL, vocab.lookup(_pass_tag(g)), "pass", "pass",
                                      _pass_tag(g))
        elif a.kind in ("relabel", "insert"):
            label = _label_of(a.text, g.kind)
            kind = ActionKind.RELABEL if a.kind == "relabel" else ActionKind.INSERT_AFTER
            acts[a.node] = EditAction(kind, vocab.lookup(label), a.template, a.text, label)
    return acts


def _pass_tag(g: GraphDoc) -> str:
    return "Pass" if g.kind is GraphKind.AST else "S:Pass"


def _label_of(text: str, kind: GraphKind) -> str:
    from .templates import parse_statement
    from .frontend.graphs import stmt_label, ast_label
    tree, s = parse_statement(text)
    if kind is GraphKind.AST:
        return ast_label(tree[s].kind, tree[s].payload)
    return stmt_label(tree, s)


def expected_graph(result: ReconstructionResult, vocab=None) -> GraphDoc:
    """The source graph with only the realized edits (and added imports) applied."""
    vocab = vocab or default_vocab()
    g = result.source_graph
    acts = realized_actions(result, vocab)
    expected, _ = apply_plan(g, acts, vocab)
    imports = [a.text for a in result.applied if a.kind == "import"]
    if imports:
        expected = _add_imports(expected, g, imports, vocab)
    return expected


def _add_imports(gh: GraphDoc, g: GraphDoc, imports: list[str], vocab) -> GraphDoc:
    gh = gh.copy()
    if g.kind is GraphKind.AST:
        root = next(n.id for n in gh.nodes if n.kind == "Module" and n.origin == 0)
        kids = gh.children(root)
        lead = 0
        for k in kids:
            if gh.nodes[k].kind in ("Import", "ImportFrom") and gh.nodes[k].template is None:
                lead += 1
            else:
                break
        new_ids = []
        for text in imports:
            nid = len(gh.nodes)
            gh.nodes.append(GNode(nid, vocab.lookup("Import"), "Import", None, None, "Import",
                                  text[len("import "):], template="import"))
            new_ids.append(nid)
        order = kids[:lead] + new_ids + kids[lead:]
        gh.edges = [e for e in gh.edges if not (e.src == root or (e.kind is EdgeKind.NEXT_SIBLING
                                                                  and e.src in kids))]
        for c in order:
            gh.edges.append(GEdge(root, c, EdgeKind.CHILD))
        for a, b in zip(order, order[1:]):
            gh.edges.append(GEdge(a, b, EdgeKind.NEXT_SIBLING))
        return gh
    # flow graphs: splice a chain of import nodes after the leading imports of the module scope
    entry = next(n.id for n in gh.nodes if n.kind == "ENTRY" and n.scope == "<module>")
    anchor = entry
    while True:
        succ = [e for e in gh.edges if e.src == anchor and e.kind in FLOW_KINDS]
        if len(succ) == 1 and gh.nodes[succ[0].dst].kind in ("Import", "ImportFrom"):
            anchor = succ[0].dst
        else:
            break
    outgoing = [e for e in gh.edges if e.src == anchor and e.kind in FLOW_KINDS]
    gh.edges = [e for e in gh.edges if not (e.src == anchor and e.kind in FLOW_KINDS)]
    prev = anchor
    for text in imports:
        nid = len(gh.nodes)
        gh.nodes.append(GNode(nid, vocab.lookup("S:Import"), "S:Import", None, None, "Import",
                              scope="<module>", template="import"))
        gh.edges.append(GEdge(prev, nid, EdgeKind.FLOW_UNCOND))
        prev = nid
    for e in outgoing:
        gh.edges.append(GEdge(prev, e.dst, e.kind))
    return gh


def to_networkx(g: GraphDoc) -> nx.MultiDiGraph:
    G = nx.MultiDiGraph()
    for n in g.nodes:
        G.add_node(n.id, tag=n.tag)
    for e in g.edges:
        if g.kind is GraphKind.DFG:
            G.add_edge(e.src, e.dst, kind=e.kind.value)
        else:
            G.add_edge(e.src, e.dst, kind=e.kind.value)
    return G


def isomorphic(a: GraphDoc, b: GraphDoc) -> bool:
    if len(a.nodes) != len(b.nodes) or len(a.edges) != len(b.edges):
        return False
    if sorted(n.tag for n in a.nodes) != sorted(n.tag for n in b.nodes):
        return False
    return nx.is_isomorphic(to_networkx(a), to_networkx(b),
                            node_match=categorical_node_match("tag", None),
                            edge_match=categorical_multiedge_match("kind", None))


def verify_consistency(result: ReconstructionResult, gh: GraphDoc | None = None, vocab=None) -> bool:
    """Rebuild the graph from the new text and compare it with the realized edit plan."""
    vocab = vocab or default_vocab()
    g = result.source_graph
    kind = gh.kind if gh is not None else g.kind
    try:
        tree = parse(lex(result.unit))
    except (ParseError, LexError) as exc:
        result.reason = f"unit does not parse: {exc}"
        result.consistent = False
        return False
    rebuilt = build_graph(tree, vocab, kind)
    expected = expected_graph(result, vocab)
    if kind is GraphKind.DFG:
        # def-use edges of inserted statements are not modelled by the plan; compare
        # the statement multiset and the flow skeleton instead
        ok = sorted(n.tag for n in rebuilt.nodes) == sorted(n.tag for n in expected.nodes)
    else:
        ok = isomorphic(rebuilt, expected)
    result.consistent = ok
    result.reason = "" if ok else "rebuilt graph differs from the realized edit plan"
    if not ok:
        log.info("reconstruction of %s inconsistent: %s", result.unit.id, result.reason)
    return ok


def reconstruct(unit: SourceUnit, g: GraphDoc, gh: GraphDoc, bank: TemplateBank | None = None,
                vocab=None) -> ReconstructionResult:
    """diff → apply → verify in one call; ``g`` must have been built from ``unit``."""
    vocab = vocab or default_vocab()
    tree = parse(lex(unit))
    ast = build_graph(tree, vocab, GraphKind.AST) if g.kind is not GraphKind.AST else g
    cfg = g if g.kind is GraphKind.CFG else build_graph(tree, vocab, GraphKind.CFG)
    diff = diff_graphs(g, gh)
    if g.kind is GraphKind.DFG:
        diff = replace(diff, kind=GraphKind.CFG)
        cfg = build_graph(tree, vocab, GraphKind.CFG)
    result = apply_edits(unit, ast, cfg, diff, bank)
    if g.kind is GraphKind.DFG:
        result.source_graph = g
    if not diff:
        result.unit = SourceUnit(unit.text, origin=Origin.RECONSTRUCTED)
    verify_consistency(result, gh, vocab)
    return result
