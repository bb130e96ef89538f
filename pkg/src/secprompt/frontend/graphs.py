"""AST / CFG / DFG construction over :class:`SyntaxTree`."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .syntax import Span, SyntaxTree, STATEMENT_KINDS
from .vocab import NodeVocab, VocabError, ident_bucket, is_named


class GraphKind(str, Enum):
    AST = "AST"
    CFG = "CFG"
    DFG = "DFG"


class EdgeKind(str, Enum):
    CHILD = "child"
    NEXT_SIBLING = "next-sibling"
    FLOW_TRUE = "flow-true"
    FLOW_FALSE = "flow-false"
    FLOW_UNCOND = "flow-uncond"
    DEF_USE = "def-use"


FLOW_KINDS = (EdgeKind.FLOW_TRUE, EdgeKind.FLOW_FALSE, EdgeKind.FLOW_UNCOND)


class UnsupportedConstruct(Exception):
    pass


class GraphInvariantError(Exception):
    pass


@dataclass
class GNode:
    id: int
    label: int
    tag: str  # label string, kept alongside the index for readability
    span: Span | None = None
    syn: int | None = None
    kind: str = ""  # syntax kind, or ENTRY/EXIT
    text: str = ""  # identifier / literal payload (AST nodes)
    scope: str = ""  # owning function for CFG/DFG nodes
    origin: int | None = None  # provenance id in the source graph after edits
    template: str | None = None  # fix template that produced/relabelled this node
    anchor: int | None = None  # for inserted nodes: the original node they follow


@dataclass
class GEdge:
    src: int
    dst: int
    kind: EdgeKind
    var: str = ""


@dataclass
class GraphDoc:
    kind: GraphKind
    nodes: list[GNode]
    edges: list[GEdge]
    vocab_id: str

    def __len__(self):
        return len(self.nodes)

    def labels(self) -> list[int]:
        return [n.label for n in self.nodes]

    def successors(self, i: int, kinds=FLOW_KINDS) -> list[GEdge]:
        return [e for e in self.edges if e.src == i and e.kind in kinds]

    def predecessors(self, i: int, kinds=FLOW_KINDS) -> list[GEdge]:
        return [e for e in self.edges if e.dst == i and e.kind in kinds]

    def children(self, i: int) -> list[int]:
        return [e.dst for e in self.edges if e.src == i and e.kind is EdgeKind.CHILD]

    def neighbor_lists(self) -> list[list[int]]:
        """Undirected neighbourhoods (deduplicated, self loops dropped)."""
        nbrs = [set() for _ in self.nodes]
        for e in self.edges:
            if e.src != e.dst:
                nbrs[e.src].add(e.dst)
                nbrs[e.dst].add(e.src)
        return [sorted(s) for s in nbrs]

    def copy(self) -> "GraphDoc":
        return GraphDoc(self.kind, [replace(n) for n in self.nodes],
                        [replace(e) for e in self.edges], self.vocab_id)

    def entries(self) -> list[int]:
        return [n.id for n in self.nodes if n.kind == "ENTRY"]

    def exit_of(self, scope: str) -> int:
        return next(n.id for n in self.nodes if n.kind == "EXIT" and n.scope == scope)

    def validate(self):
        """Raise :class:`GraphInvariantError` if structural invariants fail."""
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise GraphInvariantError(f"node ids not dense at {i}")
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise GraphInvariantError(f"edge endpoint out of range: {e}")
        if self.kind is GraphKind.AST:
            parents = {}
            for e in self.edges:
                if e.kind is EdgeKind.CHILD:
                    if e.dst in parents:
                        raise GraphInvariantError(f"node {e.dst} has two parents")
                    parents[e.dst] = e.src
            roots = [i for i in range(n) if i not in parents]
            if n and len(roots) != 1:
                raise GraphInvariantError(f"AST has {len(roots)} roots")
            # acyclicity: walking up from any node must terminate
            for i in range(n):
                seen, j = set(), i
                while j in parents:
                    if j in seen:
                        raise GraphInvariantError("cycle in AST child edges")
                    seen.add(j)
                    j = parents[j]
        elif self.kind is GraphKind.CFG:
            scopes = {}
            for node in self.nodes:
                if node.kind in ("ENTRY", "EXIT"):
                    scopes.setdefault(node.scope, []).append(node.kind)
            for scope, ks in scopes.items():
                if sorted(ks) != ["ENTRY", "EXIT"]:
                    raise GraphInvariantError(f"scope {scope!r} has entry/exit {ks}")
            reach = reachable(self, self.entries())
            if len(reach) != n:
                raise GraphInvariantError("CFG node unreachable from entry")
            for scope in scopes:
                x = self.exit_of(scope)
                if self.successors(x):
                    raise GraphInvariantError("exit node has successors")
        elif self.kind is GraphKind.DFG:
            for e in self.edges:
                if e.kind is not EdgeKind.DEF_USE:
                    raise GraphInvariantError("DFG carries a non def-use edge")


def reachable(g: GraphDoc, starts) -> set[int]:
    adj = {}
    for e in g.edges:
        if e.kind in FLOW_KINDS:
            adj.setdefault(e.src, []).append(e.dst)
    seen = set(starts)
    queue = deque(starts)
    while queue:
        u = queue.popleft()
        for v in adj.get(u, ()):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


# -- labels ------------------------------------------------------------------

def ast_label(kind: str, payload: str) -> str:
    if kind == "Name":
        return f"Name:{ident_bucket(payload)}"
    if kind == "Attribute":
        return f"Attr:{ident_bucket(payload)}"
    if kind == "Keyword":
        return f"Kw:{ident_bucket(payload)}"
    if kind in ("BinOp", "Compare", "BoolOp", "UnaryOp", "AugAssign"):
        return f"{kind}:{payload}"
    return kind


def callee_name(tree: SyntaxTree, i: int) -> str | None:
    """Final identifier of a call's function expression, if ``i`` is a call."""
    node = tree[i]
    if node.kind != "Call":
        return None
    func = tree[node.children[0]]
    if func.kind in ("Name", "Attribute"):
        return func.payload
    return None


def call_args(tree: SyntaxTree, i: int) -> tuple[list[int], dict[str, int]]:
    node = tree[i]
    pos, kw = [], {}
    for c in node.children[1:]:
        if tree[c].kind == "Keyword":
            kw[tree[c].payload] = tree[c].children[0]
        else:
            pos.append(c)
    return pos, kw


def is_string_build(tree: SyntaxTree, i: int) -> bool:
    """True for concatenation, %-formatting or ``.format`` string expressions."""
    node = tree[i]
    if node.kind == "BinOp" and node.payload in ("+", "%"):
        return True
    if node.kind == "Call":
        func = tree[node.children[0]]
        return func.kind == "Attribute" and func.payload == "format"
    return False


def value_class(tree: SyntaxTree, i: int) -> str:
    k = tree[i].kind
    if k in ("Str", "Num", "Bool", "NoneLit"):
        return "lit"
    if k == "Name":
        return "name"
    if is_string_build(tree, i):
        return "concat"
    if k == "Call":
        return "call"
    return "other"


def arg_class(tree: SyntaxTree, call: int) -> str:
    pos, _ = call_args(tree, call)
    if not pos:
        return "none"
    k = tree[pos[0]].kind
    if k in ("List", "Tuple"):
        return "list"
    vc = value_class(tree, pos[0])
    return vc if vc in ("lit", "name", "concat") else "other"


def target_name(tree: SyntaxTree, i: int) -> str | None:
    node = tree[i]
    if node.kind in ("Name", "Attribute"):
        return node.payload
    if node.kind == "Subscript":
        return target_name(tree, node.children[0])
    return None


def stmt_label(tree: SyntaxTree, i: int) -> str:
    node = tree[i]
    k = node.kind
    if k == "Assign":
        target, value = node.children
        callee = callee_name(tree, value)
        if callee and is_named(ident_bucket(callee)):
            return f"S:Assign=call:{ident_bucket(callee)}"
        tname = target_name(tree, target)
        tb = ident_bucket(tname) if tname else "#"
        vc = value_class(tree, value)
        return f"S:Assign:{tb}={vc}" if is_named(tb) else f"S:Assign:_={vc}"
    if k == "ExprStmt":
        e = node.children[0]
        if tree[e].kind != "Call":
            return "S:Expr"
        callee = callee_name(tree, e)
        if callee and is_named(ident_bucket(callee)):
            return f"S:Expr=call:{ident_bucket(callee)}/{arg_class(tree, e)}"
        return "S:Expr=call:_"
    if k == "Return":
        if node.children:
            callee = callee_name(tree, node.children[0])
            if callee and is_named(ident_bucket(callee)):
                return f"S:Return=call:{ident_bucket(callee)}"
        return "S:Return"
    return {
        "FunctionDef": "S:Def", "ImportFrom": "S:Import", "Import": "S:Import",
        "If": "S:If", "While": "S:While", "For": "S:For", "Try": "S:Try",
        "Except": "S:Except", "Finally": "S:Finally", "With": "S:With", "Pass": "S:Pass",
        "Break": "S:Break", "Continue": "S:Continue", "Raise": "S:Raise",
        "AugAssign": "S:AugAssign",
    }[k]


def header_span(tree: SyntaxTree, i: int) -> Span:
    """Span of a statement's own line(s): compound statements stop before the body."""
    node = tree[i]
    if node.kind in ("If", "While", "For", "With", "Except", "FunctionDef", "Try", "Finally"):
        return (node.span[0], node.span[1], node.span[0], node.span[1])
    return node.span


# -- AST -----------------------------------------------------------------------

def build_ast(tree: SyntaxTree, vocab: NodeVocab) -> GraphDoc:
    nodes, edges = [], []
    for i, sn in enumerate(tree.nodes):
        tag = ast_label(sn.kind, sn.payload)
        nodes.append(GNode(i, vocab.lookup(tag), tag, sn.span, i, sn.kind, sn.payload))
    for i, sn in enumerate(tree.nodes):
        for c in sn.children:
            edges.append(GEdge(i, c, EdgeKind.CHILD))
        for a, b in zip(sn.children, sn.children[1:]):
            edges.append(GEdge(a, b, EdgeKind.NEXT_SIBLING))
    return _stamp(GraphDoc(GraphKind.AST, nodes, edges, vocab.id))


# -- CFG -----------------------------------------------------------------------

class _CfgBuilder:
    def __init__(self, tree: SyntaxTree, vocab: NodeVocab):
        self.tree = tree
        self.vocab = vocab
        self.nodes: list[GNode] = []
        self.edges: list[GEdge] = []
        self.loops: list[tuple[int, list]] = []
        self.pending_funcs: list[int] = []

    def new_node(self, tag, syn, scope, kind, span=None) -> int:
        idx = len(self.nodes)
        self.nodes.append(GNode(idx, self.vocab.lookup(tag), tag, span, syn, kind, scope=scope))
        return idx

    def connect(self, dangling, dst):
        for src, kind in dangling:
            self.edges.append(GEdge(src, dst, kind))

    def build_scope(self, scope: str, body: list[int], syn: int | None, params: list[str]):
        entry = self.new_node("S:ENTRY", syn, scope, "ENTRY")
        self.nodes[entry].text = ",".join(params)
        self.exit_pending = []
        self.scope = scope
        out = self.block(body, [(entry, EdgeKind.FLOW_UNCOND)])
        exit_ = self.new_node("S:EXIT", syn, scope, "EXIT")
        self.connect(out + self.exit_pending, exit_)

    def block(self, stmts, dangling):
        for s in stmts:
            dangling = self.stmt(s, dangling)
        return dangling

    def suite_body(self, suite: int) -> list[int]:
        return self.tree[suite].children

    def stmt(self, i, dangling):
        t = self.tree
        node = t[i]
        k = node.kind
        if k not in STATEMENT_KINDS:
            raise UnsupportedConstruct(f"unsupported statement {k}")
        n = self.new_node(stmt_label(t, i), i, self.scope, k, header_span(t, i))
        self.connect(dangling, n)
        U, T, F = EdgeKind.FLOW_UNCOND, EdgeKind.FLOW_TRUE, EdgeKind.FLOW_FALSE
        if k == "If":
            out = self.block(self.suite_body(node.children[1]), [(n, T)])
            if len(node.children) == 3:
                out += self.block(self.suite_body(node.children[2]), [(n, F)])
            else:
                out.append((n, F))
            return out
        if k in ("While", "For"):
            body = node.children[1] if k == "While" else node.children[2]
            self.loops.append((n, []))
            out = self.block(self.suite_body(body), [(n, T)])
            self.connect(out, n)
            _, breaks = self.loops.pop()
            return [(n, F)] + breaks
        if k == "With":
            return self.block(self.suite_body(node.children[1]), [(n, U)])
        if k == "Try":
            out = self.block(self.suite_body(node.children[0]), [(n, U)])
            fin = None
            for h in node.children[1:]:
                hk = t[h].kind
                if hk == "Except":
                    hn = self.new_node("S:Except", h, self.scope, "Except", header_span(t, h))
                    self.connect([(n, U)], hn)
                    out += self.block(self.suite_body(t[h].children[-1]), [(hn, U)])
                else:
                    fin = h
            if fin is not None:
                fn = self.new_node("S:Finally", fin, self.scope, "Finally", header_span(t, fin))
                self.connect(out, fn)
                out = self.block(self.suite_body(t[fin].children[0]), [(fn, U)])
            return out
        if k == "FunctionDef":
            self.pending_funcs.append(i)
            return [(n, U)]
        if k in ("Return", "Raise"):
            self.exit_pending.append((n, U))
            return []
        if k == "Break":
            if not self.loops:
                raise UnsupportedConstruct("break outside loop")
            self.loops[-1][1].append((n, U))
            return []
        if k == "Continue":
            if not self.loops:
                raise UnsupportedConstruct("continue outside loop")
            self.edges.append(GEdge(n, self.loops[-1][0], U))
            return []
        return [(n, U)]


def build_cfg(tree: SyntaxTree, vocab: NodeVocab) -> GraphDoc:
    """One entry/exit pair for the module body and for every function."""
    b = _CfgBuilder(tree, vocab)
    root = tree[tree.root]
    b.build_scope("<module>", root.children, tree.root, [])
    while b.pending_funcs:
        f = b.pending_funcs.pop(0)
        fn = tree[f]
        params = [tree[p].payload for p in tree[fn.children[0]].children]
        scope = fn.payload
        # nested or duplicate names get a unique scope key
        existing = {n.scope for n in b.nodes}
        while scope in existing:
            scope += "'"
        b.build_scope(scope, tree[fn.children[1]].children, f, params)
    g = GraphDoc(GraphKind.CFG, b.nodes, b.edges, vocab.id)
    return _stamp(_prune_unreachable(g))


def _stamp(g: GraphDoc) -> GraphDoc:
    """Freshly built graphs are their own provenance."""
    for n in g.nodes:
        n.origin = n.id
    return g


def _prune_unreachable(g: GraphDoc) -> GraphDoc:
    keep = reachable(g, g.entries())
    # the exit must survive even if every path returns early or loops forever
    keep |= {n.id for n in g.nodes if n.kind == "EXIT"}
    if len(keep) == len(g.nodes):
        return g
    remap = {}
    nodes = []
    for n in g.nodes:
        if n.id in keep:
            remap[n.id] = len(nodes)
            nodes.append(replace(n, id=len(nodes)))
    edges = [replace(e, src=remap[e.src], dst=remap[e.dst])
             for e in g.edges if e.src in remap and e.dst in remap]
    return GraphDoc(g.kind, nodes, edges, g.vocab_id)


# -- DFG -----------------------------------------------------------------------

def _names_in(tree: SyntaxTree, i: int) -> list[str]:
    return [tree[j].payload for j in tree.walk(i) if tree[j].kind == "Name"]


def _target_defs(tree: SyntaxTree, i: int) -> tuple[list[str], list[str]]:
    """(defined names, used names) of an assignment target."""
    node = tree[i]
    if node.kind == "Name":
        return [node.payload], []
    if node.kind == "Tuple":
        d, u = [], []
        for c in node.children:
            cd, cu = _target_defs(tree, c)
            d += cd
            u += cu
        return d, u
    # attribute / subscript targets read their base object
    return [], _names_in(tree, i)


def defs_uses(tree: SyntaxTree, node: GNode) -> tuple[list[str], list[str]]:
    """Variables defined and used by a CFG node."""
    if node.kind == "ENTRY":
        return ([p for p in node.text.split(",") if p], [])
    if node.kind == "EXIT" or node.syn is None:
        return [], []
    t = tree
    s = t[node.syn]
    k = s.kind
    if k == "Assign":
        d, u = _target_defs(t, s.children[0])
        return d, u + _names_in(t, s.children[1])
    if k == "AugAssign":
        d, u = _target_defs(t, s.children[0])
        return d, d + u + _names_in(t, s.children[1])
    if k in ("ExprStmt", "Return", "Raise"):
        return [], [n for c in s.children for n in _names_in(t, c)]
    if k in ("If", "While"):
        return [], _names_in(t, s.children[0])
    if k == "For":
        d, u = _target_defs(t, s.children[0])
        return d, u + _names_in(t, s.children[1])
    if k == "With":
        return ([s.payload] if s.payload else []), _names_in(t, s.children[0])
    if k == "Except":
        uses = _names_in(t, s.children[0]) if len(s.children) == 2 else []
        return ([s.payload] if s.payload else []), uses
    if k == "Import":
        name = s.payload.split(" as ")[-1] if " as " in s.payload else s.payload.split(".")[0]
        return [name], []
    if k == "ImportFrom":
        return [t[a].payload.split(" as ")[-1] for a in s.children], []
    if k == "FunctionDef":
        params = t[s.children[0]]
        defaults = [n for p in params.children for c in t[p].children for n in _names_in(t, c)]
        return [s.payload], defaults
    return [], []


def reaching_definitions(tree: SyntaxTree, cfg: GraphDoc) -> list[dict[str, frozenset[int]]]:
    """Forward may-analysis: for each node, var -> defining nodes reaching its entry."""
    n = len(cfg.nodes)
    du = [defs_uses(tree, node) for node in cfg.nodes]
    preds = [[] for _ in range(n)]
    for e in cfg.edges:
        if e.kind in FLOW_KINDS:
            preds[e.dst].append(e.src)
    IN = [dict() for _ in range(n)]
    OUT = [dict() for _ in range(n)]

    def transfer(i, inset):
        out = dict(inset)
        for v in du[i][0]:
            out[v] = frozenset({i})
        return out

    work = deque(range(n))
    queued = [True] * n
    succs = [[] for _ in range(n)]
    for e in cfg.edges:
        if e.kind in FLOW_KINDS:
            succs[e.src].append(e.dst)
    while work:
        i = work.popleft()
        queued[i] = False
        merged: dict[str, frozenset] = {}
        for p in preds[i]:
            for v, ds in OUT[p].items():
                merged[v] = merged.get(v, frozenset()) | ds
        IN[i] = merged
        out = transfer(i, merged)
        if out != OUT[i]:
            OUT[i] = out
            for s in succs[i]:
                if not queued[s]:
                    queued[s] = True
                    work.append(s)
    return IN


def build_dfg(tree: SyntaxTree, vocab: NodeVocab, cfg: GraphDoc | None = None) -> GraphDoc:
    """Statement-level def-use graph; node ids coincide with the CFG's."""
    cfg = cfg or build_cfg(tree, vocab)
    IN = reaching_definitions(tree, cfg)
    edges = []
    for node in cfg.nodes:
        _, uses = defs_uses(tree, node)
        for v in dict.fromkeys(uses):
            for d in sorted(IN[node.id].get(v, ())):
                edges.append(GEdge(d, node.id, EdgeKind.DEF_USE, v))
    nodes = [replace(n) for n in cfg.nodes]
    return GraphDoc(GraphKind.DFG, nodes, edges, vocab.id)


def build_graph(tree: SyntaxTree, vocab: NodeVocab, kind: GraphKind | str) -> GraphDoc:
    kind = GraphKind(kind.upper() if isinstance(kind, str) else kind)
    if kind is GraphKind.AST:
        return build_ast(tree, vocab)
    if kind is GraphKind.CFG:
        return build_cfg(tree, vocab)
    return build_dfg(tree, vocab)


def featurize(g: GraphDoc, vocab: NodeVocab) -> np.ndarray:
    if g.vocab_id != vocab.id:
        raise VocabError("graph was built against a different vocabulary")
    X = np.zeros((len(g.nodes), vocab.dim))
    for n in g.nodes:
        if not 0 <= n.label < vocab.dim:
            raise VocabError(f"label index {n.label} out of range")
        X[n.id, n.label] = 1.0
    return X


def to_dot(g: GraphDoc) -> str:
    lines = [f"digraph {g.kind.value} {{"]
    for n in g.nodes:
        where = f" L{n.span[0]}" if n.span else ""
        lines.append(f'  n{n.id} [label="{n.tag}{where}"];'.replace("\\", "\\\\"))
    for e in g.edges:
        extra = f" {e.var}" if e.var else ""
        lines.append(f'  n{e.src} -> n{e.dst} [label="{e.kind.value}{extra}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
