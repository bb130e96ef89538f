"""Discrete graph-edit actions, their admissible sets, and plan application."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

from .frontend import GraphDoc, GraphKind, SourceUnit, default_vocab, lex, parse
from .frontend.graphs import (
    EdgeKind, FLOW_KINDS, GEdge, GNode, build_ast, reachable,
)
from .templates import Binding, CodeContext, TemplateBank, bindings_for, default_bank

log = logging.getLogger(__name__)


class ActionKind(str, Enum):
    KEEP = "KEEP"
    DELETE = "DELETE"
    RELABEL = "RELABEL"
    INSERT_AFTER = "INSERT_AFTER"


ACTION_TYPES = (ActionKind.KEEP, ActionKind.DELETE, ActionKind.RELABEL, ActionKind.INSERT_AFTER)


class DecodeError(Exception):
    pass


@dataclass(frozen=True)
class EditAction:
    kind: ActionKind
    label: int | None = None  # RELABEL target / INSERT node label
    template: str | None = None
    text: str | None = None  # bound statement text for template actions
    tag: str | None = None  # label string matching ``label``

    @classmethod
    def keep(cls):
        return cls(ActionKind.KEEP)

    @classmethod
    def delete(cls):
        return cls(ActionKind.DELETE)

    @classmethod
    def from_binding(cls, b: Binding, vocab) -> "EditAction":
        kind = ActionKind.INSERT_AFTER if b.template.kind == "insert" else ActionKind.RELABEL
        return cls(kind, vocab.lookup(b.label), b.template.id, b.text, b.label)

    def __str__(self):
        if self.kind in (ActionKind.KEEP, ActionKind.DELETE):
            return self.kind.value
        return f"{self.kind.value}({self.template})"


KEEP = EditAction.keep()


def _is_dead(ctx: CodeContext, stmt: int) -> bool:
    """A simple assignment with no downstream use and no call in it."""
    t = ctx.tree
    if t[stmt].kind not in ("Assign", "AugAssign", "Pass"):
        return False
    if any(t[j].kind == "Call" for j in t.walk(stmt)):
        return False
    node = ctx.stmt_node.get(stmt)
    return node is not None and not any(e.src == node for e in ctx.dfg.edges)


def enumerate_candidates(ctx: CodeContext, g: GraphDoc, bank: TemplateBank | None = None,
                         vocab=None) -> list[list[EditAction]]:
    """Admissible actions per node of ``g``; KEEP is always first."""
    bank = bank or default_bank()
    vocab = vocab or default_vocab()
    out = []
    for n in g.nodes:
        acts = [KEEP]
        stmt = n.syn
        if (stmt is not None and n.kind not in ("ENTRY", "EXIT")
                and ctx.is_simple(stmt) and (g.kind is not GraphKind.AST or n.kind == ctx.tree[stmt].kind)):
            if _is_dead(ctx, stmt):
                acts.append(EditAction.delete())
            for b in bindings_for(ctx, stmt, bank):
                acts.append(EditAction.from_binding(b, vocab))
        out.append(acts)
    return out


# -- plan application ----------------------------------------------------------------------

def apply_plan(g: GraphDoc, actions: dict[int, EditAction], vocab=None, strict: bool = False
               ) -> tuple[GraphDoc, dict[int, EditAction]]:
    """Apply per-node actions to ``g``; returns (ĝ, actions actually realized).

    Actions that would break graph invariants are demoted to KEEP (or raise when strict).
    """
    vocab = vocab or default_vocab()
    acts = {v: a for v, a in actions.items() if a.kind is not ActionKind.KEEP}
    if g.kind is GraphKind.AST:
        return _apply_ast(g, acts, vocab, strict)
    return _apply_flow(g, acts, strict)


def _apply_flow(g: GraphDoc, acts, strict):
    realized = {}
    for v, a in sorted(acts.items()):
        node = g.nodes[v]
        if node.kind in ("ENTRY", "EXIT"):
            if strict:
                raise DecodeError(f"cannot {a} an {node.kind} node")
            log.info("demoting %s on %s node %d to KEEP", a, node.kind, v)
            continue
        realized[v] = a
    while True:
        gh = _splice(g, realized)
        if g.kind is not GraphKind.CFG or _connected(gh):
            return gh, realized
        deletes = [v for v, a in realized.items() if a.kind is ActionKind.DELETE]
        if strict or not deletes:
            raise DecodeError("edit disconnects entry from exit")
        log.info("demoting DELETE on node %d to KEEP", deletes[-1])
        del realized[deletes[-1]]


def _connected(g: GraphDoc) -> bool:
    for e in g.entries():
        scope = g.nodes[e].scope
        if g.exit_of(scope) not in reachable(g, [e]):
            return False
    return True


def _splice(g: GraphDoc, acts) -> GraphDoc:
    deleted = {v for v, a in acts.items() if a.kind is ActionKind.DELETE}
    nodes: list[GNode] = []
    remap = {}
    inserted_after = {}
    for n in g.nodes:
        if n.id in deleted:
            continue
        new = replace(n, id=len(nodes), origin=n.origin if n.origin is not None else n.id, anchor=None)
        a = acts.get(n.id)
        if a is not None and a.kind is ActionKind.RELABEL:
            new.label, new.tag, new.template = a.label, a.tag, a.template
        remap[n.id] = new.id
        nodes.append(new)
    for v, a in sorted(acts.items()):
        if a.kind is ActionKind.INSERT_AFTER and v in remap:
            src = g.nodes[v]
            ins = GNode(len(nodes), a.label, a.tag, None, None, "Inserted", scope=src.scope,
                        origin=None, template=a.template, anchor=v)
            inserted_after[v] = ins.id
            nodes.append(ins)

    # resolve flow edges through deleted nodes
    def targets(dst, seen=()):
        if dst not in deleted:
            return [dst]
        out = []
        for e in g.edges:
            if e.src == dst and e.kind in FLOW_KINDS and e.dst not in seen:
                out += targets(e.dst, seen + (dst,))
        return out

    edges = []
    for e in g.edges:
        if e.src in deleted:
            continue
        if e.kind in FLOW_KINDS:
            src = inserted_after.get(e.src, remap[e.src])
            kind = EdgeKind.FLOW_UNCOND if e.src in inserted_after else e.kind
            for d in targets(e.dst):
                edges.append(GEdge(src, remap[d], kind))
        elif e.dst not in deleted:
            edges.append(GEdge(remap[e.src], remap[e.dst], e.kind, e.var))
    for v, ins in inserted_after.items():
        if g.kind is GraphKind.DFG:
            edges.append(GEdge(remap[v], ins, EdgeKind.DEF_USE, ""))
        else:
            edges.append(GEdge(remap[v], ins, EdgeKind.FLOW_UNCOND))
    seen, uniq = set(), []
    for e in edges:
        key = (e.src, e.dst, e.kind, e.var)
        if key not in seen:
            seen.add(key)
            uniq.append(e)
    return GraphDoc(g.kind, nodes, uniq, g.vocab_id)


def _apply_ast(g: GraphDoc, acts, vocab, strict):
    """Statement-level edits on an AST: delete/replace/insert whole statement subtrees."""
    kids = {n.id: [] for n in g.nodes}
    for e in g.edges:
        if e.kind is EdgeKind.CHILD:
            kids[e.src].append(e.dst)
    parent = {c: p for p, cs in kids.items() for c in cs}
    realized = {}
    for v, a in sorted(acts.items()):
        if v not in parent:
            if strict:
                raise DecodeError("cannot edit the AST root")
            continue
        if a.kind is ActionKind.DELETE and len(kids[parent[v]]) == 1:
            if strict:
                raise DecodeError("deleting the only statement of a suite")
            continue
        realized[v] = a
    nodes: list[GNode] = []
    edges: list[GEdge] = []

    def copy_subtree(i):
        n = g.nodes[i]
        new = replace(n, id=len(nodes), origin=n.origin if n.origin is not None else n.id, anchor=None)
        nodes.append(new)
        child_ids = []
        for c in kids[i]:
            a = realized.get(c)
            if a is not None and a.kind is ActionKind.DELETE:
                continue
            if a is not None and a.kind is ActionKind.RELABEL:
                child_ids.append(graft(a, origin_of=c))
            else:
                child_ids.append(copy_subtree(c))
            if a is not None and a.kind is ActionKind.INSERT_AFTER:
                child_ids.append(graft(a, anchor=c))
        for c in child_ids:
            edges.append(GEdge(new.id, c, EdgeKind.CHILD))
        for x, y in zip(child_ids, child_ids[1:]):
            edges.append(GEdge(x, y, EdgeKind.NEXT_SIBLING))
        return new.id

    def graft(a: EditAction, origin_of=None, anchor=None):
        sub = build_ast(parse(lex(SourceUnit(a.text + "\n"))), vocab)
        base = len(nodes)
        stmt_root = sub.children(0)[0]
        order = [i for i in _preorder(sub, stmt_root)]
        local = {old: base + k for k, old in enumerate(order)}
        for old in order:
            n = sub.nodes[old]
            nodes.append(replace(n, id=local[old], span=None, syn=None, origin=None,
                                 template=a.template, anchor=None))
        nodes[base].anchor = anchor
        if origin_of is not None:
            nodes[base].origin = g.nodes[origin_of].origin if g.nodes[origin_of].origin is not None else origin_of
        for e in sub.edges:
            if e.src in local and e.dst in local:
                edges.append(GEdge(local[e.src], local[e.dst], e.kind))
        return base

    root = next(n.id for n in g.nodes if n.id not in parent)
    copy_subtree(root)
    return GraphDoc(GraphKind.AST, nodes, edges, g.vocab_id), realized


def _preorder(g: GraphDoc, root: int):
    stack = [root]
    while stack:
        i = stack.pop()
        yield i
        stack.extend(reversed(g.children(i)))
