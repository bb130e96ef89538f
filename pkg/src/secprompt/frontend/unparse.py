"""Emit subject-language text from an AST :class:`GraphDoc`."""
from __future__ import annotations

from .graphs import GraphDoc, GraphKind
from .lexer import Origin, SourceUnit
from .syntax import BINOP_PREC

INDENT = "    "


class MalformedAst(Exception):
    pass


# allowed child counts per kind; None means "any"
_ARITY = {
    "Module": None, "Suite": (1, None), "FunctionDef": (2, 2), "Params": None,
    "Param": (0, 1), "Import": (0, 0), "ImportFrom": (1, None), "Alias": (0, 0),
    "Assign": (2, 2), "AugAssign": (2, 2), "ExprStmt": (1, 1), "Return": (0, 1),
    "Raise": (0, 1), "If": (2, 3), "While": (2, 2), "For": (3, 3), "Try": (2, None),
    "Except": (1, 2), "Finally": (1, 1), "With": (2, 2), "Pass": (0, 0), "Break": (0, 0),
    "Continue": (0, 0), "Name": (0, 0), "Str": (0, 0), "Num": (0, 0), "Bool": (0, 0),
    "NoneLit": (0, 0), "Attribute": (1, 1), "Call": (1, None), "Keyword": (1, 1),
    "Subscript": (2, 2), "BinOp": (2, 2), "Compare": (2, 2), "BoolOp": (2, 2),
    "UnaryOp": (1, 1), "List": None, "Tuple": None, "Dict": None,
}


class _Emitter:
    def __init__(self, g: GraphDoc):
        self.g = g
        self.kids = {n.id: [] for n in g.nodes}
        has_parent = set()
        for e in g.edges:
            if e.kind.value == "child":
                self.kids[e.src].append(e.dst)
                has_parent.add(e.dst)
        roots = [n.id for n in g.nodes if n.id not in has_parent]
        if len(roots) != 1:
            raise MalformedAst(f"expected one root, found {len(roots)}")
        self.root = roots[0]

    def node(self, i):
        return self.g.nodes[i]

    def check(self, i):
        n = self.node(i)
        if n.kind not in _ARITY:
            raise MalformedAst(f"unknown node kind {n.kind!r}")
        bounds = _ARITY[n.kind]
        count = len(self.kids[i])
        if bounds is not None:
            lo, hi = bounds
            if count < lo or (hi is not None and count > hi):
                raise MalformedAst(f"{n.kind} node {i} has {count} children")
        if n.kind == "Dict" and count % 2:
            raise MalformedAst("Dict needs key/value pairs")
        return n

    # -- statements ----------------------------------------------------------
    def module(self) -> str:
        n = self.check(self.root)
        if n.kind != "Module":
            raise MalformedAst("root must be a Module")
        lines = []
        for c in self.kids[self.root]:
            lines += self.stmt(c, 0)
        return "\n".join(lines) + ("\n" if lines else "")

    def suite(self, i, depth) -> list[str]:
        n = self.check(i)
        if n.kind != "Suite":
            raise MalformedAst(f"expected Suite, got {n.kind}")
        out = []
        for c in self.kids[i]:
            out += self.stmt(c, depth)
        return out

    def stmt(self, i, depth) -> list[str]:
        n = self.check(i)
        k, kids, pad = n.kind, self.kids[i], INDENT * depth
        if k == "FunctionDef":
            params = self.check(kids[0])
            if params.kind != "Params":
                raise MalformedAst("FunctionDef needs Params first")
            ps = []
            for p in self.kids[kids[0]]:
                pn = self.check(p)
                ps.append(pn.text + ("=" + self.expr(self.kids[p][0]) if self.kids[p] else ""))
            return [f"{pad}def {n.text}({', '.join(ps)}):"] + self.suite(kids[1], depth + 1)
        if k == "If":
            out = [f"{pad}if {self.expr(kids[0])}:"] + self.suite(kids[1], depth + 1)
            while len(kids) == 3:
                orelse = kids[2]
                inner = self.kids[orelse]
                if len(inner) == 1 and self.node(inner[0]).kind == "If":
                    self.check(orelse)
                    ikids = self.kids[inner[0]]
                    self.check(inner[0])
                    out.append(f"{pad}elif {self.expr(ikids[0])}:")
                    out += self.suite(ikids[1], depth + 1)
                    kids = ikids
                    continue
                out.append(f"{pad}else:")
                out += self.suite(orelse, depth + 1)
                break
            return out
        if k == "While":
            return [f"{pad}while {self.expr(kids[0])}:"] + self.suite(kids[1], depth + 1)
        if k == "For":
            target = self.expr(kids[0], bare_tuple=True)
            return [f"{pad}for {target} in {self.expr(kids[1])}:"] + self.suite(kids[2], depth + 1)
        if k == "With":
            alias = f" as {n.text}" if n.text else ""
            return [f"{pad}with {self.expr(kids[0])}{alias}:"] + self.suite(kids[1], depth + 1)
        if k == "Try":
            out = [f"{pad}try:"] + self.suite(kids[0], depth + 1)
            for h in kids[1:]:
                hn = self.check(h)
                hk = self.kids[h]
                if hn.kind == "Except":
                    head = "except"
                    if len(hk) == 2:
                        head += " " + self.expr(hk[0])
                        if hn.text:
                            head += f" as {hn.text}"
                    out.append(f"{pad}{head}:")
                    out += self.suite(hk[-1], depth + 1)
                elif hn.kind == "Finally":
                    out.append(f"{pad}finally:")
                    out += self.suite(hk[0], depth + 1)
                else:
                    raise MalformedAst(f"unexpected {hn.kind} in Try")
            return out
        return [pad + self.simple(i)]

    def simple(self, i) -> str:
        n = self.check(i)
        k, kids = n.kind, self.kids[i]
        if k == "Assign":
            return f"{self.expr(kids[0], bare_tuple=True)} = {self.expr(kids[1], bare_tuple=True)}"
        if k == "AugAssign":
            return f"{self.expr(kids[0])} {n.text}= {self.expr(kids[1])}"
        if k == "ExprStmt":
            return self.expr(kids[0], bare_tuple=True)
        if k in ("Return", "Raise"):
            word = k.lower()
            return f"{word} {self.expr(kids[0], bare_tuple=True)}" if kids else word
        if k in ("Pass", "Break", "Continue"):
            return k.lower()
        if k == "Import":
            return f"import {n.text}"
        if k == "ImportFrom":
            names = ", ".join(self.check(a).text for a in kids)
            return f"from {n.text} import {names}"
        raise MalformedAst(f"{k} is not a statement")

    # -- expressions ---------------------------------------------------------
    def prec(self, i) -> int:
        n = self.node(i)
        if n.kind == "BoolOp":
            return BINOP_PREC[n.text]
        if n.kind == "UnaryOp":
            return 3 if n.text == "not" else 7
        if n.kind == "Compare":
            return BINOP_PREC["cmp"]
        if n.kind == "BinOp":
            return BINOP_PREC[n.text]
        if n.kind == "Tuple":
            return 0
        return 10

    def sub(self, i, min_prec) -> str:
        s = self.expr(i)
        return f"({s})" if self.prec(i) < min_prec else s

    def expr(self, i, bare_tuple=False) -> str:
        n = self.check(i)
        k, kids = n.kind, self.kids[i]
        if k in ("Name", "Str", "Num", "Bool"):
            return n.text
        if k == "NoneLit":
            return "None"
        if k == "Attribute":
            return f"{self.sub(kids[0], 10)}.{n.text}"
        if k == "Call":
            args = []
            for a in kids[1:]:
                an = self.check(a)
                if an.kind == "Keyword":
                    args.append(f"{an.text}={self.expr(self.kids[a][0])}")
                else:
                    args.append(self.expr(a))
            return f"{self.sub(kids[0], 10)}({', '.join(args)})"
        if k == "Subscript":
            return f"{self.sub(kids[0], 10)}[{self.expr(kids[1])}]"
        if k in ("BinOp", "BoolOp", "Compare"):
            p = self.prec(i)
            if n.text == "**":  # right associative
                return f"{self.sub(kids[0], p + 1)} ** {self.sub(kids[1], 7)}"
            right_min = p + 1 if k != "Compare" else p + 1
            return f"{self.sub(kids[0], p if k != 'Compare' else p + 1)} {n.text} {self.sub(kids[1], right_min)}"
        if k == "UnaryOp":
            if n.text == "not":
                return f"not {self.sub(kids[0], 3)}"
            return f"-{self.sub(kids[0], 7)}"
        if k == "List":
            return "[" + ", ".join(self.expr(c) for c in kids) + "]"
        if k == "Tuple":
            inner = ", ".join(self.expr(c) for c in kids)
            if len(kids) == 1:
                inner += ","
            return inner if bare_tuple and kids else f"({inner})"
        if k == "Dict":
            pairs = [f"{self.expr(a)}: {self.expr(b)}" for a, b in zip(kids[::2], kids[1::2])]
            return "{" + ", ".join(pairs) + "}"
        raise MalformedAst(f"{k} is not an expression")


def unparse(ast: GraphDoc, unit_id: str | None = None) -> SourceUnit:
    if ast.kind is not GraphKind.AST:
        raise MalformedAst(f"cannot unparse a {ast.kind.value} graph")
    text = _Emitter(ast).module()
    kwargs = {"id": unit_id} if unit_id else {}
    return SourceUnit(text, origin=Origin.RECONSTRUCTED, **kwargs)
