"""CWE-keyed fix templates and the capture binders that instantiate them."""
from __future__ import annotations

import ast as pyast
import json
import re
import string
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

from .frontend import SourceUnit, SyntaxTree, default_vocab, lex, parse
from .frontend.graphs import (
    GraphDoc, build_cfg, build_dfg, call_args, callee_name, reaching_definitions, stmt_label,
)
from .frontend.syntax import COMPOUND_KINDS, STATEMENT_KINDS, ParseError
from .frontend.lexer import LexError

SLOT = re.compile(r"\$\{(\w+)\}")


class TemplateMismatch(Exception):
    pass


@dataclass(frozen=True)
class FixTemplate:
    id: str
    cwe: int
    match: str
    emit: str
    kind: str = "rewrite"  # rewrite | insert
    requires: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("rewrite", "insert"):
            raise ValueError(f"template {self.id}: unknown kind {self.kind!r}")
        re.compile(self.match)

    @property
    def slots(self) -> list[str]:
        return SLOT.findall(self.emit)

    def matches(self, label: str) -> bool:
        return re.search(self.match, label) is not None

    def to_dict(self):
        return {"id": self.id, "cwe": self.cwe, "kind": self.kind, "match": self.match,
                "emit": self.emit, "requires": list(self.requires)}


class TemplateBank:
    def __init__(self, templates):
        self.templates = list(templates)
        self.by_id = {t.id: t for t in self.templates}
        if len(self.by_id) != len(self.templates):
            raise ValueError("duplicate template ids")

    def __iter__(self):
        return iter(self.templates)

    def __len__(self):
        return len(self.templates)

    def __getitem__(self, tid: str) -> FixTemplate:
        return self.by_id[tid]

    def __contains__(self, tid):
        return tid in self.by_id

    def ids(self) -> list[str]:
        return [t.id for t in self.templates]

    def cwes(self) -> set[int]:
        return {t.cwe for t in self.templates}

    @classmethod
    def load(cls, path=None) -> "TemplateBank":
        if path is None:
            text = resources.files("secprompt.data").joinpath("templates.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        items = json.loads(text)
        return cls(FixTemplate(d["id"], int(d["cwe"]), d["match"], d["emit"], d.get("kind", "rewrite"),
                               tuple(d.get("requires", ()))) for d in items)

    def save(self, path):
        Path(path).write_text(json.dumps([t.to_dict() for t in self.templates], indent=2) + "\n", "utf-8")


_BANK: TemplateBank | None = None


def default_bank() -> TemplateBank:
    global _BANK
    if _BANK is None:
        _BANK = TemplateBank.load()
    return _BANK


# -- code context --------------------------------------------------------------------

class CodeContext:
    """A parsed unit with its CFG/DFG and helpers for slicing source text."""

    def __init__(self, unit: SourceUnit, tree: SyntaxTree | None = None, cfg: GraphDoc | None = None,
                 vocab=None):
        self.unit = unit
        self.vocab = vocab or default_vocab()
        self.tree = tree if tree is not None else parse(lex(unit))
        self.cfg = cfg if cfg is not None else build_cfg(self.tree, self.vocab)
        self.lines = unit.text.split("\n")
        self._captures: dict[int, "_Captures"] = {}

    @cached_property
    def dfg(self) -> GraphDoc:
        return build_dfg(self.tree, self.vocab, self.cfg)

    @cached_property
    def reaching(self):
        return reaching_definitions(self.tree, self.cfg)

    @cached_property
    def parent(self) -> dict[int, int]:
        return self.tree.parent_map()

    @cached_property
    def stmt_node(self) -> dict[int, int]:
        return {n.syn: n.id for n in self.cfg.nodes if n.kind not in ("ENTRY", "EXIT")}

    @cached_property
    def _defs_into(self) -> dict[tuple[int, str], list[int]]:
        out: dict[tuple[int, str], list[int]] = {}
        for e in self.dfg.edges:
            out.setdefault((e.dst, e.var), []).append(e.src)
        return out

    @cached_property
    def imported(self) -> set[str]:
        names = set()
        for c in self.tree[self.tree.root].children:
            n = self.tree[c]
            if n.kind == "Import":
                names.add(n.payload.split(" as ")[-1] if " as " in n.payload else n.payload.split(".")[0])
        return names

    def text(self, i: int) -> str:
        return self.span_text(self.tree[i].span)

    @cached_property
    def _line_starts(self) -> list[int]:
        starts, pos = [], 0
        for line in self.lines:
            starts.append(pos)
            pos += len(line) + 1
        return starts

    def offset(self, line: int, col: int) -> int:
        return self._line_starts[line - 1] + col - 1

    def span_text(self, span) -> str:
        l, c, el, ec = span
        if l == el:
            return self.lines[l - 1][c - 1:ec - 1]
        parts = [self.lines[l - 1][c - 1:]] + self.lines[l:el - 1] + [self.lines[el - 1][:ec - 1]]
        return "\n".join(parts)

    def defs_at(self, var: str, stmt: int) -> list[int]:
        node = self.stmt_node.get(stmt)
        if node is None:
            return []
        return self._defs_into.get((node, var), [])

    def label(self, stmt: int) -> str:
        return stmt_label(self.tree, stmt)

    def is_simple(self, stmt: int) -> bool:
        k = self.tree[stmt].kind
        return k in STATEMENT_KINDS and k not in COMPOUND_KINDS

    def captures(self, stmt: int) -> "_Captures":
        if stmt not in self._captures:
            self._captures[stmt] = _Captures(self, stmt)
        return self._captures[stmt]

    def resolve(self, i: int, stmt: int) -> tuple[int, int] | None:
        """Follow a Name to its unique assigning expression if that is safe to inline."""
        t = self.tree
        if t[i].kind != "Name":
            return None
        defs = self.defs_at(t[i].payload, stmt)
        if len(defs) != 1:
            return None
        d = self.dfg.nodes[defs[0]]
        if d.kind != "Assign":
            return None
        target, value = t[d.syn].children
        if t[target].kind != "Name" or t[target].payload != t[i].payload:
            return None
        here = self.reaching[self.stmt_node[stmt]]
        there = self.reaching[defs[0]]
        for j in t.walk(value):
            if t[j].kind == "Name" and here.get(t[j].payload) != there.get(t[j].payload):
                return None
        return value, d.syn


def parse_statement(text: str) -> tuple[SyntaxTree, int]:
    """Parse one simple statement; returns (tree, statement index)."""
    try:
        tree = parse(lex(SourceUnit(text + "\n")))
    except (ParseError, LexError) as exc:
        raise TemplateMismatch(f"emitted text does not parse: {exc}") from exc
    body = tree[tree.root].children
    if len(body) != 1 or tree[body[0]].kind in COMPOUND_KINDS:
        raise TemplateMismatch("emitted text is not exactly one simple statement")
    return tree, body[0]


# -- captures ------------------------------------------------------------------------

RANDOM_FUNCS = {"random", "randint", "choice", "randrange", "getrandbits", "choices", "uniform"}
SHELL_META = set("|;&<>`$")


def _str_value(lexeme: str) -> str | None:
    try:
        v = pyast.literal_eval(lexeme)
    except (ValueError, SyntaxError):
        return None
    return v if isinstance(v, str) else None


class _Captures:
    """Lazily computed capture values for one statement; ``None`` means unbindable."""

    def __init__(self, ctx: CodeContext, stmt: int):
        self.ctx = ctx
        self.t = ctx.tree
        self.s = stmt
        self._cache: dict[str, str | None] = {}

    def get(self, name: str) -> str | None:
        if name not in self._cache:
            fn = getattr(self, "cap_" + name, None)
            self._cache[name] = fn() if fn else None
        return self._cache[name]

    # -- structural helpers ----------------------------------------------------------
    @property
    def node(self):
        return self.t[self.s]

    def main_call(self) -> int | None:
        n = self.node
        if n.kind == "ExprStmt":
            c = n.children[0]
        elif n.kind == "Assign":
            c = n.children[1]
        elif n.kind == "Return" and n.children:
            c = n.children[0]
        else:
            return None
        return c if self.t[c].kind == "Call" else None

    def value_node(self) -> int | None:
        n = self.node
        if n.kind == "Assign":
            return n.children[1]
        if n.kind in ("Return", "ExprStmt") and n.children:
            return n.children[0]
        return None

    def arg0_node(self) -> int | None:
        call = self.main_call()
        if call is None:
            return None
        pos, _ = call_args(self.t, call)
        return pos[0] if pos else None

    def build_of(self, i: int) -> tuple[int, int] | None:
        """The string-build expression behind ``i`` (direct, or via a unique def)."""
        if self.parts(i) is not None and self.t[i].kind != "Str":
            return i, self.s
        r = self.ctx.resolve(i, self.s)
        if r and self.parts(r[0]) is not None:
            return r
        if self.t[i].kind == "Str":
            return i, self.s
        return None

    def parts(self, i: int):
        """Decompose a string build into ('lit', str) / ('expr', node) pieces."""
        t = self.t
        n = t[i]
        if n.kind == "Str":
            v = _str_value(n.payload)
            return None if v is None else [("lit", v)]
        if n.kind == "BinOp" and n.payload == "+":
            out = []
            for c in n.children:
                sub = self.parts(c) if t[c].kind in ("Str", "BinOp") and (
                    t[c].kind == "Str" or t[c].payload == "+") else None
                out += sub if sub is not None else [("expr", c)]
            return out if any(k == "lit" for k, _ in out) else None
        if n.kind == "BinOp" and n.payload == "%":
            left, right = n.children
            fmt = _str_value(t[left].payload) if t[left].kind == "Str" else None
            if fmt is None:
                return None
            args = t[right].children if t[right].kind == "Tuple" else [right]
            pieces = re.split(r"(%[sdir]|%%)", fmt)
            out, k = [], 0
            for p in pieces:
                if p == "%%":
                    out.append(("lit", "%"))
                elif re.fullmatch(r"%[sdir]", p):
                    if k >= len(args):
                        return None
                    out.append(("expr", args[k]))
                    k += 1
                elif p:
                    out.append(("lit", p))
            return out if k == len(args) else None
        if n.kind == "Call":
            func = t[n.children[0]]
            if func.kind == "Attribute" and func.payload == "format" and t[func.children[0]].kind == "Str":
                fmt = _str_value(t[func.children[0]].payload)
                if fmt is None:
                    return None
                pos, kw = call_args(t, i)
                out, auto = [], 0
                for lit, fieldname, spec, conv in _format_fields(fmt):
                    if lit:
                        out.append(("lit", lit))
                    if fieldname is None:
                        continue
                    if spec or conv:
                        return None
                    if fieldname == "":
                        if auto >= len(pos):
                            return None
                        out.append(("expr", pos[auto]))
                        auto += 1
                    elif fieldname.isdigit():
                        if int(fieldname) >= len(pos):
                            return None
                        out.append(("expr", pos[int(fieldname)]))
                    elif fieldname in kw:
                        out.append(("expr", kw[fieldname]))
                    else:
                        return None
                return out
        return None

    def wrapped(self, i: int, stmt: int, wrapper: str) -> str | None:
        """Text of build ``i`` with every non-literal piece wrapped in ``wrapper(...)``."""
        parts = self.parts(i)
        if parts is None:
            return None
        exprs = [n for k, n in parts if k == "expr"]
        todo = [n for n in exprs if not (self.t[n].kind == "Call" and
                                         self.ctx.text(self.t[n].children[0]) == wrapper)]
        if not todo:
            return None
        return self.splice(i, [(n, f"{wrapper}({self.ctx.text(n)})") for n in todo])

    def splice(self, region: int, replacements) -> str:
        """Text of node ``region`` with the spans of sub-nodes replaced."""
        span = self.t[region].span
        base = self.ctx.offset(span[0], span[1])
        out = self.ctx.span_text(span)
        for node, new in sorted(replacements, key=lambda r: self.t[r[0]].span[:2], reverse=True):
            l, c, el, ec = self.t[node].span
            start = self.ctx.offset(l, c) - base
            end = self.ctx.offset(el, ec) - base
            out = out[:start] + new + out[end:]
        return out

    def args_text(self, skip_first: bool, drop_kw=("shell",), keywords_only=False) -> str:
        call = self.main_call()
        pieces = []
        first = True
        for c in self.t[call].children[1:]:
            cn = self.t[c]
            if cn.kind == "Keyword":
                if cn.payload in drop_kw:
                    continue
                pieces.append(self.ctx.text(c))
            else:
                if first and skip_first:
                    first = False
                    continue
                first = False
                if not keywords_only:
                    pieces.append(self.ctx.text(c))
        return "".join(", " + p for p in pieces)

    # -- captures --------------------------------------------------------------------
    def cap_target(self):
        n = self.node
        if n.kind != "Assign":
            return None
        return self.ctx.text(n.children[0])

    def cap_name_target(self):
        n = self.node
        if n.kind != "Assign" or self.t[n.children[0]].kind != "Name":
            return None
        return self.t[n.children[0]].payload

    def cap_value(self):
        v = self.value_node()
        return self.ctx.text(v) if v is not None else None

    def cap_callee(self):
        call = self.main_call()
        return self.ctx.text(self.t[call].children[0]) if call is not None else None

    def cap_arg0(self):
        a = self.arg0_node()
        return self.ctx.text(a) if a is not None else None

    def cap_rest(self):
        return self.args_text(skip_first=True) if self.arg0_node() is not None else None

    def cap_kwrest(self):
        return self.args_text(skip_first=True, keywords_only=True) if self.arg0_node() is not None else None

    def cap_env_name(self):
        n = self.node
        if n.kind != "Assign":
            return None
        target = self.t[n.children[0]]
        if target.kind not in ("Name", "Attribute"):
            return None
        return re.sub(r"\W", "_", target.payload).upper()

    def cap_argv(self):
        a = self.arg0_node()
        if a is None:
            return None
        b = self.build_of(a)
        if b is None:
            return None
        parts = self.parts(b[0])
        items, word, at_boundary = [], "", True
        for kind, val in parts:
            if kind == "lit":
                if SHELL_META & set(val) or "'" in val or '"' in val:
                    return None
                chunks = re.split(r"(\s+)", val)
                for ch in chunks:
                    if not ch:
                        continue
                    if ch.isspace():
                        if word:
                            items.append(json.dumps(word))
                            word = ""
                        at_boundary = True
                    else:
                        if not at_boundary and not word:
                            return None  # literal glued to an expression
                        word += ch
                        at_boundary = False
            else:
                if word or not at_boundary:
                    return None  # expression glued to a literal
                items.append(self._inline(val, b[1]))
                at_boundary = False
        if word:
            items.append(json.dumps(word))
        if not items:
            return None
        return "[" + ", ".join(items) + "]"

    def _inline(self, node: int, def_stmt: int) -> str:
        return self.ctx.text(node)

    def cap_sql(self):
        r = self._sql()
        return r[0] if r else None

    def cap_params(self):
        r = self._sql()
        return r[1] if r else None

    def _sql(self):
        if "_sql" in self._cache:
            return self._cache["_sql"]
        self._cache["_sql"] = None
        a = self.arg0_node()
        b = self.build_of(a) if a is not None else None
        if b is None or self.t[b[0]].kind == "Str":
            return None
        parts = self.parts(b[0])
        query, params = "", []
        for idx, (kind, val) in enumerate(parts):
            if kind == "lit":
                query += val
                continue
            nxt = parts[idx + 1][1] if idx + 1 < len(parts) and parts[idx + 1][0] == "lit" else ""
            if query[-1:] in ("'", '"') and nxt[:1] == query[-1:]:
                query = query[:-1]
                parts[idx + 1] = ("lit", nxt[1:])
            query += "?"
            params.append(self.ctx.text(val))
        if not params:
            return None
        ptext = "(" + ", ".join(params) + ("," if len(params) == 1 else "") + ")"
        self._cache["_sql"] = (json.dumps(query), ptext)
        return self._cache["_sql"]

    def _wrap_arg0(self, wrapper):
        a = self.arg0_node()
        if a is None:
            return None
        b = self.build_of(a)
        if b is None or self.t[b[0]].kind == "Str":
            return None
        return self.wrapped(b[0], b[1], wrapper)

    def cap_q_arg0(self):
        return self._wrap_arg0("shlex.quote")

    def cap_b_arg0(self):
        return self._wrap_arg0("os.path.basename")

    def _wrap_value(self, wrapper):
        n = self.node
        if n.kind != "Assign":
            return None
        return self.wrapped(n.children[1], self.s, wrapper)

    def cap_q_value(self):
        return self._wrap_value("shlex.quote")

    def cap_b_value(self):
        return self._wrap_value("os.path.basename")

    def _calls_in_value(self):
        v = self.value_node()
        if v is None:
            return []
        return [j for j in self.t.walk(v) if self.t[j].kind == "Call"]

    def _module(self, call: int) -> str | None:
        func = self.t[self.t[call].children[0]]
        if func.kind == "Attribute" and self.t[func.children[0]].kind == "Name":
            return self.t[func.children[0]].payload
        return None

    def _rewrite_value(self, pick) -> str | None:
        v = self.value_node()
        if v is None:
            return None
        reps = []
        for call in self._calls_in_value():
            new = pick(call)
            if new is not None:
                reps.append((call, new))
        # nested matches: keep only outermost replacements
        inside = set()
        for call, _ in reps:
            inside |= set(self.t.walk(call)) - {call}
        reps = [r for r in reps if r[0] not in inside]
        return self.splice(v, reps) if reps else None

    def _call_args_text(self, call: int, skip: int = 0) -> str:
        kids = self.t[call].children[1 + skip:]
        return ", ".join(self.ctx.text(c) for c in kids)

    def cap_sha_value(self):
        def pick(call):
            name = callee_name(self.t, call)
            mod = self._module(call)
            if name in ("md5", "sha1") and mod in (None, "hashlib"):
                return f"hashlib.sha256({self._call_args_text(call)})"
            if name == "new" and mod == "hashlib":
                pos, _ = call_args(self.t, call)
                if pos and self.t[pos[0]].kind == "Str" and re.search(r"md5|sha1", self.t[pos[0]].payload, re.I):
                    return f"hashlib.sha256({self._call_args_text(call, skip=1)})"
            return None
        return self._rewrite_value(pick)

    def cap_secrets_value(self):
        def pick(call):
            name = callee_name(self.t, call)
            if name not in RANDOM_FUNCS or self._module(call) not in (None, "random"):
                return None
            pos, kw = call_args(self.t, call)
            args = [self.ctx.text(p) for p in pos]
            if name == "choice" and len(args) == 1 and not kw:
                return f"secrets.choice({args[0]})"
            if name == "randrange" and len(args) == 1 and not kw:
                return f"secrets.randbelow({args[0]})"
            if name == "getrandbits" and len(args) == 1 and not kw:
                return f"secrets.randbits({args[0]})"
            if name == "randint" and len(args) == 2 and not kw:
                lo, hi = args
                try:
                    a, b = int(lo), int(hi)
                    inner = str(b - a + 1)
                    return f"secrets.randbelow({inner})" + (f" + {a}" if a else "")
                except ValueError:
                    return f"secrets.randbelow(({hi}) - ({lo}) + 1) + ({lo})"
            return None
        return self._rewrite_value(pick)

    def cap_rng_call(self):
        for call in self._calls_in_value():
            if callee_name(self.t, call) in RANDOM_FUNCS and self._module(call) in (None, "random"):
                return ""
        return None

    def cap_json_value(self):
        def pick(call):
            name = callee_name(self.t, call)
            if name in ("loads", "load") and self._module(call) in ("pickle", "cPickle", "marshal", "dill"):
                return f"json.{name}({self._call_args_text(call)})"
            return None
        return self._rewrite_value(pick)

    def cap_yaml_value(self):
        def pick(call):
            if callee_name(self.t, call) == "load" and self._module(call) == "yaml":
                pos, _ = call_args(self.t, call)
                if pos:
                    return f"yaml.safe_load({self.ctx.text(pos[0])})"
            return None
        return self._rewrite_value(pick)


def _format_fields(fmt: str):
    try:
        return list(string.Formatter().parse(fmt))
    except ValueError:
        return [(fmt, None, None, None)]


@dataclass
class Binding:
    template: FixTemplate
    stmt: int
    text: str  # emitted statement, without indentation
    label: str  # statement label of the emitted statement
    requires: tuple[str, ...] = field(default_factory=tuple)


def bind(template: FixTemplate, ctx: CodeContext, stmt: int) -> Binding:
    """Instantiate ``template`` at statement ``stmt`` or raise TemplateMismatch."""
    if not ctx.is_simple(stmt):
        raise TemplateMismatch(f"{template.id}: statement {stmt} is not a simple statement")
    label = ctx.label(stmt)
    if not template.matches(label):
        raise TemplateMismatch(f"{template.id}: label {label} does not match")
    caps = ctx.captures(stmt)
    values = {}
    for slot in template.slots:
        v = caps.get(slot)
        if v is None:
            raise TemplateMismatch(f"{template.id}: capture {slot!r} unbindable")
        values[slot] = v
    text = SLOT.sub(lambda m: values[m.group(1)], template.emit)
    if "\n" in text:
        raise TemplateMismatch(f"{template.id}: emitted text spans several lines")
    tree, s = parse_statement(text)
    if template.kind == "rewrite" and text.strip() == ctx.text(stmt).strip():
        raise TemplateMismatch(f"{template.id}: rewrite leaves the statement unchanged")
    missing = tuple(m for m in template.requires if m not in ctx.imported)
    return Binding(template, stmt, text, stmt_label(tree, s), missing)


def bindings_for(ctx: CodeContext, stmt: int, bank: TemplateBank) -> list[Binding]:
    out = []
    for t in bank:
        try:
            out.append(bind(t, ctx, stmt))
        except TemplateMismatch:
            continue
    return out
