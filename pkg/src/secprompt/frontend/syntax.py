"""Recursive-descent parser producing a flat, preorder-indexed syntax tree."""
from __future__ import annotations

from dataclasses import dataclass, field

from .lexer import Token, TokenKind, SourceUnit, lex

Span = tuple[int, int, int, int]  # start line, start col, end line, end col (exclusive)


class ParseError(Exception):
    def __init__(self, message: str, line: int, col: int, expected: frozenset = frozenset()):
        exp = f" (expected one of {sorted(expected)})" if expected else ""
        super().__init__(f"{message} at {line}:{col}{exp}")
        self.line = line
        self.col = col
        self.expected = expected


@dataclass
class SynNode:
    kind: str
    children: list[int] = field(default_factory=list)
    span: Span = (1, 1, 1, 1)
    payload: str = ""


@dataclass
class SyntaxTree:
    nodes: list[SynNode]
    root: int = 0

    def __getitem__(self, i: int) -> SynNode:
        return self.nodes[i]

    def __len__(self):
        return len(self.nodes)

    def parent_map(self) -> dict[int, int]:
        return {c: i for i, n in enumerate(self.nodes) for c in n.children}

    def walk(self, i: int | None = None):
        """Preorder indices of the subtree rooted at ``i``."""
        stack = [self.root if i is None else i]
        while stack:
            j = stack.pop()
            yield j
            stack.extend(reversed(self.nodes[j].children))


STATEMENT_KINDS = frozenset({
    "FunctionDef", "Import", "ImportFrom", "Assign", "AugAssign", "ExprStmt",
    "Return", "If", "While", "For", "Try", "With", "Pass", "Break", "Continue", "Raise",
})
COMPOUND_KINDS = frozenset({"FunctionDef", "If", "While", "For", "Try", "With"})

BINOP_PREC = {"or": 1, "and": 2, "cmp": 4, "+": 5, "-": 5, "*": 6, "/": 6, "//": 6, "%": 6, "**": 8}
COMPARE_OPS = ("==", "!=", "<", ">", "<=", ">=", "in", "not in", "is", "is not")


class _Tmp:
    """Mutable node used during parsing; flattened afterwards."""
    __slots__ = ("kind", "children", "start", "end", "payload")

    def __init__(self, kind, children, start, end, payload=""):
        self.kind = kind
        self.children = children
        self.start = start
        self.end = end
        self.payload = payload


class Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0

    # -- token helpers -----------------------------------------------------
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def check(self, lexeme: str) -> bool:
        t = self.tok
        return t.lexeme == lexeme and t.kind in (TokenKind.KEYWORD, TokenKind.OPERATOR, TokenKind.PUNCT)

    def check_kind(self, kind: TokenKind) -> bool:
        return self.tok.kind is kind

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, lexeme: str) -> Token:
        if not self.check(lexeme):
            self.fail(f"unexpected {self.tok.lexeme or self.tok.kind.value!r}", {lexeme})
        return self.advance()

    def expect_kind(self, kind: TokenKind) -> Token:
        if self.tok.kind is not kind:
            self.fail(f"unexpected {self.tok.lexeme or self.tok.kind.value!r}", {kind.value})
        return self.advance()

    def fail(self, msg, expected=()):
        t = self.tok
        raise ParseError(msg, t.line, t.col, frozenset(expected))

    def prev_end(self) -> tuple[int, int]:
        return self.toks[self.i - 1].end

    # -- module / statements ----------------------------------------------
    def parse_module(self) -> _Tmp:
        body = []
        while not self.check_kind(TokenKind.EOF):
            if self.check_kind(TokenKind.NEWLINE):
                self.advance()
                continue
            body.append(self.statement())
        return _Tmp("Module", body, (1, 1), self._text_end())

    def _text_end(self) -> tuple[int, int]:
        text = "".join(t.prefix + t.lexeme for t in self.toks)
        lines = text.split("\n")
        return len(lines), len(lines[-1]) + 1

    def suite(self) -> _Tmp:
        self.expect(":")
        if not self.check_kind(TokenKind.NEWLINE):
            stmt = self.simple_statement()
            return _Tmp("Suite", [stmt], stmt.start, stmt.end)
        self.advance()
        self.expect_kind(TokenKind.INDENT)
        body = []
        while not self.check_kind(TokenKind.DEDENT):
            if self.check_kind(TokenKind.EOF):
                self.fail("unexpected end of input", {"dedent"})
            if self.check_kind(TokenKind.NEWLINE):
                self.advance()
                continue
            body.append(self.statement())
        self.advance()
        return _Tmp("Suite", body, body[0].start, body[-1].end)

    def statement(self) -> _Tmp:
        t = self.tok
        if t.kind is TokenKind.KEYWORD:
            handler = {
                "def": self.funcdef, "if": self.if_stmt, "while": self.while_stmt,
                "for": self.for_stmt, "try": self.try_stmt, "with": self.with_stmt,
            }.get(t.lexeme)
            if handler:
                return handler()
        return self.simple_statement()

    def simple_statement(self) -> _Tmp:
        stmt = self.small_statement()
        if self.check(";"):
            self.fail("multiple statements on one line are not supported")
        if not (self.check_kind(TokenKind.NEWLINE) or self.check_kind(TokenKind.EOF)):
            self.fail(f"unexpected {self.tok.lexeme!r}", {"newline"})
        if self.check_kind(TokenKind.NEWLINE):
            self.advance()
        return stmt

    def small_statement(self) -> _Tmp:
        t = self.tok
        start = (t.line, t.col)
        if t.kind is TokenKind.KEYWORD:
            if t.lexeme in ("pass", "break", "continue"):
                self.advance()
                return _Tmp(t.lexeme.capitalize(), [], start, self.prev_end())
            if t.lexeme == "return":
                self.advance()
                kids = [] if self._at_stmt_end() else [self.expr_list()]
                return _Tmp("Return", kids, start, self.prev_end())
            if t.lexeme == "raise":
                self.advance()
                kids = [] if self._at_stmt_end() else [self.expr()]
                return _Tmp("Raise", kids, start, self.prev_end())
            if t.lexeme == "import":
                self.advance()
                name = self.dotted_name()
                if self.check("as"):
                    self.advance()
                    name += " as " + self.expect_kind(TokenKind.IDENT).lexeme
                return _Tmp("Import", [], start, self.prev_end(), name)
            if t.lexeme == "from":
                self.advance()
                module = self.dotted_name()
                self.expect("import")
                aliases = []
                while True:
                    at = self.tok
                    name = self.expect_kind(TokenKind.IDENT).lexeme
                    if self.check("as"):
                        self.advance()
                        name += " as " + self.expect_kind(TokenKind.IDENT).lexeme
                    aliases.append(_Tmp("Alias", [], (at.line, at.col), self.prev_end(), name))
                    if not self.check(","):
                        break
                    self.advance()
                return _Tmp("ImportFrom", aliases, start, self.prev_end(), module)
        target = self.expr_list()
        if self.check("="):
            self._check_target(target)
            self.advance()
            value = self.expr_list()
            return _Tmp("Assign", [target, value], start, self.prev_end())
        if self.tok.kind is TokenKind.OPERATOR and self.tok.lexeme in ("+=", "-=", "*=", "/=", "%="):
            self._check_target(target)
            op = self.advance().lexeme[0]
            value = self.expr()
            return _Tmp("AugAssign", [target, value], start, self.prev_end(), op)
        return _Tmp("ExprStmt", [target], start, self.prev_end())

    def _at_stmt_end(self) -> bool:
        return self.check_kind(TokenKind.NEWLINE) or self.check_kind(TokenKind.EOF)

    def _check_target(self, node: _Tmp):
        if node.kind == "Tuple":
            for c in node.children:
                self._check_target(c)
        elif node.kind not in ("Name", "Attribute", "Subscript"):
            raise ParseError("invalid assignment target", node.start[0], node.start[1], frozenset())

    def dotted_name(self) -> str:
        parts = [self.expect_kind(TokenKind.IDENT).lexeme]
        while self.check("."):
            self.advance()
            parts.append(self.expect_kind(TokenKind.IDENT).lexeme)
        return ".".join(parts)

    def funcdef(self) -> _Tmp:
        t = self.advance()
        name = self.expect_kind(TokenKind.IDENT).lexeme
        lp = self.expect("(")
        params = []
        while not self.check(")"):
            pt = self.expect_kind(TokenKind.IDENT)
            kids = []
            if self.check("="):
                self.advance()
                kids.append(self.expr())
            params.append(_Tmp("Param", kids, (pt.line, pt.col), self.prev_end(), pt.lexeme))
            if not self.check(","):
                break
            self.advance()
        self.expect(")")
        p = _Tmp("Params", params, (lp.line, lp.col), self.prev_end())
        body = self.suite()
        return _Tmp("FunctionDef", [p, body], (t.line, t.col), body.end, name)

    def if_stmt(self) -> _Tmp:
        t = self.advance()  # 'if' or 'elif'
        test = self.expr()
        body = self.suite()
        kids = [test, body]
        if self.check("elif"):
            nested = self.if_stmt()
            kids.append(_Tmp("Suite", [nested], nested.start, nested.end))
        elif self.check("else"):
            self.advance()
            kids.append(self.suite())
        return _Tmp("If", kids, (t.line, t.col), kids[-1].end)

    def while_stmt(self) -> _Tmp:
        t = self.advance()
        test = self.expr()
        body = self.suite()
        return _Tmp("While", [test, body], (t.line, t.col), body.end)

    def for_stmt(self) -> _Tmp:
        t = self.advance()
        target = self.target_list()
        self.expect("in")
        it = self.expr()
        body = self.suite()
        return _Tmp("For", [target, it, body], (t.line, t.col), body.end)

    def target_list(self) -> _Tmp:
        first = self.postfix()
        if not self.check(","):
            self._check_target(first)
            return first
        elts = [first]
        while self.check(","):
            self.advance()
            if self.check("in"):
                break
            elts.append(self.postfix())
        node = _Tmp("Tuple", elts, first.start, elts[-1].end)
        self._check_target(node)
        return node

    def try_stmt(self) -> _Tmp:
        t = self.advance()
        kids = [self.suite()]
        while self.check("except"):
            et = self.advance()
            ek = []
            name = ""
            if not self.check(":"):
                ek.append(self.expr())
                if self.check("as"):
                    self.advance()
                    name = self.expect_kind(TokenKind.IDENT).lexeme
            body = self.suite()
            ek.append(body)
            kids.append(_Tmp("Except", ek, (et.line, et.col), body.end, name))
        if self.check("finally"):
            ft = self.advance()
            body = self.suite()
            kids.append(_Tmp("Finally", [body], (ft.line, ft.col), body.end))
        if len(kids) == 1:
            self.fail("try without except or finally", {"except", "finally"})
        return _Tmp("Try", kids, (t.line, t.col), kids[-1].end)

    def with_stmt(self) -> _Tmp:
        t = self.advance()
        ctx = self.expr()
        name = ""
        if self.check("as"):
            self.advance()
            name = self.expect_kind(TokenKind.IDENT).lexeme
        body = self.suite()
        return _Tmp("With", [ctx, body], (t.line, t.col), body.end, name)

    # -- expressions ---------------------------------------------------------
    def expr_list(self) -> _Tmp:
        first = self.expr()
        if not self.check(","):
            return first
        elts = [first]
        while self.check(","):
            self.advance()
            if self._at_stmt_end() or self.check("="):
                break
            elts.append(self.expr())
        return _Tmp("Tuple", elts, first.start, self.prev_end())

    def expr(self) -> _Tmp:
        return self.or_expr()

    def or_expr(self) -> _Tmp:
        left = self.and_expr()
        while self.check("or"):
            self.advance()
            right = self.and_expr()
            left = _Tmp("BoolOp", [left, right], left.start, right.end, "or")
        return left

    def and_expr(self) -> _Tmp:
        left = self.not_expr()
        while self.check("and"):
            self.advance()
            right = self.not_expr()
            left = _Tmp("BoolOp", [left, right], left.start, right.end, "and")
        return left

    def not_expr(self) -> _Tmp:
        if self.check("not"):
            t = self.advance()
            operand = self.not_expr()
            return _Tmp("UnaryOp", [operand], (t.line, t.col), operand.end, "not")
        return self.comparison()

    def _compare_op(self) -> str | None:
        t = self.tok
        if t.kind is TokenKind.OPERATOR and t.lexeme in ("==", "!=", "<", ">", "<=", ">="):
            return t.lexeme
        if self.check("in"):
            return "in"
        if self.check("is"):
            nxt = self.toks[self.i + 1]
            return "is not" if nxt.lexeme == "not" and nxt.kind is TokenKind.KEYWORD else "is"
        if self.check("not"):
            nxt = self.toks[self.i + 1]
            if nxt.lexeme == "in" and nxt.kind is TokenKind.KEYWORD:
                return "not in"
        return None

    def comparison(self) -> _Tmp:
        left = self.arith()
        op = self._compare_op()
        if op is None:
            return left
        self.advance()
        if op in ("is not", "not in"):
            self.advance()
        right = self.arith()
        if self._compare_op() is not None:
            self.fail("chained comparisons are not supported")
        return _Tmp("Compare", [left, right], left.start, right.end, op)

    def arith(self) -> _Tmp:
        left = self.term()
        while self.tok.kind is TokenKind.OPERATOR and self.tok.lexeme in ("+", "-"):
            op = self.advance().lexeme
            right = self.term()
            left = _Tmp("BinOp", [left, right], left.start, right.end, op)
        return left

    def term(self) -> _Tmp:
        left = self.unary()
        while self.tok.kind is TokenKind.OPERATOR and self.tok.lexeme in ("*", "/", "//", "%"):
            op = self.advance().lexeme
            right = self.unary()
            left = _Tmp("BinOp", [left, right], left.start, right.end, op)
        return left

    def unary(self) -> _Tmp:
        if self.tok.kind is TokenKind.OPERATOR and self.tok.lexeme == "-":
            t = self.advance()
            operand = self.unary()
            return _Tmp("UnaryOp", [operand], (t.line, t.col), operand.end, "-")
        return self.power()

    def power(self) -> _Tmp:
        base = self.postfix()
        if self.tok.kind is TokenKind.OPERATOR and self.tok.lexeme == "**":
            self.advance()
            exp = self.unary()
            return _Tmp("BinOp", [base, exp], base.start, exp.end, "**")
        return base

    def postfix(self) -> _Tmp:
        node = self.atom()
        while True:
            if self.check("."):
                self.advance()
                name = self.expect_kind(TokenKind.IDENT).lexeme
                node = _Tmp("Attribute", [node], node.start, self.prev_end(), name)
            elif self.check("("):
                self.advance()
                args = self.call_args()
                self.expect(")")
                node = _Tmp("Call", [node] + args, node.start, self.prev_end())
            elif self.check("["):
                self.advance()
                index = self.expr()
                self.expect("]")
                node = _Tmp("Subscript", [node, index], node.start, self.prev_end())
            else:
                return node

    def call_args(self) -> list[_Tmp]:
        args, seen_kw = [], False
        while not self.check(")"):
            t = self.tok
            nxt = self.toks[self.i + 1]
            if t.kind is TokenKind.IDENT and nxt.lexeme == "=" and nxt.kind is TokenKind.OPERATOR:
                self.advance()
                self.advance()
                value = self.expr()
                args.append(_Tmp("Keyword", [value], (t.line, t.col), value.end, t.lexeme))
                seen_kw = True
            else:
                if seen_kw:
                    self.fail("positional argument after keyword argument")
                args.append(self.expr())
            if not self.check(","):
                break
            self.advance()
        return args

    def atom(self) -> _Tmp:
        t = self.tok
        start = (t.line, t.col)
        if t.kind is TokenKind.IDENT:
            self.advance()
            return _Tmp("Name", [], start, t.end, t.lexeme)
        if t.kind is TokenKind.NUMBER:
            self.advance()
            return _Tmp("Num", [], start, t.end, t.lexeme)
        if t.kind is TokenKind.STRING:
            self.advance()
            return _Tmp("Str", [], start, t.end, t.lexeme)
        if t.kind is TokenKind.KEYWORD and t.lexeme in ("True", "False"):
            self.advance()
            return _Tmp("Bool", [], start, t.end, t.lexeme)
        if t.kind is TokenKind.KEYWORD and t.lexeme == "None":
            self.advance()
            return _Tmp("NoneLit", [], start, t.end, "None")
        if self.check("("):
            self.advance()
            if self.check(")"):
                self.advance()
                return _Tmp("Tuple", [], start, self.prev_end())
            first = self.expr()
            if self.check(")"):
                self.advance()
                return first
            elts = [first]
            while self.check(","):
                self.advance()
                if self.check(")"):
                    break
                elts.append(self.expr())
            self.expect(")")
            return _Tmp("Tuple", elts, start, self.prev_end())
        if self.check("["):
            self.advance()
            elts = []
            while not self.check("]"):
                elts.append(self.expr())
                if not self.check(","):
                    break
                self.advance()
            self.expect("]")
            return _Tmp("List", elts, start, self.prev_end())
        if self.check("{"):
            self.advance()
            kids = []
            while not self.check("}"):
                kids.append(self.expr())
                self.expect(":")
                kids.append(self.expr())
                if not self.check(","):
                    break
                self.advance()
            self.expect("}")
            return _Tmp("Dict", kids, start, self.prev_end())
        self.fail(f"unexpected {t.lexeme or t.kind.value!r}",
                  {"ident", "number-lit", "string-lit", "(", "[", "{"})


def _flatten(root: _Tmp) -> SyntaxTree:
    nodes: list[SynNode] = []

    def visit(t: _Tmp) -> int:
        idx = len(nodes)
        node = SynNode(t.kind, [], (*t.start, *t.end), t.payload)
        nodes.append(node)
        node.children = [visit(c) for c in t.children]
        return idx

    visit(root)
    return SyntaxTree(nodes, 0)


def parse(tokens: list[Token]) -> SyntaxTree:
    """Parse a token stream from :func:`lex` into a :class:`SyntaxTree`."""
    return _flatten(Parser(tokens).parse_module())


def parse_text(text: str | SourceUnit) -> SyntaxTree:
    return parse(lex(text))
