"""Indentation-sensitive tokenizer for the subject language.

Every token records the trivia (spaces, comments, blank lines) that precedes
it in ``prefix`` so that ``"".join(t.prefix + t.lexeme for t in tokens)``
reproduces the input exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
import itertools


class LexError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at {line}:{col}")
        self.line = line
        self.col = col


class TokenKind(str, Enum):
    IDENT = "ident"
    STRING = "string-lit"
    NUMBER = "number-lit"
    KEYWORD = "keyword"
    OPERATOR = "operator"
    PUNCT = "punct"
    NEWLINE = "newline"
    INDENT = "indent"
    DEDENT = "dedent"
    EOF = "eof"


KEYWORDS = frozenset(
    """def return if elif else while for in try except finally with as pass
    import from and or not is True False None break continue raise""".split()
)

# longest first so that "**" wins over "*"
OPERATORS = ("**", "//", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=",
             "+", "-", "*", "/", "%", "<", ">", "=")
PUNCT = ("(", ")", "[", "]", "{", "}", ",", ":", ".", ";")

_NUMBER = re.compile(r"\d+(\.\d+)?([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_STRING_START = re.compile(r"([rRbBuU]{0,2})('''|\"\"\"|'|\")")

_unit_ids = itertools.count()


class Origin(str, Enum):
    USER = "user-code"
    LLM = "llm-generated"
    RECONSTRUCTED = "reconstructed"


@dataclass(frozen=True)
class SourceUnit:
    text: str
    id: str = field(default_factory=lambda: f"unit-{next(_unit_ids)}")
    language: str = "subject-subset"
    origin: Origin = Origin.USER

    def lines(self) -> list[str]:
        return self.text.splitlines()


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    lexeme: str
    line: int
    col: int
    prefix: str = ""

    @property
    def end(self) -> tuple[int, int]:
        """Position just past the lexeme."""
        if "\n" not in self.lexeme:
            return self.line, self.col + len(self.lexeme)
        parts = self.lexeme.split("\n")
        return self.line + len(parts) - 1, len(parts[-1]) + 1

    def __repr__(self):
        return f"Token({self.kind.value} {self.lexeme!r} @{self.line}:{self.col})"


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def peek(self, n: int = 0) -> str:
        i = self.pos + n
        return self.text[i] if i < len(self.text) else ""

    def take(self, n: int) -> str:
        s = self.text[self.pos:self.pos + n]
        for ch in s:
            if ch == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
        self.pos += n
        return s

    def at_end(self) -> bool:
        return self.pos >= len(self.text)


def lex(unit: SourceUnit | str) -> list[Token]:
    """Tokenize ``unit``; raises :class:`LexError` on bad input."""
    if isinstance(unit, SourceUnit):
        if unit.language != "subject-subset":
            raise ValueError(f"cannot lex language {unit.language!r}")
        text = unit.text
    else:
        text = unit
    sc = _Scanner(text)
    tokens: list[Token] = []
    indents = [0]
    depth = 0  # bracket nesting; newlines inside brackets are trivia
    prefix = ""
    at_line_start = True

    def emit(kind, lexeme, line, col):
        nonlocal prefix
        tokens.append(Token(kind, lexeme, line, col, prefix))
        prefix = ""

    while not sc.at_end():
        if at_line_start and depth == 0:
            # measure indentation; blank and comment-only lines are trivia
            start = sc.pos
            while sc.peek() == " ":
                sc.pos += 1
            if sc.peek() == "\t":
                raise LexError("tab in indentation", sc.line, sc.pos - start + 1)
            width = sc.pos - start
            sc.pos = start
            rest = sc.peek(width)
            if rest in ("\n", "#", "\r", ""):
                # blank / comment line
                prefix += sc.take(width)
                if sc.peek() == "#":
                    while sc.peek() not in ("\n", ""):
                        prefix += sc.take(1)
                if sc.peek() == "\r":
                    prefix += sc.take(1)
                if sc.peek() == "\n":
                    prefix += sc.take(1)
                continue
            line = sc.line
            if width > indents[-1]:
                indents.append(width)
                prefix += sc.take(width)
                emit(TokenKind.INDENT, "", line, width + 1)
            else:
                while width < indents[-1]:
                    indents.pop()
                    emit(TokenKind.DEDENT, "", line, width + 1)
                if width != indents[-1]:
                    raise LexError("inconsistent dedent", line, width + 1)
                prefix += sc.take(width)
            at_line_start = False
            continue

        ch = sc.peek()
        if ch == " ":
            prefix += sc.take(1)
            continue
        if ch == "\t":
            raise LexError("tab character", sc.line, sc.col)
        if ch == "\\" and sc.peek(1) == "\n":
            prefix += sc.take(2)
            continue
        if ch == "#":
            while sc.peek() not in ("\n", ""):
                prefix += sc.take(1)
            continue
        if ch == "\r" and sc.peek(1) == "\n":
            prefix += sc.take(1)
            continue
        if ch == "\n":
            if depth > 0:
                prefix += sc.take(1)
                continue
            line, col = sc.line, sc.col
            emit(TokenKind.NEWLINE, sc.take(1), line, col)
            at_line_start = True
            continue

        line, col = sc.line, sc.col
        rest = text[sc.pos:]
        m = _STRING_START.match(rest)
        if m and (m.group(1) == "" or _IDENT.match(rest).end() == len(m.group(1))):
            emit(TokenKind.STRING, _scan_string(sc, m), line, col)
            continue
        m = _IDENT.match(rest)
        if m:
            word = sc.take(m.end())
            kind = TokenKind.KEYWORD if word in KEYWORDS else TokenKind.IDENT
            emit(kind, word, line, col)
            continue
        m = _NUMBER.match(rest)
        if m:
            emit(TokenKind.NUMBER, sc.take(m.end()), line, col)
            continue
        op = next((o for o in OPERATORS if rest.startswith(o)), None)
        if op:
            emit(TokenKind.OPERATOR, sc.take(len(op)), line, col)
            continue
        if ch in PUNCT:
            if ch in "([{":
                depth += 1
            elif ch in ")]}":
                depth = max(0, depth - 1)
            emit(TokenKind.PUNCT, sc.take(1), line, col)
            continue
        raise LexError(f"illegal character {ch!r}", line, col)

    if tokens and tokens[-1].kind not in (TokenKind.NEWLINE, TokenKind.INDENT, TokenKind.DEDENT):
        tokens.append(Token(TokenKind.NEWLINE, "", sc.line, sc.col, ""))
    while len(indents) > 1:
        indents.pop()
        tokens.append(Token(TokenKind.DEDENT, "", sc.line, 1, ""))
    tokens.append(Token(TokenKind.EOF, "", sc.line, sc.col, prefix))
    return tokens


def _scan_string(sc: _Scanner, m: re.Match) -> str:
    line, col = sc.line, sc.col
    quote = m.group(2)
    out = sc.take(len(m.group(0)))
    while True:
        if sc.at_end():
            raise LexError("unterminated string", line, col)
        if sc.text.startswith(quote, sc.pos):
            return out + sc.take(len(quote))
        ch = sc.peek()
        if ch == "\\":
            out += sc.take(2)
            continue
        if ch == "\n" and len(quote) == 1:
            raise LexError("newline in string", line, col)
        out += sc.take(1)


def untokenize(tokens: list[Token]) -> str:
    return "".join(t.prefix + t.lexeme for t in tokens)
