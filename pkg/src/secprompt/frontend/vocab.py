"""Node-label vocabulary shared by every graph kind."""
from __future__ import annotations

import hashlib
import re
import zlib
from pathlib import Path

# identifiers kept verbatim; everything else is hashed into HASH_BUCKETS buckets
NAMED_IDENTIFIERS = (
    "system", "popen", "run", "call", "check_output", "check_call", "Popen", "subprocess",
    "os", "shlex", "quote", "execute", "executemany", "cursor", "connect", "md5", "sha1",
    "sha256", "new", "hashlib", "DES", "random", "randint", "choice", "randrange",
    "getrandbits", "secrets", "token_hex", "randbelow", "pickle", "loads", "load", "yaml",
    "safe_load", "json", "dumps", "marshal", "open", "read", "path", "basename", "join",
    "input", "request", "argv", "environ", "getenv", "get", "password", "api_key", "token",
    "secret", "key", "shell", "Loader", "SafeLoader", "print", "eval", "exec",
)
HASH_BUCKETS = 32

_SEMANTIC_FOLDS = (
    (re.compile(r"passw(or)?d|(^|_)pwd($|_)", re.I), "password"),
    (re.compile(r"api_?key", re.I), "api_key"),
    (re.compile(r"secret", re.I), "secret"),
    (re.compile(r"token", re.I), "token"),
    (re.compile(r"(^|_)key$", re.I), "key"),
)
_NAMED = frozenset(NAMED_IDENTIFIERS)


def ident_bucket(name: str) -> str:
    """Map an identifier to its vocabulary bucket."""
    if name in _NAMED:
        return name
    for pattern, folded in _SEMANTIC_FOLDS:
        if pattern.search(name):
            return folded
    return f"#{zlib.crc32(name.encode()) % HASH_BUCKETS}"


def is_named(bucket: str) -> bool:
    return not bucket.startswith("#")


BUCKETS = tuple(NAMED_IDENTIFIERS) + tuple(f"#{i}" for i in range(HASH_BUCKETS))

AST_PLAIN = (
    "Module", "FunctionDef", "Params", "Param", "Suite", "Import", "ImportFrom", "Alias",
    "Assign", "ExprStmt", "Return", "If", "While", "For", "Try", "Except", "Finally", "With",
    "Pass", "Break", "Continue", "Raise", "Call", "Subscript", "Str", "Num", "Bool",
    "NoneLit", "List", "Tuple", "Dict",
)
AUG_OPS = ("+", "-", "*", "/", "%")
BIN_OPS = ("+", "-", "*", "/", "//", "%", "**")
CMP_OPS = ("==", "!=", "<", ">", "<=", ">=", "in", "not in", "is", "is not")
VALUE_CLASSES = ("lit", "name", "concat", "call", "other")
ARG_CLASSES = ("none", "lit", "name", "concat", "list", "other")
STMT_PLAIN = (
    "S:ENTRY", "S:EXIT", "S:If", "S:While", "S:For", "S:Try", "S:Except", "S:Finally",
    "S:With", "S:Def", "S:Import", "S:Pass", "S:Break", "S:Continue", "S:Raise",
    "S:Return", "S:Expr", "S:AugAssign", "S:Expr=call:_",
)


class VocabError(KeyError):
    pass


class NodeVocab:
    def __init__(self, labels):
        self.labels = list(labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self.index) != len(self.labels):
            raise ValueError("duplicate labels in vocabulary")

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def id(self) -> str:
        return hashlib.sha256("\n".join(self.labels).encode()).hexdigest()[:16]

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self.index

    def lookup(self, label: str) -> int:
        try:
            return self.index[label]
        except KeyError:
            raise VocabError(f"label {label!r} not in vocabulary") from None

    def save(self, path):
        Path(path).write_text("\n".join(self.labels) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NodeVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    def __eq__(self, other):
        return isinstance(other, NodeVocab) and self.labels == other.labels


def _enumerate_labels() -> list[str]:
    labels = list(AST_PLAIN)
    labels += [f"AugAssign:{op}" for op in AUG_OPS]
    labels += [f"BinOp:{op}" for op in BIN_OPS]
    labels += [f"Compare:{op}" for op in CMP_OPS]
    labels += ["BoolOp:and", "BoolOp:or", "UnaryOp:-", "UnaryOp:not"]
    for kind in ("Name", "Attr", "Kw"):
        labels += [f"{kind}:{b}" for b in BUCKETS]
    labels += list(STMT_PLAIN)
    for n in NAMED_IDENTIFIERS:
        labels.append(f"S:Assign=call:{n}")
        labels.append(f"S:Return=call:{n}")
        labels += [f"S:Expr=call:{n}/{ac}" for ac in ARG_CLASSES]
        labels += [f"S:Assign:{n}={vc}" for vc in VALUE_CLASSES]
    labels += [f"S:Assign:_={vc}" for vc in VALUE_CLASSES]
    return labels


_DEFAULT: NodeVocab | None = None


def default_vocab() -> NodeVocab:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = NodeVocab(_enumerate_labels())
    return _DEFAULT
