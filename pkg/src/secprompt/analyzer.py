"""Security analysis: a built-in CWE rule engine and an external-tool adapter."""
from __future__ import annotations

import json
import re
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

from .frontend import GraphDoc, SourceUnit, SyntaxTree, SynNode, graphs_for
from .frontend.graphs import call_args, callee_name, is_string_build
from .frontend.syntax import STATEMENT_KINDS

SUPPORTED_CWES = (22, 78, 89, 259, 327, 330, 502, 798)


class Confidence(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class AnalyzerError(Exception):
    pass


class ToolNotFound(AnalyzerError):
    pass


class ToolTimeout(AnalyzerError):
    pass


class ReportParseError(AnalyzerError):
    pass


@dataclass(frozen=True)
class Finding:
    cwe: int
    rule: str
    line: int
    confidence: Confidence
    message: str
    external: bool = False

    def to_dict(self):
        d = asdict(self)
        d["confidence"] = self.confidence.value
        return d


@dataclass
class SecurityReport:
    unit_id: str
    findings: list[Finding]
    tool: str = "builtin"
    elapsed: float = 0.0

    def __post_init__(self):
        self.findings = sorted(self.findings, key=lambda f: (f.line, f.cwe, f.rule))

    @property
    def k(self) -> int:
        return len(self.findings)

    def cwes(self) -> list[int]:
        return [f.cwe for f in self.findings]

    def to_dict(self, with_time: bool = True):
        d = {"unit_id": self.unit_id, "tool": self.tool, "k": self.k,
             "findings": [f.to_dict() for f in self.findings]}
        if with_time:
            d["elapsed"] = self.elapsed
        return d


@dataclass
class AnalyzerConfig:
    mode: str = "builtin"
    external_command: list[str] = field(
        default_factory=lambda: ["bandit", "-q", "-f", "json", "-o", "{report-file}", "{input-file}"])
    timeout: float = 30.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.mode not in ("builtin", "external"):
            raise ValueError(f"unknown analyzer mode {self.mode!r}")


def cwe_count(report: SecurityReport) -> int:
    return report.k


# -- built-in rules --------------------------------------------------------------

PASSWORD_NAME = re.compile(r"passw(or)?d|(^|_)pwd($|_)", re.I)
CREDENTIAL_NAME = re.compile(r"api_?key|token|secret|(^|_)key$|access_key", re.I)
SECURITY_NAME = re.compile(r"token|passw|pwd|secret|key|nonce|salt|otp|session|pin", re.I)

SHELL_SINKS = {"system", "popen"}
SUBPROCESS_SINKS = {"run", "call", "check_output", "check_call", "Popen"}
SQL_SINKS = {"execute", "executemany"}
WEAK_HASHES = {"md5", "sha1"}
RANDOM_FUNCS = {"random", "randint", "choice", "randrange", "getrandbits", "choices", "uniform"}
DESERIALIZERS = {"pickle", "cPickle", "marshal", "dill", "shelve"}
SOURCE_CALLS = {"input"}

SANITIZERS = {
    78: {"quote", "int", "float"},
    89: {"int", "float"},
    22: {"basename", "int"},
}


def tree_from_ast(ast: GraphDoc) -> SyntaxTree:
    """View an AST graph as a syntax tree (node ids coincide with tree indices)."""
    nodes = [SynNode(n.kind, [], n.span or (1, 1, 1, 1), n.text) for n in ast.nodes]
    for e in ast.edges:
        if e.kind.value == "child":
            nodes[e.src].children.append(e.dst)
    return SyntaxTree(nodes, 0)


class _RuleEngine:
    def __init__(self, tree: SyntaxTree, dfg: GraphDoc):
        self.t = tree
        self.dfg = dfg
        self.parent = tree.parent_map()
        self.stmt_node = {n.syn: n.id for n in dfg.nodes if n.syn is not None and n.kind not in ("ENTRY", "EXIT")}
        self.defs_into: dict[tuple[int, str], list[int]] = {}
        for e in dfg.edges:
            self.defs_into.setdefault((e.dst, e.var), []).append(e.src)
        self.findings: list[Finding] = []
        self._taint = self._compute_taint()

    # -- helpers --------------------------------------------------------------
    def stmt_of(self, i: int) -> int:
        while i in self.parent and self.t[i].kind not in STATEMENT_KINDS:
            i = self.parent[i]
        return i

    def defs_of(self, name: str, at_stmt: int) -> list[int]:
        node = self.stmt_node.get(at_stmt)
        if node is None:
            return []
        return self.defs_into.get((node, name), [])

    def def_value(self, d: int) -> tuple[int | None, str]:
        """RHS expression of a defining DFG node, or a marker for its kind."""
        node = self.dfg.nodes[d]
        if node.kind == "ENTRY":
            return None, "param"
        if node.kind == "Assign":
            return self.t[node.syn].children[1], "assign"
        if node.kind == "Import" or node.kind == "ImportFrom" or node.kind == "FunctionDef":
            return None, "binding"
        return None, "other"

    def is_call_to(self, i: int, names) -> bool:
        return self.t[i].kind == "Call" and callee_name(self.t, i) in names

    def module_of_call(self, i: int) -> str | None:
        func = self.t[self.t[i].children[0]]
        if func.kind == "Attribute":
            base = self.t[func.children[0]]
            if base.kind == "Name":
                return base.payload
        return None

    def unsafe(self, i: int, stmt: int, sanitizers, depth: int = 0) -> bool:
        """Whether expression ``i`` may carry a non-literal, unsanitized value."""
        if depth > 6:
            return True
        n = self.t[i]
        k = n.kind
        if k in ("Str", "Num", "Bool", "NoneLit"):
            return False
        if k == "Call" and callee_name(self.t, i) in sanitizers:
            return False
        if k == "Name":
            defs = self.defs_of(n.payload, stmt)
            if not defs:
                return True
            for d in defs:
                value, how = self.def_value(d)
                if how == "binding":
                    continue
                if value is None:
                    return True
                if self.unsafe(value, self.dfg.nodes[d].syn, sanitizers, depth + 1):
                    return True
            return False
        if k in ("BinOp", "List", "Tuple"):
            return any(self.unsafe(c, stmt, sanitizers, depth) for c in n.children)
        if is_string_build(self.t, i):  # "...".format(...)
            base = self.t[n.children[0]].children[0]
            parts = [base] + [c for c in n.children[1:]]
            parts = [self.t[p].children[0] if self.t[p].kind == "Keyword" else p for p in parts]
            return any(self.unsafe(p, stmt, sanitizers, depth) for p in parts)
        return True

    def dynamic_build(self, i: int, stmt: int, sanitizers, depth: int = 0) -> bool:
        """A string built from pieces at least one of which is unsafe."""
        if depth > 6:
            return False
        n = self.t[i]
        if is_string_build(self.t, i):
            return self.unsafe(i, stmt, sanitizers)
        if n.kind == "Name":
            for d in self.defs_of(n.payload, stmt):
                value, _ = self.def_value(d)
                if value is not None and self.dynamic_build(value, self.dfg.nodes[d].syn, sanitizers, depth + 1):
                    return True
        return False

    def _is_source_expr(self, i: int) -> bool:
        for j in self.t.walk(i):
            n = self.t[j]
            if n.kind == "Call" and callee_name(self.t, j) in SOURCE_CALLS:
                return True
            if n.kind in ("Name", "Attribute") and ("request" in n.payload.lower() or n.payload == "argv"):
                return True
        return False

    def _compute_taint(self) -> set[int]:
        tainted = set()
        for n in self.dfg.nodes:
            if n.kind == "ENTRY" and n.text:
                tainted.add(n.id)
            elif n.syn is not None and n.kind not in ("ENTRY", "EXIT", "FunctionDef") and self._is_source_expr(n.syn):
                tainted.add(n.id)
        changed = True
        while changed:
            changed = False
            for e in self.dfg.edges:
                if e.src in tainted and e.dst not in tainted and self.dfg.nodes[e.dst].kind != "FunctionDef":
                    tainted.add(e.dst)
                    changed = True
        return tainted

    def tainted_operand(self, i: int, stmt: int) -> bool:
        if self._is_source_expr(i):
            return True
        for j in self.t.walk(i):
            if self.t[j].kind == "Name":
                if any(d in self._taint for d in self.defs_of(self.t[j].payload, stmt)):
                    return True
        return False

    def add(self, cwe, rule, node, confidence, message):
        self.findings.append(Finding(cwe, rule, self.t[node].span[0], confidence, message))

    def taint_conf(self, operand, stmt) -> Confidence:
        return Confidence.HIGH if self.tainted_operand(operand, stmt) else Confidence.LOW

    # -- rules ----------------------------------------------------------------
    def run(self) -> list[Finding]:
        for i, n in enumerate(self.t.nodes):
            if n.kind == "Call":
                self.check_call(i)
            elif n.kind == "Assign":
                self.check_assign(i)
        return self.findings

    def check_call(self, i: int):
        t = self.t
        name = callee_name(t, i)
        if name is None:
            return
        stmt = self.stmt_of(i)
        pos, kw = call_args(t, i)
        first = pos[0] if pos else None
        module = self.module_of_call(i)

        if name in SHELL_SINKS and first is not None:
            if self.unsafe(first, stmt, SANITIZERS[78]):
                self.add(78, "R-078", i, self.taint_conf(first, stmt),
                         f"shell command built from non-literal data passed to {name}()")
        elif name in SUBPROCESS_SINKS and (module in (None, "subprocess")):
            shell = kw.get("shell")
            if shell is not None and t[shell].kind == "Bool" and t[shell].payload == "True":
                operand = first if first is not None else shell
                self.add(78, "R-078", i, self.taint_conf(operand, stmt),
                         f"{name}() invoked with shell=True")
            elif first is not None and self.dynamic_build(first, stmt, SANITIZERS[78]):
                self.add(78, "R-078", i, self.taint_conf(first, stmt),
                         f"{name}() command built by string concatenation")

        if name in SQL_SINKS and first is not None:
            if self.dynamic_build(first, stmt, SANITIZERS[89]):
                self.add(89, "R-089", i, self.taint_conf(first, stmt),
                         "SQL query built from non-literal data")

        if name in WEAK_HASHES and module in (None, "hashlib"):
            self.add(327, "R-327", i, Confidence.MEDIUM, f"weak hash function {name}")
        elif name == "new" and module == "hashlib" and first is not None and t[first].kind == "Str":
            if re.search(r"md5|sha1", t[first].payload, re.I):
                self.add(327, "R-327", i, Confidence.MEDIUM, "weak hash via hashlib.new")
        elif name == "new" and module in ("DES", "DES3", "ARC4", "Blowfish"):
            self.add(327, "R-327", i, Confidence.MEDIUM, f"weak cipher {module}")

        if name in ("loads", "load") and module in DESERIALIZERS:
            operand = first if first is not None else i
            self.add(502, "R-502", i, self.taint_conf(operand, stmt),
                     f"unsafe deserialization with {module}.{name}")
        elif name in ("load", "load_all") and module == "yaml":
            loader = kw.get("Loader")
            safe = loader is not None and any("Safe" in t[j].payload for j in t.walk(loader))
            if not safe:
                operand = first if first is not None else i
                self.add(502, "R-502", i, self.taint_conf(operand, stmt),
                         "yaml.load without a safe loader")

        if name == "open" and module in (None, "io", "os") and first is not None:
            if self.dynamic_build(first, stmt, SANITIZERS[22]):
                self.add(22, "R-022", i, self.taint_conf(first, stmt),
                         "file path built from non-literal data")

        for kname, value in kw.items():
            self._credential_check(kname, value, i)

    def _credential_check(self, name: str, value: int, anchor: int):
        n = self.t[value]
        if n.kind != "Str" or _string_value(n.payload) == "":
            return
        if PASSWORD_NAME.search(name):
            self.add(259, "R-259", anchor, Confidence.MEDIUM, f"hard-coded password in {name}")
        elif CREDENTIAL_NAME.search(name):
            self.add(798, "R-798", anchor, Confidence.MEDIUM, f"hard-coded credential in {name}")

    def check_assign(self, i: int):
        t = self.t
        target, value = t[i].children
        if t[target].kind not in ("Name", "Attribute"):
            return
        name = t[target].payload
        self._credential_check(name, value, i)
        if SECURITY_NAME.search(name):
            for j in t.walk(value):
                if t[j].kind == "Call" and callee_name(t, j) in RANDOM_FUNCS:
                    mod = self.module_of_call(j)
                    if mod in (None, "random"):
                        self.add(330, "R-330", i, Confidence.MEDIUM,
                                 f"non-cryptographic RNG assigned to {name}")
                        break


def _string_value(lexeme: str) -> str:
    body = lexeme.lstrip("rRbBuU")
    q = 3 if body[:3] in ('"""', "'''") else 1
    return body[q:-q]


def analyze_builtin(unit: SourceUnit, ast: GraphDoc, dfg: GraphDoc) -> SecurityReport:
    start = time.perf_counter()
    tree = tree_from_ast(ast)
    findings = _RuleEngine(tree, dfg).run()
    unique = {(f.cwe, f.rule, f.line, f.message): f for f in findings}
    return SecurityReport(unit.id, list(unique.values()), "builtin", time.perf_counter() - start)


# -- external analyzer -------------------------------------------------------------

def _parse_external_report(text: str, unit_id: str, n_lines: int) -> list[Finding]:
    try:
        doc = json.loads(text)
        results = doc["results"]
        findings = []
        for r in results:
            cwe = r.get("issue_cwe", {}) or {}
            conf = str(r.get("issue_confidence", "low")).lower()
            if conf not in ("low", "medium", "high"):
                conf = "low"
            line = int(r["line_number"])
            findings.append(Finding(int(cwe.get("id", 0)), str(r.get("test_id", "")),
                                    max(1, min(line, max(n_lines, 1))), Confidence(conf),
                                    str(r.get("issue_text", "")), external=True))
        return findings
    except (ValueError, KeyError, TypeError) as exc:
        raise ReportParseError(f"cannot parse analyzer report: {exc}") from exc


def analyze_external(unit: SourceUnit, cfg: AnalyzerConfig) -> SecurityReport:
    start = time.perf_counter()
    with tempfile.TemporaryDirectory(prefix="secprompt-") as tmp:
        src = Path(tmp) / "unit.py"
        report = Path(tmp) / "report.json"
        src.write_text(unit.text, encoding="utf-8")
        argv = [a.replace("{input-file}", str(src)).replace("{report-file}", str(report))
                for a in cfg.external_command]
        try:
            subprocess.run(argv, capture_output=True, timeout=cfg.timeout, check=False)
        except FileNotFoundError as exc:
            raise ToolNotFound(f"analyzer not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise ToolTimeout(f"analyzer exceeded {cfg.timeout}s") from exc
        if not report.exists():
            raise ReportParseError("analyzer wrote no report")
        findings = _parse_external_report(report.read_text(encoding="utf-8"), unit.id,
                                          len(unit.text.splitlines()))
    return SecurityReport(unit.id, findings, "external", time.perf_counter() - start)


def analyze(unit: SourceUnit, cfg: AnalyzerConfig | None = None) -> SecurityReport:
    """Analyze ``unit`` with the configured tool."""
    cfg = cfg or AnalyzerConfig()
    if cfg.mode == "external":
        return analyze_external(unit, cfg)
    _, ast, _, dfg = graphs_for(unit)
    return analyze_builtin(unit, ast, dfg)


class Analyzer:
    """Callable wrapper that counts analyses for cost accounting."""

    def __init__(self, cfg: AnalyzerConfig | None = None):
        self.cfg = cfg or AnalyzerConfig()
        self.calls = 0
        self.seconds = 0.0

    def __call__(self, unit: SourceUnit) -> SecurityReport:
        self.calls += 1
        report = analyze(unit, self.cfg)
        self.seconds += report.elapsed
        return report
