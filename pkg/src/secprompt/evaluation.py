"""Metrics and studies: graph edit distance, similarity, fuzz-differential tests, costs, reports."""
from __future__ import annotations

import csv
import heapq
import itertools
import json
import math
import os
import random
import subprocess
import sys
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.optimize import linear_sum_assignment

from .frontend import GraphDoc, GraphKind, SourceUnit
from .frontend.graphs import build_graph
from .templates import CodeContext

EXACT_LIMIT = 12


class SizeLimitExceeded(ValueError):
    pass


@dataclass(frozen=True)
class GedCosts:
    node_insert: float = 1.0
    node_delete: float = 1.0
    node_relabel: float = 1.0
    edge_insert: float = 1.0
    edge_delete: float = 1.0
    edge_relabel: float = 1.0


UNIT = GedCosts()


@dataclass
class GedResult:
    distance: float
    exact: bool
    node_ops: int = 0
    edge_ops: int = 0


@dataclass
class LabeledGraph:
    """Directed multigraph with node labels and edge kinds, the GED working form."""

    labels: list
    edges: dict = field(default_factory=dict)  # (u, v) -> Counter of kinds

    @classmethod
    def of(cls, g) -> "LabeledGraph":
        if isinstance(g, LabeledGraph):
            return g
        if isinstance(g, GraphDoc):
            edges: dict = {}
            for e in g.edges:
                edges.setdefault((e.src, e.dst), Counter())[e.kind.value] += 1
            return cls([n.label for n in g.nodes], edges)
        labels, edge_list = g
        edges = {}
        for u, v, *kind in edge_list:
            kind = kind[0] if kind else ""
            edges.setdefault((u, v), Counter())[kind] += 1
        return cls(list(labels), edges)

    def __len__(self):
        return len(self.labels)

    def pair(self, u, v) -> Counter:
        return self.edges.get((u, v), Counter())


def _pair_cost(a: Counter, b: Counter, c: GedCosts) -> tuple[float, int]:
    """Cost of turning the edge multiset ``a`` into ``b`` on one node pair."""
    na, nb = sum(a.values()), sum(b.values())
    same = sum((a & b).values())
    relabel = min(na, nb) - same
    cost = relabel * c.edge_relabel + max(na - nb, 0) * c.edge_delete + max(nb - na, 0) * c.edge_insert
    return cost, relabel + abs(na - nb)


def mapping_cost(g1: LabeledGraph, g2: LabeledGraph, mapping: list, c: GedCosts = UNIT
                 ) -> tuple[float, int, int]:
    """Total cost of the edit path induced by ``mapping`` (g1 node -> g2 node or None)."""
    node_cost, node_ops = 0.0, 0
    used = set()
    for u, v in enumerate(mapping):
        if v is None:
            node_cost += c.node_delete
            node_ops += 1
        else:
            used.add(v)
            if g1.labels[u] != g2.labels[v]:
                node_cost += c.node_relabel
                node_ops += 1
    inserted = [v for v in range(len(g2)) if v not in used]
    node_cost += c.node_insert * len(inserted)
    node_ops += len(inserted)
    edge_cost, edge_ops = 0.0, 0
    seen = set()
    for (u, v), kinds in g1.edges.items():
        mu, mv = mapping[u], mapping[v]
        other = g2.pair(mu, mv) if mu is not None and mv is not None else Counter()
        cst, ops = _pair_cost(kinds, other, c)
        edge_cost += cst
        edge_ops += ops
        if mu is not None and mv is not None:
            seen.add((mu, mv))
    for (x, y), kinds in g2.edges.items():
        if (x, y) in seen:
            continue
        cst, ops = _pair_cost(Counter(), kinds, c)
        edge_cost += cst
        edge_ops += ops
    return node_cost + edge_cost, node_ops, edge_ops


def _edge_mass(g: LabeledGraph, nodes: set) -> int:
    return sum(sum(k.values()) for (u, v), k in g.edges.items() if u in nodes or v in nodes)


def ged_exact(g1, g2, costs: GedCosts = UNIT, limit: int = EXACT_LIMIT) -> GedResult:
    """Best-first search over partial node assignments with an admissible lower bound."""
    a, b = LabeledGraph.of(g1), LabeledGraph.of(g2)
    if max(len(a), len(b)) > limit:
        raise SizeLimitExceeded(f"exact GED is limited to {limit} nodes")
    scale_n = min(costs.node_insert, costs.node_delete, costs.node_relabel)
    scale_e = min(costs.edge_insert, costs.edge_delete, costs.edge_relabel)
    order = sorted(range(len(a)), key=lambda u: -_edge_mass(a, {u}))
    upper = ged_approx(a, b, costs).distance  # prunes the search; always reachable

    def bound(depth: int, used: frozenset) -> float:
        rest1 = [order[i] for i in range(depth, len(order))]
        rest2 = [v for v in range(len(b)) if v not in used]
        la, lb = Counter(a.labels[u] for u in rest1), Counter(b.labels[v] for v in rest2)
        nodes = max(len(rest1), len(rest2)) - sum((la & lb).values())
        edges = abs(_edge_mass(a, set(rest1)) - _edge_mass(b, set(rest2)))
        return nodes * scale_n + edges * scale_e

    def step_cost(depth: int, assign: dict, u: int, v) -> float:
        cost = 0.0
        if v is None:
            cost += costs.node_delete
        elif a.labels[u] != b.labels[v]:
            cost += costs.node_relabel
        prior = [order[i] for i in range(depth)] + [u]
        for w in prior:
            mw = v if w == u else assign[w]
            pairs = [(u, w), (w, u)] if w != u else [(u, u)]
            for x, y in pairs:
                mx = v if x == u else mw
                my = v if y == u else mw
                other = b.pair(mx, my) if mx is not None and my is not None else Counter()
                cost += _pair_cost(a.pair(x, y), other, costs)[0]
        return cost

    def completion(used: frozenset) -> float:
        rest = [v for v in range(len(b)) if v not in used]
        cost = costs.node_insert * len(rest)
        rs = set(rest)
        for (x, y), kinds in b.edges.items():
            if x in rs or y in rs:
                cost += _pair_cost(Counter(), kinds, costs)[0]
        return cost

    tie = itertools.count()
    heap = [(bound(0, frozenset()), next(tie), 0.0, 0, (), frozenset(), False)]
    while heap:
        f, _, g, depth, assigned, used, complete = heapq.heappop(heap)
        if complete:
            return _result(a, b, order, assigned, costs)
        if depth == len(order):
            total = g + completion(used)
            heapq.heappush(heap, (total, next(tie), total, depth, assigned, used, True))
            continue
        u = order[depth]
        assign = dict(zip(order, assigned))
        for v in [*(v for v in range(len(b)) if v not in used), None]:
            ng = g + step_cost(depth, assign, u, v)
            nused = used | {v} if v is not None else used
            nf = ng + bound(depth + 1, nused)
            if nf <= upper + 1e-9:
                heapq.heappush(heap, (nf, next(tie), ng, depth + 1, assigned + (v,), nused, False))
    raise AssertionError("search exhausted without reaching the approximate bound")


def _result(a, b, order, assigned, costs) -> GedResult:
    mapping = [None] * len(a)
    for u, v in zip(order, assigned):
        mapping[u] = v
    d, n_ops, e_ops = mapping_cost(a, b, mapping, costs)
    return GedResult(d, True, n_ops, e_ops)


def _approx_mapping(a: LabeledGraph, b: LabeledGraph, costs: GedCosts) -> list:
    n, m = len(a), len(b)
    deg_a = [_edge_mass(a, {u}) for u in range(n)]
    deg_b = [_edge_mass(b, {v}) for v in range(m)]
    big = 1e9
    C = np.zeros((n + m, n + m))
    for u in range(n):
        for v in range(m):
            C[u, v] = (costs.node_relabel if a.labels[u] != b.labels[v] else 0.0) + \
                abs(deg_a[u] - deg_b[v]) * 0.5 * min(costs.edge_insert, costs.edge_delete)
    C[:n, m:] = big
    for u in range(n):
        C[u, m + u] = costs.node_delete + deg_a[u] * 0.5 * costs.edge_delete
    C[n:, :m] = big
    for v in range(m):
        C[n + v, v] = costs.node_insert + deg_b[v] * 0.5 * costs.edge_insert
    rows, cols = linear_sum_assignment(C)
    mapping = [None] * n
    for r, c in zip(rows, cols):
        if r < n and c < m:
            mapping[r] = int(c)
    return mapping


def _candidate_mappings(a, b, costs):
    fwd = _approx_mapping(a, b, costs)
    back = _approx_mapping(b, a, costs)
    inv = [None] * len(a)
    for v, u in enumerate(back):
        if u is not None:
            inv[u] = v
    return [fwd, inv]


def ged_approx(g1, g2, costs: GedCosts = UNIT) -> GedResult:
    """Upper bound from an optimal bipartite node assignment, best of both directions."""
    a, b = LabeledGraph.of(g1), LabeledGraph.of(g2)
    best = None
    for m in _candidate_mappings(a, b, costs):
        r = mapping_cost(a, b, m, costs)
        if best is None or r[0] < best[0] - 1e-12:
            best = r
    return GedResult(best[0], False, best[1], best[2])


def ged(g1, g2, costs: GedCosts = UNIT, limit: int = EXACT_LIMIT) -> GedResult:
    a, b = LabeledGraph.of(g1), LabeledGraph.of(g2)
    if max(len(a), len(b)) <= limit:
        return ged_exact(a, b, costs, limit)
    return ged_approx(a, b, costs)


# -- similarity and the version study -------------------------------------------------------------

def similarity(g1: GraphDoc, g2: GraphDoc, encoder) -> float:
    from .ggan import embedding_similarity
    if g1.vocab_id != g2.vocab_id:
        raise ValueError("graphs were built against different vocabularies")
    return embedding_similarity(encoder, g1, g2)


def _graph(unit: SourceUnit, kind) -> GraphDoc:
    ctx = CodeContext(unit)
    return build_graph(ctx.tree, ctx.vocab, kind)


def inter_intra_study(original: SourceUnit, versions: list[SourceUnit], kind: GraphKind | str = GraphKind.CFG,
                      costs: GedCosts = UNIT, limit: int = EXACT_LIMIT) -> tuple[float, float]:
    """Mean GED original-to-version and mean pairwise GED among versions."""
    if len(versions) < 2:
        raise ValueError("need at least two secure versions")
    g0 = _graph(original, kind)
    gs = [_graph(v, kind) for v in versions]
    exact = max(len(g.nodes) for g in [g0, *gs]) <= limit
    dist = (lambda x, y: ged_exact(x, y, costs, limit).distance) if exact else \
        (lambda x, y: ged_approx(x, y, costs).distance)
    inter = float(np.mean([dist(g0, g) for g in gs]))
    intra = float(np.mean([dist(x, y) for x, y in itertools.combinations(gs, 2)]))
    return inter, intra


# -- fuzz-differential testing ----------------------------------------------------------------

class ExecutionError(RuntimeError):
    pass


class TrialTimeout(RuntimeError):
    pass


@dataclass
class FuzzSpec:
    entrypoint: str
    params: list[dict]
    trials: int = 1000
    threshold: float = 0.01
    timeout: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        for p in self.params:
            if p.get("kind") not in ("int", "real", "str"):
                raise ValueError(f"unknown parameter domain {p!r}")

    @classmethod
    def load(cls, path) -> "FuzzSpec":
        return cls(**json.loads(Path(path).read_text("utf-8")))

    def inputs(self) -> list[list]:
        rng = random.Random(self.seed)
        out = []
        for _ in range(self.trials):
            row = []
            for p in self.params:
                if p["kind"] == "int":
                    row.append(rng.randint(p.get("low", -100), p.get("high", 100)))
                elif p["kind"] == "real":
                    row.append(rng.uniform(p.get("low", -1.0), p.get("high", 1.0)))
                else:
                    alphabet = p.get("alphabet", "abcdefghijklmnopqrstuvwxyz0123456789")
                    n = rng.randint(p.get("min_len", 0), p.get("max_len", 12))
                    row.append("".join(rng.choice(alphabet) for _ in range(n)))
            out.append(row)
        return out


@dataclass
class FuzzResult:
    mean_abs_diff: float
    passed: bool
    failures: list[dict] = field(default_factory=list)
    trials: int = 0

    def to_dict(self):
        return asdict(self)


_RUNNER = r'''
import json, signal, sys, types
try:
    import resource
    resource.setrlimit(resource.RLIMIT_AS, (1 << 30, 1 << 30))
except Exception:
    pass
import socket
def _blocked(*a, **k):
    raise OSError("network disabled in fuzz sandbox")
socket.socket = _blocked
socket.create_connection = _blocked
class _Timeout(Exception):
    pass
def _alarm(signum, frame):
    raise _Timeout()
signal.signal(signal.SIGALRM, _alarm)
path, entry, timeout = sys.argv[1], sys.argv[2], float(sys.argv[3])
mod = types.ModuleType("subject")
src = open(path, encoding="utf-8").read()
try:
    exec(compile(src, path, "exec"), mod.__dict__)
    fn = getattr(mod, entry)
except Exception as exc:
    print(json.dumps({"fatal": type(exc).__name__ + ": " + str(exc)}))
    sys.exit(0)
def flat(x, out):
    if isinstance(x, bool):
        out.append(int(x))
    elif isinstance(x, (int, float)):
        out.append(x)
    elif isinstance(x, (list, tuple)):
        for y in x:
            flat(y, out)
    elif isinstance(x, dict):
        for key in sorted(x, key=repr):
            flat(key, out)
            flat(x[key], out)
    else:
        out.append(str(x))
    return out
for line in sys.stdin:
    args = json.loads(line)
    signal.setitimer(signal.ITIMER_REAL, timeout)
    try:
        res = {"ok": flat(fn(*args), [])}
    except _Timeout:
        res = {"timeout": True}
    except Exception as exc:
        res = {"error": type(exc).__name__}
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
    print(json.dumps(res), flush=True)
'''


def _run_trials(unit: SourceUnit, spec: FuzzSpec, inputs: list[list]) -> list[dict]:
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "subject.py"
        src.write_text(unit.text, "utf-8")
        runner = Path(tmp) / "runner.py"
        runner.write_text(_RUNNER, "utf-8")
        payload = "".join(json.dumps(x) + "\n" for x in inputs)
        env = {"PATH": os.environ.get("PATH", ""), "PYTHONHASHSEED": "0"}
        try:
            proc = subprocess.run([sys.executable, "-I", str(runner), str(src), spec.entrypoint, str(spec.timeout)],
                                  input=payload, capture_output=True, text=True, cwd=tmp, env=env,
                                  timeout=spec.timeout * len(inputs) + 10)
        except subprocess.TimeoutExpired as exc:
            raise TrialTimeout("fuzz worker exceeded its wall-clock budget") from exc
    rows = [json.loads(x) for x in proc.stdout.splitlines() if x.strip()]
    if rows and "fatal" in rows[0]:
        raise ExecutionError(rows[0]["fatal"])
    if len(rows) != len(inputs):
        raise ExecutionError(f"fuzz worker died after {len(rows)} trials: {proc.stderr.strip()[-200:]}")
    return rows


def _element_diff(x, y) -> float:
    if isinstance(x, str) or isinstance(y, str):
        return 0.0 if x == y else 1.0
    d = abs(float(x) - float(y))
    return d if math.isfinite(d) else (0.0 if x == y else 1.0)


def _trial_diff(r1: dict, r2: dict) -> tuple[float, str | None]:
    if "ok" in r1 and "ok" in r2:
        a, b = r1["ok"], r2["ok"]
        if len(a) != len(b):
            return 1.0, "length mismatch"
        if not a:
            return 0.0, None
        return float(np.mean([_element_diff(x, y) for x, y in zip(a, b)])), None
    if "error" in r1 and r1 == r2:
        return 0.0, None  # both programs reject the input the same way
    return 1.0, "timeout" if ("timeout" in r1 or "timeout" in r2) else "execution error"


def fuzz_compare(orig: SourceUnit, new: SourceUnit, spec: FuzzSpec) -> FuzzResult:
    inputs = spec.inputs()
    r1 = _run_trials(orig, spec, inputs)
    r2 = _run_trials(new, spec, inputs)
    diffs, failures = [], []
    for args, a, b in zip(inputs, r1, r2):
        d, why = _trial_diff(a, b)
        diffs.append(d)
        if (why or d > 0) and len(failures) < 10:
            failures.append({"input": args, "diff": d, "reason": why or "output differs"})
    mean = float(np.mean(diffs))
    return FuzzResult(mean, mean < spec.threshold, failures, len(inputs))


# -- costs and reports --------------------------------------------------------------------------

@dataclass
class CostSummary:
    overall_seconds: float = 0.0
    llm_queries: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    llm_seconds: float = 0.0
    analyses: int = 0
    analysis_seconds: float = 0.0

    def __add__(self, other: "CostSummary") -> "CostSummary":
        return CostSummary(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))

    def to_dict(self):
        return asdict(self)


def cost_summary(ledger) -> CostSummary:
    s = CostSummary()
    for t in ledger.traces:
        s = s + CostSummary(t.elapsed, t.llm_queries, t.input_tokens, t.output_tokens, t.llm_seconds,
                            t.analyses, t.analysis_seconds)
    return s


TRACE_COLUMNS = ("iteration", "cycle", "template", "k", "similarity", "ged", "llm_queries", "analyses",
                 "input_tokens", "output_tokens", "elapsed", "error")


def cwe_histogram(reports_or_findings) -> Counter:
    c = Counter()
    for fs in reports_or_findings:
        for f in fs:
            c[f["cwe"] if isinstance(f, dict) else f.cwe] += 1
    return c


def bar_chart_svg(title: str, categories: list[str], series: dict[str, list[float]]) -> str:
    width, height, pad = max(320, 60 + 48 * len(categories) * max(1, len(series))), 260, 40
    top = max([v for vals in series.values() for v in vals] + [1])
    colors = ["#4c78a8", "#f58518", "#54a24b", "#e45756"]
    inner_w = width - 2 * pad
    group = inner_w / max(1, len(categories))
    bar = group / (len(series) + 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>']
    for si, (name, vals) in enumerate(series.items()):
        for ci, v in enumerate(vals):
            h = (height - 2 * pad - 20) * v / top
            x = pad + ci * group + (si + 0.5) * bar
            parts.append(f'<rect x="{x:.1f}" y="{height - pad - h:.1f}" width="{bar:.1f}" height="{h:.1f}" '
                         f'fill="{colors[si % len(colors)]}"><title>{escape(name)}: {v:g}</title></rect>')
        parts.append(f'<text x="{width - pad}" y="{34 + 14 * si}" text-anchor="end" font-size="11" '
                     f'fill="{colors[si % len(colors)]}">{escape(name)}</text>')
    for ci, cat in enumerate(categories):
        x = pad + (ci + 0.5) * group
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 16}" text-anchor="middle" font-size="10">'
                     f'{escape(cat)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(ledgers, out_dir) -> list[Path]:
    """Per-run CSVs, a corpus CSV with before/after histograms, and SVG bar charts."""
    ledgers = list(ledgers)
    if not ledgers:
        raise ValueError("need at least one ledger")
    out = Path(out_dir)
    (out / "charts").mkdir(parents=True, exist_ok=True)
    written = []
    for led in ledgers:
        p = out / f"{led.run_id}.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for t in led.traces:
                w.writerow([getattr(t, c) if getattr(t, c) is not None else "" for c in TRACE_COLUMNS])
        written.append(p)
    before = cwe_histogram(led.traces[0].findings for led in ledgers if led.traces)
    after = cwe_histogram(led.best.findings for led in ledgers if led.best)
    p = out / "corpus.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "status", "initial_k", "best_k", "final_k", "iterations", "best_similarity"])
        for led in ledgers:
            first, best, last = led.traces[0] if led.traces else None, led.best, led.final
            w.writerow([led.run_id, led.status.value, first.k if first else "", best.k if best else "",
                        last.k if last else "", len(led.traces), f"{best.similarity:.6f}" if best else ""])
    written.append(p)
    p = out / "cwe_histogram.csv"
    cwes = sorted(set(before) | set(after))
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cwe", "before", "after"])
        for c in cwes:
            w.writerow([c, before[c], after[c]])
    written.append(p)
    svg = out / "charts" / "cwe_histogram.svg"
    svg.write_text(bar_chart_svg("CWE findings before and after", [f"CWE-{c}" for c in cwes],
                            {"before": [before[c] for c in cwes], "after": [after[c] for c in cwes]}), "utf-8")
    written.append(svg)
    svg = out / "charts" / "k_per_code.svg"
    names = [led.run_id for led in ledgers]
    svg.write_text(bar_chart_svg("CWE count per code", names,
                            {"initial": [led.traces[0].k if led.traces else 0 for led in ledgers],
                             "best": [led.best.k if led.best else 0 for led in ledgers]}), "utf-8")
    written.append(svg)
    return written
