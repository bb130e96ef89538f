"""The prompt-optimization loop, its baselines and ablations."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

from .analyzer import SUPPORTED_CWES, Analyzer, AnalyzerError, Confidence, Finding, SecurityReport
from .frontend import GraphKind, SourceUnit
from .frontend.graphs import build_graph
from .frontend.syntax import ParseError
from .frontend.lexer import LexError
from .ggan import GganModel, embedding_similarity, generate
from .llm import LlmClient, LlmError, PromptRecord, generate_code, infer_prompt, render_bl_template
from .edits import DecodeError
from .reconstruct import ProvenanceLost, ReconstructionError, SpanNotFound, reconstruct
from .templates import CodeContext

log = logging.getLogger(__name__)
_run_ids = itertools.count(1)


class Mode(str, Enum):
    PROMSEC = "promsec"
    BL1 = "bl1"
    BL2 = "bl2"
    A1 = "a1-no-ggan"
    A2 = "a2-no-llm"


class Status(str, Enum):
    SECURED = "secured"
    EXHAUSTED = "budget-exhausted"
    ERROR = "error"


class EmptyTrainingSet(ValueError):
    pass


@dataclass
class LoopConfig:
    epsilon: int = 0
    max_iters: int = 20
    mode: Mode = Mode.PROMSEC
    alpha: float = 1.0
    beta: float = 1.0
    graph_kind: GraphKind = GraphKind.CFG
    max_failures: int = 3

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.graph_kind = GraphKind(self.graph_kind.upper() if isinstance(self.graph_kind, str) else self.graph_kind)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d["graph_kind"] = self.graph_kind.value
        return d


@dataclass
class IterationTrace:
    iteration: int
    prompt: dict | None
    unit_hash: str
    k: int
    findings: list[dict]
    similarity: float
    ged: float
    llm_queries: int = 0
    analyses: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    elapsed: float = 0.0
    llm_seconds: float = 0.0
    analysis_seconds: float = 0.0
    template: int | None = None
    cycle: int | None = None
    best_k: int | None = None
    error: str | None = None
    code: str = field(default="", repr=False)

    def to_dict(self, with_code: bool = False):
        d = asdict(self)
        if not with_code:
            d.pop("code")
        return d


@dataclass
class RunLedger:
    run_id: str
    config: dict
    traces: list[IterationTrace] = field(default_factory=list)
    status: Status = Status.EXHAUSTED
    bootstrap: dict = field(default_factory=dict)
    original: str = field(default="", repr=False)

    @property
    def best_index(self) -> int | None:
        if not self.traces:
            return None
        scored = [(t.k, -t.similarity, i) for i, t in enumerate(self.traces) if t.error is None]
        if not scored:
            return None
        return min(scored)[2]

    @property
    def best(self) -> IterationTrace | None:
        i = self.best_index
        return None if i is None else self.traces[i]

    @property
    def final(self) -> IterationTrace | None:
        return self.traces[-1] if self.traces else None

    def llm_queries(self) -> int:
        return sum(t.llm_queries for t in self.traces)

    def analyses(self) -> int:
        return sum(t.analyses for t in self.traces)

    def header(self) -> dict:
        return {"run_id": self.run_id, "config": self.config, "status": self.status.value,
                "best_index": self.best_index, "bootstrap": self.bootstrap}

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(t.to_dict(), sort_keys=True) for t in self.traces]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_jsonl(), "utf-8")

    @classmethod
    def read(cls, path) -> "RunLedger":
        rows = [json.loads(x) for x in Path(path).read_text("utf-8").splitlines() if x.strip()]
        head = rows[0]
        traces = [IterationTrace(**r) for r in rows[1:]]
        return cls(head["run_id"], head["config"], traces, Status(head["status"]), head.get("bootstrap", {}))


# -- shared plumbing ------------------------------------------------------------------------

class _Run:
    """Book-keeping for one run: original code, cost deltas, similarity references."""

    def __init__(self, cfg: LoopConfig, client: LlmClient | None, analyzer: Analyzer,
                 model: GganModel | None, run_id: str | None):
        self.cfg = cfg
        self.client = client
        self.analyzer = analyzer
        self.model = model or _reference_encoder()
        self.ledger = RunLedger(run_id or f"{cfg.mode.value}-{next(_run_ids):04d}", cfg.to_dict())
        self.failures = 0
        self._mark = len(client.log) if client else 0
        self._ref_ast = None
        self._ref_cfg = None

    # costs since the previous mark
    def take_costs(self) -> dict:
        if self.client is None:
            return {"llm_queries": 0, "input_tokens": 0, "output_tokens": 0, "llm_seconds": 0.0}
        new = self.client.log.since(self._mark)
        self._mark = len(self.client.log)
        return {"llm_queries": len(new), "input_tokens": sum(e.input_tokens for e in new),
                "output_tokens": sum(e.output_tokens for e in new),
                "llm_seconds": sum(e.latency for e in new)}

    def start(self, source) -> tuple[SourceUnit, PromptRecord | None]:
        t0 = time.perf_counter()
        prompt = None
        if isinstance(source, str):
            source = PromptRecord(source)
        if isinstance(source, PromptRecord):
            if self.client is None:
                raise ValueError("a prompt input needs an LLM client")
            prompt = source
            unit = generate_code(self.client, prompt)
            self.ledger.bootstrap = self.take_costs() | {"elapsed": time.perf_counter() - t0,
                                                          "prompt": prompt.to_dict()}
        else:
            unit = source
        self.ledger.original = unit.text
        self._set_reference(unit)
        return unit, prompt

    def _set_reference(self, unit: SourceUnit):
        ctx = CodeContext(unit, vocab=self.model.vocab)
        self._ref_ast = build_graph(ctx.tree, self.model.vocab, GraphKind.AST)
        self._ref_cfg = ctx.cfg

    def analyze(self, unit: SourceUnit) -> tuple[SecurityReport, float]:
        t0 = time.perf_counter()
        report = self.analyzer(unit)
        return report, time.perf_counter() - t0

    def distances(self, unit: SourceUnit) -> tuple[float, float]:
        from .evaluation import ged_approx
        try:
            ctx = CodeContext(unit, vocab=self.model.vocab)
            ast = build_graph(ctx.tree, self.model.vocab, GraphKind.AST)
        except (ParseError, LexError):
            return 0.0, float("nan")
        return embedding_similarity(self.model, self._ref_ast, ast), ged_approx(self._ref_cfg, ctx.cfg).distance

    def trace(self, iteration, unit, report, analysis_s, t0, prompt=None, analyses=1, **extra) -> IterationTrace:
        S, d = self.distances(unit)
        costs = self.take_costs()
        t = IterationTrace(iteration, prompt.to_dict() if prompt else None,
                           hashlib.sha256(unit.text.encode()).hexdigest()[:16], report.k,
                           [f.to_dict() for f in report.findings], S, d, analyses=analyses,
                           analysis_seconds=analysis_s, elapsed=time.perf_counter() - t0, code=unit.text,
                           **costs, **extra)
        self.ledger.traces.append(t)
        return t

    def fail(self, exc: Exception) -> bool:
        """Record a failure; True when the run must abort."""
        self.failures += 1
        log.warning("iteration failed: %s: %s", type(exc).__name__, exc)
        if self.failures >= self.cfg.max_failures:
            self.ledger.status = Status.ERROR
            return True
        return False

    def best_unit(self) -> SourceUnit | None:
        b = self.ledger.best
        return SourceUnit(b.code) if b else None

    def finish(self) -> RunLedger:
        if self.ledger.status is not Status.ERROR:
            secured = any(t.k <= self.cfg.epsilon for t in self.ledger.traces if t.error is None)
            # BL2 skips every cycle when the starting code is already clean
            secured = secured or self.ledger.bootstrap.get("k", self.cfg.epsilon + 1) <= self.cfg.epsilon
            self.ledger.status = Status.SECURED if secured else Status.EXHAUSTED
        return self.ledger


_ENCODER: GganModel | None = None


def _reference_encoder() -> GganModel:
    """Fixed untrained encoder used for similarity when a mode runs without a trained model."""
    global _ENCODER
    if _ENCODER is None:
        _ENCODER = GganModel(seed=0)
    return _ENCODER


_STEP_ERRORS = (LlmError, ParseError, LexError, AnalyzerError, DecodeError, ReconstructionError,
                ProvenanceLost, SpanNotFound, ValueError)


def _ggan_fix(run: _Run, unit: SourceUnit) -> SourceUnit:
    model = run.model
    sample = model.sample(unit)
    plan, gh = generate(model, sample)
    return reconstruct(unit, sample.g, gh, sample.bank, model.vocab).unit


def _iterate(source, cfg: LoopConfig, client, analyzer, model, run_id, step) -> RunLedger:
    """Shared analyze-then-step loop for promsec and the two ablations."""
    run = _Run(cfg, client, analyzer, model, run_id)
    current, _ = run.start(source)
    prompt = None
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        report, a_s = run.analyze(current)
        if report.k <= cfg.epsilon:
            run.trace(it, current, report, a_s, t0, prompt)
            break
        try:
            nxt, new_prompt = step(run, current, it, prompt)
        except _STEP_ERRORS as exc:
            run.trace(it, current, report, a_s, t0, prompt, error=f"{type(exc).__name__}: {exc}")
            if run.fail(exc):
                break
            current = run.best_unit() or current
            continue
        run.failures = 0
        run.trace(it, current, report, a_s, t0, prompt)
        current, prompt = nxt, new_prompt
    return run.finish()


def _promsec_step(run: _Run, unit: SourceUnit, it: int, prompt):
    fixed = _ggan_fix(run, unit)
    p_hat = infer_prompt(run.client, fixed, it, prompt.id if prompt else None)
    return generate_code(run.client, p_hat), p_hat


def _a1_step(run: _Run, unit: SourceUnit, it: int, prompt):
    p_hat = infer_prompt(run.client, unit, it, prompt.id if prompt else None)
    return generate_code(run.client, p_hat), p_hat


def _a2_step(run: _Run, unit: SourceUnit, it: int, prompt):
    return _ggan_fix(run, unit), prompt


def run_promsec(source, model: GganModel, client: LlmClient, analyzer: Analyzer | None = None,
                cfg: LoopConfig | None = None, run_id: str | None = None) -> RunLedger:
    cfg = cfg or LoopConfig()
    if cfg.mode is not Mode.PROMSEC:
        raise ValueError("run_promsec needs mode=promsec")
    if model is None:
        raise ValueError("run_promsec needs a trained model")
    return _iterate(source, cfg, client, analyzer or Analyzer(), model, run_id, _promsec_step)


def run_ablation(source, mode, model: GganModel | None = None, client: LlmClient | None = None,
                 analyzer: Analyzer | None = None, cfg: LoopConfig | None = None,
                 run_id: str | None = None) -> RunLedger:
    mode = Mode(mode)
    cfg = cfg or LoopConfig(mode=mode)
    cfg.mode = mode
    if mode is Mode.A1:
        if client is None:
            raise ValueError("a1 needs an LLM client")
        return _iterate(source, cfg, client, analyzer or Analyzer(), model, run_id, _a1_step)
    if mode is Mode.A2:
        if model is None:
            raise ValueError("a2 needs a trained model")
        return _iterate(source, cfg, client, analyzer or Analyzer(), model, run_id, _a2_step)
    raise ValueError(f"not an ablation mode: {mode.value}")


# -- BL1 / BL2 ----------------------------------------------------------------------------

def _base_prompt(run: _Run, unit: SourceUnit, prompt: PromptRecord | None) -> PromptRecord:
    if prompt is not None:
        return prompt
    p = infer_prompt(run.client, unit)
    run.ledger.bootstrap = run.take_costs() | {"prompt": p.to_dict()}
    return p


def _bl_cycle(run: _Run, base: PromptRecord, report: SecurityReport, cycle: int, start_iter: int):
    for index in range(1, 8):
        t0 = time.perf_counter()
        prompt = render_bl_template(index, base, report)
        it = start_iter + index - 1
        try:
            unit = generate_code(run.client, prompt)
        except _STEP_ERRORS as exc:
            costs = run.take_costs()
            run.ledger.traces.append(IterationTrace(
                it, prompt.to_dict(), "", report.k, [f.to_dict() for f in report.findings], 0.0,
                float("nan"), elapsed=time.perf_counter() - t0,
                template=index, cycle=cycle, error=f"{type(exc).__name__}: {exc}", **costs))
            if run.fail(exc):
                return False
            continue
        rep, a_s = run.analyze(unit)
        run.trace(it, unit, rep, a_s, t0, prompt, template=index, cycle=cycle)
    return True


def _report_of(t: IterationTrace) -> SecurityReport:
    findings = [Finding(f["cwe"], f["rule"], f["line"], Confidence(f["confidence"]), f["message"],
                        f.get("external", False)) for f in t.findings]
    return SecurityReport(t.unit_hash, findings, "builtin")


def _initial_report(run: _Run, unit: SourceUnit) -> SecurityReport:
    report, a_s = run.analyze(unit)
    run.ledger.bootstrap = run.ledger.bootstrap | {"analyses": 1, "analysis_seconds": a_s, "k": report.k}
    return report


def run_bl1(source, client: LlmClient, analyzer: Analyzer | None = None, cfg: LoopConfig | None = None,
            model: GganModel | None = None, run_id: str | None = None) -> RunLedger:
    """One cycle of the seven context templates against the original code's report."""
    cfg = cfg or LoopConfig(mode=Mode.BL1)
    run = _Run(cfg, client, analyzer or Analyzer(), model, run_id)
    unit, prompt = run.start(source)
    base = _base_prompt(run, unit, prompt)
    report = _initial_report(run, unit)
    _bl_cycle(run, base, report, 1, 1)
    return run.finish()


def run_bl2(source, client: LlmClient, analyzer: Analyzer | None = None, cfg: LoopConfig | None = None,
            model: GganModel | None = None, run_id: str | None = None) -> RunLedger:
    """Repeated BL1 cycles, each anchored on the best code found so far."""
    cfg = cfg or LoopConfig(mode=Mode.BL2)
    run = _Run(cfg, client, analyzer or Analyzer(), model, run_id)
    unit, prompt = run.start(source)
    base = _base_prompt(run, unit, prompt)
    report = _initial_report(run, unit)
    best_k, best_code, best_report = report.k, unit.text, report
    for cycle in range(1, cfg.max_iters + 1):
        if best_k <= cfg.epsilon:
            break
        anchor = base if cycle == 1 else PromptRecord(
            f"{base.text}\n\nStart from this version of the code:\n```python\n{best_code}```",
            "initial", cycle - 1, base.id)
        first = len(run.ledger.traces)
        ok = _bl_cycle(run, anchor, best_report, cycle, first + 1)
        for t in run.ledger.traces[first:]:
            if t.error is None and t.k < best_k:
                best_k, best_code = t.k, t.code
                best_report = _report_of(t)
            t.best_k = best_k
        if not ok:
            break
    return run.finish()


def run_mode(source, cfg: LoopConfig, model=None, client=None, analyzer=None, run_id=None) -> RunLedger:
    if cfg.mode is Mode.PROMSEC:
        return run_promsec(source, model, client, analyzer, cfg, run_id)
    if cfg.mode is Mode.BL1:
        return run_bl1(source, client, analyzer, cfg, model, run_id)
    if cfg.mode is Mode.BL2:
        return run_bl2(source, client, analyzer, cfg, model, run_id)
    return run_ablation(source, cfg.mode, model, client, analyzer, cfg, run_id)


# -- masked-CWE training sets ---------------------------------------------------------------

def mask_cwe(units: list[SourceUnit], cwe: int, analyzer: Analyzer | None = None) -> list[SourceUnit]:
    if cwe not in SUPPORTED_CWES:
        raise ValueError(f"CWE-{cwe} is not supported")
    analyzer = analyzer or Analyzer()
    kept = [u for u in units if cwe not in analyzer(u).cwes()]
    if not kept:
        raise EmptyTrainingSet(f"masking CWE-{cwe} leaves no training units")
    return kept
