"""Command-line interface: ``secprompt <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import ggan
from .analyzer import AnalyzerConfig, Analyzer, AnalyzerError, SUPPORTED_CWES
from .corpus import Corpus, CorpusSpec, write_corpus
from .evaluation import (ExecutionError, FuzzSpec, TrialTimeout, bar_chart_svg, cost_summary, cwe_histogram,
                         emit_report, fuzz_compare)
from .frontend import LexError, ParseError, SourceUnit, to_dot
from .frontend.graphs import UnsupportedConstruct, build_graph
from .llm import HttpClient, LlmConfig, LlmError, PromptRecord, ScriptedClient, generate_code
from .loop import EmptyTrainingSet, LoopConfig, Mode, RunLedger, Status, mask_cwe, run_mode
from .neural import TrainConfig
from .templates import CodeContext

log = logging.getLogger("secprompt")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


@dataclass
class Paths:
    corpus: str = "corpus"
    checkpoints: str = "checkpoints"
    runs: str = "runs"
    templates: str | None = None


@dataclass
class AppConfig:
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig)
    llm: LlmConfig | None = None
    scripted_rules: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    paths: Paths = field(default_factory=Paths)
    workers: int = 0

    @classmethod
    def load(cls, path: str | None) -> "AppConfig":
        if not path:
            return cls()
        doc = json.loads(Path(path).read_text("utf-8"))
        cfg = cls()
        if "analyzer" in doc:
            cfg.analyzer = AnalyzerConfig(**doc["analyzer"])
        if "llm" in doc and doc["llm"] is not None:
            cfg.llm = LlmConfig(**doc["llm"])
        cfg.scripted_rules = doc.get("scripted_rules")
        if "train" in doc:
            cfg.train = TrainConfig(**doc["train"])
        if "loop" in doc:
            cfg.loop = LoopConfig(**doc["loop"])
        if "paths" in doc:
            cfg.paths = Paths(**doc["paths"])
        cfg.workers = int(doc.get("workers", 0))
        cfg.validate()
        return cfg

    def validate(self):
        if self.llm is not None and self.scripted_rules:
            raise CliError("configure either an HTTP client or scripted rules, not both")

    def client(self):
        if self.scripted_rules:
            return ScriptedClient(self.scripted_rules)
        if self.llm is not None:
            return HttpClient(self.llm)
        raise CliError("no LLM client configured (use --rules or an 'llm' config section)")


def _read_unit(path) -> SourceUnit:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return SourceUnit(p.read_text("utf-8"), p.stem)


# -- commands -------------------------------------------------------------------------------

def cmd_corpus_gen(args, cfg: AppConfig) -> int:
    mix = {c: 1.0 for c in SUPPORTED_CWES}
    if args.mix:
        mix = {}
        for part in args.mix.split(","):
            cwe, _, w = part.partition(":")
            mix[int(cwe)] = float(w or 1.0)
    spec = CorpusSpec(args.count, mix, (args.min_stmts, args.max_stmts), seed=args.seed)
    out = write_corpus(spec, args.out or cfg.paths.corpus)
    print(f"wrote {spec.count} programs to {out}")
    return EXIT_OK


def cmd_analyze(args, cfg: AppConfig) -> int:
    unit = _read_unit(args.path)
    acfg = cfg.analyzer
    if args.external:
        acfg = AnalyzerConfig(mode="external", external_command=acfg.external_command, timeout=acfg.timeout)
    report = Analyzer(acfg)(unit)
    print(f"{'line':>5}  {'cwe':>7}  {'confidence':<10}  rule")
    for f in report.findings:
        print(f"{f.line:>5}  {'CWE-' + str(f.cwe):>7}  {f.confidence.value:<10}  {f.rule}: {f.message}")
    print(f"k = {report.k}")
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(with_time=False), indent=2) + "\n", "utf-8")
    return EXIT_OK if report.k == 0 else EXIT_FAIL


def cmd_graph(args, cfg: AppConfig) -> int:
    unit = _read_unit(args.path)
    ctx = CodeContext(unit)
    kind = args.graph_kind or cfg.loop.graph_kind.value
    text = to_dot(build_graph(ctx.tree, ctx.vocab, kind))
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _train_config(args, cfg: AppConfig) -> TrainConfig:
    base = asdict(cfg.train)
    for name in ("epochs", "batch_size", "lr", "lam", "alpha", "beta", "hidden", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    return TrainConfig(**base)


def cmd_train(args, cfg: AppConfig) -> int:
    corpus = Corpus.load(args.corpus or cfg.paths.corpus)
    tcfg = _train_config(args, cfg)
    analyzer = Analyzer(cfg.analyzer)
    units = corpus.units()
    if args.mask is not None:
        units = mask_cwe(units, args.mask, analyzer)
    kind = args.graph_kind or cfg.loop.graph_kind.value
    model = ggan.GganModel(graph_kind=kind, hidden=tcfg.hidden, seed=tcfg.seed)
    samples = [model.sample(u) for u in units]
    model, history = ggan.train(model, samples, tcfg, analyzer,
                                log_fn=lambda s: log.info("epoch %d  L_G %.4f  L_D %.4f  dk %.2f",
                                                          s.epoch, s.loss_g, s.loss_d, s.mean_delta_k))
    out = Path(args.out or Path(cfg.paths.checkpoints) / "ggan.spgn")
    out.parent.mkdir(parents=True, exist_ok=True)
    ggan.save(model, out, tcfg)
    hist = out.with_name(out.name + ".history.csv")
    with hist.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_g", "loss_d", "mean_delta_k", "mean_expected_delta_k"])
        for s in history:
            w.writerow([s.epoch, f"{s.loss_g:.10f}", f"{s.loss_d:.10f}", f"{s.mean_delta_k:.6f}",
                        f"{s.mean_expected_delta_k:.6f}"])
    (out.with_name(out.name + ".units.txt")).write_text("".join(u.id + "\n" for u in units), "utf-8")
    print(f"trained on {len(units)} units; checkpoint {out}")
    return EXIT_OK


def _loop_config(args, cfg: AppConfig) -> LoopConfig:
    d = cfg.loop.to_dict()
    if getattr(args, "mode", None):
        d["mode"] = args.mode
    if getattr(args, "graph_kind", None):
        d["graph_kind"] = args.graph_kind
    if getattr(args, "max_iters", None) is not None:
        d["max_iters"] = args.max_iters
    if getattr(args, "epsilon", None) is not None:
        d["epsilon"] = args.epsilon
    return LoopConfig(**d)


def _needs_model(mode: Mode) -> bool:
    return mode in (Mode.PROMSEC, Mode.A2)


def _load_model(args, cfg: AppConfig):
    path = args.checkpoint or str(Path(cfg.paths.checkpoints) / "ggan.spgn")
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return ggan.load(path)


def write_run(ledger: RunLedger, runs_dir) -> Path:
    root = Path(runs_dir) / ledger.run_id
    (root / "artifacts").mkdir(parents=True, exist_ok=True)
    ledger.write(root / "ledger.jsonl")
    for t in ledger.traces:
        if t.code:
            (root / "artifacts" / f"{t.iteration}.src").write_text(t.code, "utf-8")
    emit_report([ledger], root)
    (root / f"{ledger.run_id}.csv").replace(root / "report.csv")
    return root


def cmd_optimize(args, cfg: AppConfig) -> int:
    lcfg = _loop_config(args, cfg)
    if args.prompt:
        source = PromptRecord(args.prompt)
    elif args.input:
        source = _read_unit(args.input)
    else:
        raise CliError("give an input file or --prompt")
    model = _load_model(args, cfg) if _needs_model(lcfg.mode) else None
    client = cfg.client() if lcfg.mode is not Mode.A2 or isinstance(source, PromptRecord) else None
    ledger = run_mode(source, lcfg, model, client, Analyzer(cfg.analyzer), args.run_id)
    root = write_run(ledger, args.runs or cfg.paths.runs)
    best = ledger.best
    cost = cost_summary(ledger)
    print(f"status {ledger.status.value}; final k {best.k if best else 'n/a'}; "
          f"iterations {len(ledger.traces)}; queries {cost.llm_queries}; analyses {cost.analyses}; "
          f"ledger {root / 'ledger.jsonl'}")
    if ledger.status is Status.ERROR:
        return EXIT_ERROR
    return EXIT_OK if ledger.status is Status.SECURED else EXIT_FAIL


BENCH_COLUMNS = ("program", "mode", "status", "initial_k", "best_k", "iterations", "similarity", "ged",
                 "llm_queries", "analyses", "input_tokens", "output_tokens", "seconds", "best_template")


def cmd_bench(args, cfg: AppConfig) -> int:
    corpus = Corpus.load(args.corpus or cfg.paths.corpus)
    modes = [Mode(m) for m in args.modes.split(",")]
    model = _load_model(args, cfg) if any(_needs_model(m) for m in modes) else None
    rules = args.rules or cfg.scripted_rules or str(corpus.rules_path())
    out = Path(args.out or Path(cfg.paths.runs) / "bench")
    out.mkdir(parents=True, exist_ok=True)
    base = _loop_config(args, cfg)

    def one(job):
        i, mode = job
        lcfg = LoopConfig(**(base.to_dict() | {"mode": mode.value}))
        client = ScriptedClient(rules) if cfg.llm is None else HttpClient(cfg.llm)
        source = PromptRecord(corpus.items[i]["prompt"]) if args.from_prompts else corpus.unit(i)
        led = run_mode(source, lcfg, model, client, Analyzer(cfg.analyzer),
                       run_id=f"{corpus.items[i]['id']}-{mode.value}")
        return i, mode, led

    jobs = [(i, m) for i in range(len(corpus)) for m in modes]
    workers = args.workers or cfg.workers or os.cpu_count() or 1
    rows, ledgers = [], []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for i, mode, led in pool.map(one, jobs):
            best, cost = led.best, cost_summary(led)
            ledgers.append(led)
            rows.append([corpus.items[i]["id"], mode.value, led.status.value,
                         led.traces[0].k if led.traces else "", best.k if best else "",
                         len(led.traces), f"{best.similarity:.6f}" if best else "",
                         f"{best.ged:.3f}" if best else "", cost.llm_queries, cost.analyses,
                         cost.input_tokens, cost.output_tokens, f"{cost.overall_seconds:.3f}",
                         best.template if best and best.template else ""])
    with (out / "bench.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        w.writerows(rows)
    summary = []
    for mode in modes:
        mine = [r for r in rows if r[1] == mode.value]
        secured = sum(r[2] == Status.SECURED.value for r in mine) / max(1, len(mine))
        iters = sum(r[5] for r in mine) / max(1, len(mine))
        sims = [float(r[6]) for r in mine if r[6] != ""]
        summary.append([mode.value, f"{secured:.4f}", f"{iters:.3f}", f"{sum(sims) / max(1, len(sims)):.6f}",
                        sum(r[8] for r in mine), sum(r[9] for r in mine)])
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "secured_fraction", "mean_iterations", "mean_similarity", "llm_queries", "analyses"])
        w.writerows(summary)
    (out / "charts").mkdir(exist_ok=True)
    (out / "charts" / "secured_fraction.svg").write_text(
        bar_chart_svg("Secured fraction per mode", [s[0] for s in summary], {"secured": [float(s[1]) for s in summary]}),
        "utf-8")
    if Mode.BL1 in modes:
        hist = {k: 0 for k in range(1, 8)}
        unsecured = 0
        for r in rows:
            if r[1] == Mode.BL1.value:
                if r[2] == Status.SECURED.value and r[13] != "":
                    hist[int(r[13])] += 1
                else:
                    unsecured += 1
        with (out / "bl1_best_template.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"T{k}" for k in range(1, 8)] + ["unsecured"])
            w.writerow([hist[k] for k in range(1, 8)] + [unsecured])
        (out / "charts" / "bl1_best_template.svg").write_text(
            bar_chart_svg("Best BL1 template", [f"T{k}" for k in range(1, 8)], {"programs": [hist[k] for k in range(1, 8)]}),
            "utf-8")
    for s in summary:
        print(f"{s[0]:<12} secured {s[1]}  iterations {s[2]}  similarity {s[3]}")
    return EXIT_OK


def cmd_survey(args, cfg: AppConfig) -> int:
    client = cfg.client()
    prompts = [x.strip() for x in Path(args.prompts).read_text("utf-8").splitlines() if x.strip()]
    analyzer = Analyzer(cfg.analyzer)
    reports, failures = [], 0
    for p in prompts:
        for _ in range(args.repeats):
            try:
                unit = generate_code(client, PromptRecord(p))
                reports.append(analyzer(unit))
            except (LlmError, ParseError, LexError, AnalyzerError) as exc:
                failures += 1
                log.warning("survey prompt failed: %s", exc)
    out = Path(args.out or Path(cfg.paths.runs) / "survey")
    (out / "charts").mkdir(parents=True, exist_ok=True)
    hist = cwe_histogram(r.findings for r in reports)
    per_code: dict[int, int] = {}
    for r in reports:
        per_code[r.k] = per_code.get(r.k, 0) + 1
    with (out / "cwe_histogram.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cwe", "count"])
        for c in sorted(hist):
            w.writerow([c, hist[c]])
    with (out / "k_per_code.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "codes"])
        for k in sorted(per_code):
            w.writerow([k, per_code[k]])
    cwes = sorted(hist)
    (out / "charts" / "cwe_histogram.svg").write_text(
        bar_chart_svg("CWE findings in generated code", [f"CWE-{c}" for c in cwes], {"findings": [hist[c] for c in cwes]}),
        "utf-8")
    ks = sorted(per_code)
    (out / "charts" / "k_per_code.svg").write_text(
        bar_chart_svg("CWE count per generated code", [str(k) for k in ks], {"codes": [per_code[k] for k in ks]}), "utf-8")
    print(f"analyzed {len(reports)} codes ({failures} failures); findings {sum(hist.values())}")
    return EXIT_OK


def cmd_fuzz(args, cfg: AppConfig) -> int:
    orig, new = _read_unit(args.orig), _read_unit(args.new)
    spec = FuzzSpec.load(args.spec)
    if args.trials:
        spec.trials = args.trials
    result = fuzz_compare(orig, new, spec)
    text = json.dumps(result.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", "utf-8")
    print(text)
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_report(args, cfg: AppConfig) -> int:
    root = Path(args.runs or cfg.paths.runs)
    paths = sorted(root.glob("*/ledger.jsonl"))
    if not paths:
        raise CliError(f"no ledgers under {root}")
    ledgers = [RunLedger.read(p) for p in paths]
    files = emit_report(ledgers, args.out or root / "report")
    print(f"wrote {len(files)} files")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _globals(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON config file")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=d)
    p.add_argument("--graph-kind", choices=["ast", "cfg", "dfg"], default=d)
    p.add_argument("--max-iters", type=int, default=d)
    p.add_argument("--epsilon", type=int, default=d)
    p.add_argument("--rules", default=d, help="scripted LLM rules file (hermetic client)")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secprompt", description="Security-aware prompt optimization toolkit")
    _globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus-gen", parents=[common], help="generate a seeded corpus")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--mix", help="comma list of CWE[:weight]")
    p.add_argument("--min-stmts", type=int, default=10)
    p.add_argument("--max-stmts", type=int, default=24)
    p.set_defaults(func=cmd_corpus_gen)

    p = sub.add_parser("analyze", parents=[common], help="security-analyze one file")
    p.add_argument("path")
    p.add_argument("--json")
    p.add_argument("--external", action="store_true", help="use the external analyzer tool")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("graph", parents=[common], help="dump an AST/CFG/DFG as dot text")
    p.add_argument("path")
    p.add_argument("--out")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", parents=[common], help="train the gGAN on a corpus")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--mask", type=int, help="CWE id withheld from training")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--hidden", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize", parents=[common], help="run one optimization")
    p.add_argument("input", nargs="?")
    p.add_argument("--prompt")
    p.add_argument("--checkpoint")
    p.add_argument("--runs")
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bench", parents=[common], help="compare modes over a corpus")
    p.add_argument("--corpus")
    p.add_argument("--modes", default="promsec,bl1")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--from-prompts", action="store_true", help="start from corpus prompts instead of code")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("survey", parents=[common], help="CWE histogram of generated code")
    p.add_argument("prompts")
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_survey)

    p = sub.add_parser("fuzz", parents=[common], help="fuzz-differential comparison")
    p.add_argument("orig")
    p.add_argument("new")
    p.add_argument("--spec", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("report", parents=[common], help="emit CSV/SVG reports for stored runs")
    p.add_argument("--runs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = AppConfig.load(args.config)
        if args.rules:
            cfg.scripted_rules = args.rules
            cfg.llm = None
        if args.seed is not None:
            cfg.train.seed = args.seed
        if args.command == "corpus-gen" and args.seed is None:
            args.seed = 7
        if args.graph_kind:
            args.graph_kind = args.graph_kind.upper()
        return args.func(args, cfg)
    except (CliError, EmptyTrainingSet, ggan.NonFiniteLoss, ggan.CheckpointMismatch, AnalyzerError, LlmError,
            ParseError, LexError, UnsupportedConstruct, ExecutionError, TrialTimeout, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
