"""Seeded subject-language corpus: vulnerable programs, clean twins, prompts and mock rules."""
from __future__ import annotations

import itertools
import json
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from string import Template

from .analyzer import SUPPORTED_CWES
from .frontend import Origin, SourceUnit
from .llm import INFER_MARKER


@dataclass(frozen=True)
class SlotVariant:
    insecure: tuple[str, ...]
    vuln: int  # index into ``insecure`` of the flagged line
    secure: tuple[tuple[str, ...], ...]  # [0] is the canonical fix, the rest are alternates
    needs: tuple[str, ...] = ()
    fix_needs: tuple[str, ...] = ()


def _v(insecure, vuln, secure, needs=(), fix_needs=()):
    secure = tuple(tuple(s) if isinstance(s, (list, tuple)) else (s,) for s in secure)
    insecure = tuple(insecure) if isinstance(insecure, (list, tuple)) else (insecure,)
    return SlotVariant(insecure, vuln, secure, tuple(needs), tuple(fix_needs))


# ``$s`` is a string parameter, ``$c`` a database cursor parameter.
SLOTS: dict[int, tuple[SlotVariant, ...]] = {
    78: (
        _v(['cmd = "ping -c 1 " + $s', "os.system(cmd)"], 1,
           ['subprocess.run(["ping", "-c", "1", $s])',
            ['cmd = "ping -c 1 " + shlex.quote($s)', "os.system(cmd)"],
            'subprocess.run(["ping", "-c", "1", $s], check=True)'],
           ["os"], ["subprocess"]),
        _v('os.system("ls " + $s)', 0,
           ['subprocess.run(["ls", $s])', 'os.system("ls " + shlex.quote($s))'], ["os"], ["subprocess"]),
        _v('subprocess.run("echo " + $s, shell=True)', 0,
           ['subprocess.run(["echo", $s])', 'subprocess.run(["echo", $s], check=False)'],
           ["subprocess"], ["subprocess"]),
        _v('listing = subprocess.check_output("ls -l " + $s, shell=True)', 0,
           ['listing = subprocess.check_output(["ls", "-l", $s])',
            'listing = subprocess.check_output(["ls", "-l", $s], timeout=5)'],
           ["subprocess"], ["subprocess"]),
    ),
    89: (
        _v(["query = \"SELECT * FROM users WHERE name = '\" + $s + \"'\"", "$c.execute(query)"], 1,
           ['$c.execute("SELECT * FROM users WHERE name = ?", ($s,))',
            ['query = "SELECT * FROM users WHERE name = ?"', "$c.execute(query, ($s,))"]]),
        _v('$c.execute("DELETE FROM items WHERE id = " + $s)', 0,
           ['$c.execute("DELETE FROM items WHERE id = ?", ($s,))',
            '$c.execute("DELETE FROM items WHERE id = :id", {"id": $s})']),
        _v('rows = $c.execute("SELECT id FROM orders WHERE ref = {}".format($s))', 0,
           ['rows = $c.execute("SELECT id FROM orders WHERE ref = ?", ($s,))',
            'rows = $c.execute("SELECT id FROM orders WHERE ref = :ref", {"ref": $s})']),
    ),
    259: (
        _v(['password = "hunter2"', 'login = {"user": $s, "password": password}'], 0,
           [['password = os.environ.get("PASSWORD", "")', 'login = {"user": $s, "password": password}'],
            ['password = os.getenv("PASSWORD", "")', 'login = {"user": $s, "password": password}']],
           fix_needs=["os"]),
        _v(['password = "s3cr3t!"', "auth = ($s, password)"], 0,
           [['password = os.environ.get("PASSWORD", "")', "auth = ($s, password)"],
            ['password = os.getenv("PASSWORD", "")', "auth = ($s, password)"]],
           fix_needs=["os"]),
    ),
    798: (
        _v(['api_key = "sk-live-1234"', 'headers = {"Authorization": api_key}'], 0,
           [['api_key = os.environ.get("API_KEY", "")', 'headers = {"Authorization": api_key}'],
            ['api_key = os.getenv("API_KEY", "")', 'headers = {"Authorization": api_key}']],
           fix_needs=["os"]),
        _v(['secret = "ghp_abcdef0123"', "signed = $s + secret"], 0,
           [['secret = os.environ.get("SECRET", "")', "signed = $s + secret"],
            ['secret = os.getenv("SECRET", "")', "signed = $s + secret"]],
           fix_needs=["os"]),
    ),
    327: (
        _v("digest = hashlib.md5($s.encode()).hexdigest()", 0,
           ["digest = hashlib.sha256($s.encode()).hexdigest()",
            "digest = hashlib.sha512($s.encode()).hexdigest()"], ["hashlib"], ["hashlib"]),
        _v("checksum = hashlib.sha1($s.encode()).hexdigest()", 0,
           ["checksum = hashlib.sha256($s.encode()).hexdigest()",
            "checksum = hashlib.sha3_256($s.encode()).hexdigest()"], ["hashlib"], ["hashlib"]),
    ),
    330: (
        _v("nonce = random.randint(0, 999999)", 0,
           ["nonce = secrets.randbelow(1000000)", "nonce = secrets.randbelow(999999)"],
           ["random"], ["secrets"]),
        _v("session_id = random.choice($s)", 0,
           ["session_id = secrets.choice($s)", ["rng = secrets.SystemRandom()", "session_id = rng.choice($s)"]],
           ["random"], ["secrets"]),
    ),
    502: (
        _v("data = pickle.loads($s)", 0, ["data = json.loads($s)", "data = json.loads($s.strip())"],
           ["pickle"], ["json"]),
        _v("conf = yaml.load($s, Loader=yaml.Loader)", 0,
           ["conf = yaml.safe_load($s)", "conf = yaml.load($s, Loader=yaml.SafeLoader)"],
           ["yaml"], ["yaml"]),
    ),
    22: (
        _v('handle = open("/srv/data/" + $s, "r")', 0,
           ['handle = open("/srv/data/" + os.path.basename($s), "r")',
            'handle = open(os.path.join("/srv/data", os.path.basename($s)), "r")'],
           fix_needs=["os"]),
    ),
}

FILLERS = (
    ["size = len($s)"],
    ["label = $s.strip()"],
    ["count = 0", "for ch in $s:", "    if ch == \"-\":", "        count += 1"],
    ["parts = $s.split(\",\")"],
    ["width = 8", "while width < 64:", "    width = width * 2"],
    ["tag = \"item\"", "if len($s) > 16:", "    tag = \"long\"", "else:", "    tag = \"short\""],
    ["seen = []", "seen.append($s)"],
    ["flag = $s.startswith(\"#\")"],
    ["upper = $s.upper()"],
    ["total = 0", "for i in range(3):", "    total += i"],
)

VERBS = ("load", "sync", "fetch", "store", "check", "build", "export", "archive", "render", "audit")
NOUNS = ("report", "ledger", "invoice", "profile", "session", "backup", "catalog", "metric",
         "ticket", "order", "account", "schedule")
STRING_PARAMS = ("name", "host", "user", "path", "item", "ref", "query_text", "target")
CURSOR_PARAMS = ("cur", "db", "conn")


@dataclass
class CorpusSpec:
    count: int = 60
    mix: dict[int, float] = field(default_factory=lambda: {c: 1.0 for c in SUPPORTED_CWES})
    statements: tuple[int, int] = (10, 24)
    slots: tuple[int, int] = (1, 3)
    seed: int = 7

    def __post_init__(self):
        self.mix = {int(k): float(v) for k, v in self.mix.items()}
        if any(w < 0 for w in self.mix.values()) or not any(w > 0 for w in self.mix.values()):
            raise ValueError("CWE mix weights must be non-negative and not all zero")
        unknown = set(self.mix) - set(SLOTS)
        if unknown:
            raise ValueError(f"unsupported CWE ids in mix: {sorted(unknown)}")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        lo, hi = self.statements
        if not 1 <= lo <= hi:
            raise ValueError("bad statements range")

    def to_dict(self):
        d = asdict(self)
        d["mix"] = {str(k): v for k, v in self.mix.items()}
        return d


@dataclass
class Slot:
    cwe: int
    variant: int
    function: int  # index into Program.functions (slot-bearing functions only)


@dataclass
class Program:
    id: str
    functions: list[str]  # slot-bearing function names; [0] is the primary, unique per corpus
    helper: str
    params: list[tuple[str, str]]  # (cursor, string) per function
    bodies: list[list[object]]  # per function: filler line lists and Slot markers
    constants: tuple[int, int, int]
    slots: list[Slot]

    @property
    def cwes(self) -> list[int]:
        return [s.cwe for s in self.slots]

    def variant(self, slot: Slot) -> SlotVariant:
        return SLOTS[slot.cwe][slot.variant]

    def render(self, secured=(), alternate: dict[int, int] | None = None) -> tuple[str, list[dict]]:
        """Program text with ``secured`` CWE slots fixed, plus (cwe, line) for insecure slots."""
        secured = set(secured)
        alternate = alternate or {}
        imports = set()
        for slot in self.slots:
            v = self.variant(slot)
            imports.update(v.fix_needs if slot.cwe in secured else v.needs)
        lines = [f"import {m}" for m in sorted(imports)]
        if lines:
            lines.append("")
        a, b, c = self.constants
        lines += [f"def {self.helper}(a, b):", f"    total = a * {a} + b", f"    if total > {b}:",
                  f"        total = total - {c}", "    return total", ""]
        manifest = []
        for fi, name in enumerate(self.functions):
            cur, s = self.params[fi]
            sub = {"s": s, "c": cur}
            lines.append(f"def {name}({cur}, {s}):")
            for part in self.bodies[fi]:
                if isinstance(part, Slot):
                    v = self.variant(part)
                    if part.cwe in secured:
                        body = v.secure[alternate.get(part.cwe, 0)]
                    else:
                        body = v.insecure
                        manifest.append({"cwe": part.cwe, "line": len(lines) + 1 + v.vuln})
                    lines += ["    " + Template(x).substitute(sub) for x in body]
                else:
                    lines += ["    " + Template(x).substitute(sub) for x in part]
            lines += [f"    return {s}", ""]
        return "\n".join(lines), manifest

    def rule_template(self) -> str:
        """The same program as a scripted-reply template with per-practice conditionals."""
        needs: dict[str, set[str]] = {}
        for slot in self.slots:
            v = self.variant(slot)
            for m in v.needs:
                needs.setdefault(m, set()).add(f"!{slot.cwe}")
            for m in v.fix_needs:
                needs.setdefault(m, set()).add(str(slot.cwe))
        head = []
        for m in sorted(needs):
            terms = needs[m]
            always = any(t.startswith("!") and t[1:] in terms for t in terms)
            head.append(f"import {m}\n" if always else "${if:" + ",".join(sorted(terms)) + "}" + f"import {m}\n" + "${end}")
        out = []
        a, b, c = self.constants
        out += [f"def {self.helper}(a, b):", f"    total = a * {a} + b", f"    if total > {b}:",
                f"        total = total - {c}", "    return total", ""]
        for fi, name in enumerate(self.functions):
            cur, s = self.params[fi]
            sub = {"s": s, "c": cur}
            out.append(f"def {name}({cur}, {s}):")
            for part in self.bodies[fi]:
                if isinstance(part, Slot):
                    v = self.variant(part)
                    good = "\n".join("    " + Template(x).substitute(sub) for x in v.secure[0])
                    bad = "\n".join("    " + Template(x).substitute(sub) for x in v.insecure)
                    out.append("${if:" + str(part.cwe) + "}" + good + "${else}" + bad + "${end}")
                else:
                    out += ["    " + Template(x).substitute(sub) for x in part]
            out += [f"    return {s}", ""]
        blank = "${if:" + ",".join(sorted({t for ts in needs.values() for t in ts})) + "}\n${end}" if needs else ""
        return "".join(head) + blank + "\n".join(out)

    def prompt(self) -> str:
        sigs = [f"{n}({c}, {s})" for n, (c, s) in zip(self.functions, self.params)]
        return (f"Write a Python module with a helper {self.helper}(a, b) that returns a weighted total "
                f"and the functions {', '.join(sigs)} that process records for a small service.")

    def fuzz_spec(self) -> dict:
        return {"entrypoint": self.helper, "params": [{"kind": "int", "low": -1000, "high": 1000},
                                                      {"kind": "int", "low": -1000, "high": 1000}],
                "trials": 1000, "threshold": 0.01, "timeout": 2.0}

    def to_dict(self):
        return {"id": self.id, "functions": self.functions, "helper": self.helper,
                "params": [list(p) for p in self.params], "constants": list(self.constants),
                "slots": [asdict(s) for s in self.slots],
                "bodies": [[asdict(p) | {"slot": True} if isinstance(p, Slot) else p for p in body]
                           for body in self.bodies]}

    @classmethod
    def from_dict(cls, d) -> "Program":
        bodies = [[Slot(p["cwe"], p["variant"], p["function"]) if isinstance(p, dict) else p for p in body]
                  for body in d["bodies"]]
        slots = [p for body in bodies for p in body if isinstance(p, Slot)]
        return cls(d["id"], d["functions"], d["helper"], [tuple(p) for p in d["params"]], bodies,
                   tuple(d["constants"]), slots)


def _statement_count(lines) -> int:
    return sum(1 for x in lines if not x.strip().startswith("else"))


def generate_programs(spec: CorpusSpec) -> list[Program]:
    rng = random.Random(spec.seed)
    names = [f"{v}_{n}" for v in VERBS for n in NOUNS]
    rng.shuffle(names)
    if spec.count > len(names):
        names += [f"{n}_{i}" for i, n in enumerate(list(names)) if i < spec.count - len(names)]
    cwes = [c for c in sorted(spec.mix) if spec.mix[c] > 0]
    weights = [spec.mix[c] for c in cwes]
    programs = []
    for i in range(spec.count):
        primary = names[i]
        n_slots = min(rng.randint(*spec.slots), len(cwes))
        chosen: list[int] = []
        while len(chosen) < n_slots:
            c = rng.choices(cwes, weights)[0]
            if c not in chosen:
                chosen.append(c)
        n_funcs = 1 if n_slots == 1 else rng.randint(1, 2)
        noun = primary.split("_", 1)[1]
        functions = [primary] + [f"{rng.choice(VERBS)}_{noun}_{j}" for j in range(1, n_funcs)]
        params = [(rng.choice(CURSOR_PARAMS), rng.choice(STRING_PARAMS)) for _ in functions]
        slots = [Slot(c, rng.randrange(len(SLOTS[c])), k % n_funcs) for k, c in enumerate(chosen)]
        target = rng.randint(*spec.statements)
        bodies: list[list[object]] = [[] for _ in functions]
        for s in slots:
            bodies[s.function].append(s)
        used = 3 * n_funcs + sum(len(SLOTS[s.cwe][s.variant].insecure) for s in slots)
        while used < target:
            f = rng.randrange(n_funcs)
            filler = list(rng.choice(FILLERS))
            bodies[f].insert(rng.randint(0, len(bodies[f])), filler)
            used += _statement_count(filler)
        slots = [p for body in bodies for p in body if isinstance(p, Slot)]
        consts = (rng.randint(2, 9), rng.randint(50, 500), rng.randint(1, 40))
        programs.append(Program(f"p{i:03d}", functions, f"score_{noun}", params, bodies, consts, slots))
    return programs


@dataclass
class CorpusEntry:
    program: Program
    unit: SourceUnit
    twin: SourceUnit
    manifest: list[dict]


def build_entries(programs: list[Program]) -> list[CorpusEntry]:
    out = []
    for p in programs:
        text, manifest = p.render()
        twin, _ = p.render(secured=p.cwes)
        out.append(CorpusEntry(p, SourceUnit(text + "\n", p.id, origin=Origin.USER),
                               SourceUnit(twin + "\n", p.id + "-twin", origin=Origin.USER), manifest))
    return out


def secure_versions(program: Program) -> list[SourceUnit]:
    """Every distinct fully secured rendering, one per combination of alternate fixes."""
    cwes = program.cwes
    choices = [range(len(program.variant(s).secure)) for s in program.slots]
    texts = sorted({program.render(secured=cwes, alternate=dict(zip(cwes, combo)))[0]
                    for combo in itertools.product(*choices)})
    return [SourceUnit(t + "\n", f"{program.id}-v{i}", origin=Origin.USER) for i, t in enumerate(texts)]


def version_study(programs: list[Program], count: int = 10, min_versions: int = 3
                  ) -> list[tuple[SourceUnit, list[SourceUnit]]]:
    """The first ``count`` programs with at least ``min_versions`` secure renderings."""
    out = []
    for p in programs:
        versions = secure_versions(p)
        if len(versions) >= min_versions:
            out.append((SourceUnit(p.render()[0] + "\n", p.id, origin=Origin.USER), versions))
        if len(out) == count:
            break
    return out


def scripted_rules(programs: list[Program]) -> list[dict]:
    """Rules for the hermetic client: prompt inference, one generator rule per program, catch-all."""
    rules = [{"name": "infer", "patterns": [re.escape(INFER_MARKER)],
              "response": "Write a Python module with the functions ${functions}.${practices}"}]
    for p in programs:
        rules.append({"name": p.id, "patterns": [rf"\b{re.escape(p.functions[0])}\b"],
                      "response": "```python\n" + p.rule_template() + "\n```"})
    rules.append({"name": "catch-all", "patterns": [".*"], "response": "I cannot help with that request."})
    return rules


def write_corpus(spec: CorpusSpec, out_dir) -> Path:
    out = Path(out_dir)
    (out / "programs").mkdir(parents=True, exist_ok=True)
    (out / "twins").mkdir(exist_ok=True)
    (out / "fuzz").mkdir(exist_ok=True)
    programs = generate_programs(spec)
    manifest = []
    for e in build_entries(programs):
        p = e.program
        (out / "programs" / f"{p.id}.py").write_text(e.unit.text, "utf-8")
        (out / "twins" / f"{p.id}.py").write_text(e.twin.text, "utf-8")
        (out / "fuzz" / f"{p.id}.json").write_text(json.dumps(p.fuzz_spec(), indent=2) + "\n", "utf-8")
        manifest.append({"id": p.id, "program": f"programs/{p.id}.py", "twin": f"twins/{p.id}.py",
                         "fuzz": f"fuzz/{p.id}.json", "findings": e.manifest, "prompt": p.prompt(),
                         "structure": p.to_dict()})
    doc = {"spec": spec.to_dict(), "programs": manifest}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", "utf-8")
    (out / "rules.json").write_text(json.dumps(scripted_rules(programs), indent=1) + "\n", "utf-8")
    (out / "prompts.txt").write_text("".join(p.prompt() + "\n" for p in programs), "utf-8")
    return out


@dataclass
class Corpus:
    root: Path
    spec: dict
    items: list[dict]

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text("utf-8"))
        return cls(root, doc["spec"], doc["programs"])

    def __len__(self):
        return len(self.items)

    def unit(self, i: int) -> SourceUnit:
        item = self.items[i]
        return SourceUnit((self.root / item["program"]).read_text("utf-8"), item["id"])

    def twin(self, i: int) -> SourceUnit:
        item = self.items[i]
        return SourceUnit((self.root / item["twin"]).read_text("utf-8"), item["id"] + "-twin")

    def units(self) -> list[SourceUnit]:
        return [self.unit(i) for i in range(len(self))]

    def program(self, i: int) -> Program:
        return Program.from_dict(self.items[i]["structure"])

    def rules_path(self) -> Path:
        return self.root / "rules.json"
