"""LLM clients: code generation, prompt inference, BL1 templates and token accounting."""
from __future__ import annotations

import itertools
import json
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import requests

from .analyzer import SecurityReport
from .frontend import Origin, SourceUnit

SYSTEM_INSTRUCTION = "Reply with code only, inside a single fenced code block."
INFER_MARKER = "write the detailed request"
INFER_INSTRUCTION = f"Study the code below and {INFER_MARKER} a developer could have given to obtain it."

_record_ids = itertools.count(1)
_TOKEN = re.compile(r"\w+|[^\w\s]")
_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)


class LlmError(Exception):
    pass


class HttpError(LlmError):
    pass


class LlmTimeout(LlmError):
    pass


class NoCodeBlock(LlmError):
    def __init__(self, reply: str):
        super().__init__("reply contains no fenced code block")
        self.reply = reply


def count_tokens(text: str) -> int:
    """Word runs count once; every punctuation character counts on its own."""
    return len(_TOKEN.findall(text))


_ROLE = re.compile(r"^(initial|inferred|template-[1-7])$")


@dataclass
class PromptRecord:
    text: str
    role: str = "initial"
    iteration: int = 0
    parent: int | None = None
    id: int = field(default_factory=lambda: next(_record_ids))

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("prompt text must be non-empty")
        if not _ROLE.match(self.role):
            raise ValueError(f"unknown prompt role {self.role!r}")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LlmExchange:
    messages: list[dict]
    reply: str
    input_tokens: int
    output_tokens: int
    latency: float
    client: str
    purpose: str = "generate"
    error: str | None = None

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def to_dict(self):
        return asdict(self)


class CostLog:
    """Append-only exchange log; appends are serialized."""

    def __init__(self):
        self._items: list[LlmExchange] = []
        self._lock = threading.Lock()

    def append(self, ex: LlmExchange):
        with self._lock:
            self._items.append(ex)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(list(self._items))

    def since(self, mark: int) -> list[LlmExchange]:
        return self._items[mark:]


@dataclass
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    credential_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 2

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class LlmClient:
    kind = "abstract"

    def __init__(self):
        self.log = CostLog()

    def complete(self, messages: list[dict]) -> tuple[str, int | None, int | None]:
        """Return (reply, provider input tokens, provider output tokens)."""
        raise NotImplementedError

    def exchange(self, messages: list[dict], purpose: str) -> LlmExchange:
        start = time.perf_counter()
        error = None
        try:
            reply, tin, tout = self.complete(messages)
        except LlmError as exc:
            ex = LlmExchange(messages, "", sum(count_tokens(m["content"]) for m in messages), 0,
                             time.perf_counter() - start, self.kind, purpose, str(exc))
            self.log.append(ex)
            raise
        tin = tin if tin is not None else sum(count_tokens(m["content"]) for m in messages)
        tout = tout if tout is not None else count_tokens(reply)
        ex = LlmExchange(messages, reply, tin, tout, time.perf_counter() - start, self.kind, purpose, error)
        self.log.append(ex)
        return ex


class HttpClient(LlmClient):
    """Chat-completions adapter; the bearer credential comes from an environment variable."""

    kind = "http"

    def __init__(self, cfg: LlmConfig | None = None, session: requests.Session | None = None):
        super().__init__()
        self.cfg = cfg or LlmConfig()
        self.session = session or requests.Session()

    def _headers(self) -> dict:
        token = os.environ.get(self.cfg.credential_env)
        if not token:
            raise HttpError(f"environment variable {self.cfg.credential_env} is not set")
        return {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}

    def complete(self, messages):
        body = {"model": self.cfg.model, "messages": messages, "temperature": self.cfg.temperature}
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                r = self.session.post(self.cfg.endpoint, json=body, headers=self._headers(),
                                      timeout=self.cfg.timeout)
            except requests.Timeout:
                last = LlmTimeout(f"no reply within {self.cfg.timeout}s")
            except requests.RequestException as exc:
                last = HttpError(f"request failed: {type(exc).__name__}")
            else:
                if r.status_code == 200:
                    return self._parse(r)
                last = HttpError(f"HTTP {r.status_code}")
                if r.status_code < 500 and r.status_code != 429:
                    break
            if attempt < self.cfg.max_retries:
                time.sleep(min(2.0 ** attempt * 0.5, 8.0))
        raise last

    @staticmethod
    def _parse(r) -> tuple[str, int | None, int | None]:
        try:
            doc = r.json()
            reply = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise HttpError("malformed completion response") from exc
        usage = doc.get("usage") or {}
        return reply, usage.get("prompt_tokens"), usage.get("completion_tokens")


# -- scripted client ----------------------------------------------------------------------

PRACTICES: dict[int, str] = {
    78: "pass command arguments as a list instead of a shell string",
    89: "use parameterized SQL queries",
    259: "read passwords from the environment",
    798: "read credentials from the environment",
    327: "use SHA-256 for hashing",
    330: "use the secrets module for random values",
    502: "deserialize only with safe loaders",
    22: "strip directory components from file names",
}

# code idioms from which the scripted client infers that a practice was followed
EVIDENCE: dict[int, re.Pattern] = {
    78: re.compile(r"shlex\.quote\(|subprocess\.\w+\(\["),
    89: re.compile(r"execute\(\s*\"[^\"]*(\?|:\w+)[^\"]*\"\s*,"),
    259: re.compile(r"passw\w*\s*=\s*os\.(environ|getenv)"),
    798: re.compile(r"(api_key|secret|token|key)\s*=\s*os\.(environ|getenv)"),
    327: re.compile(r"sha256|sha512|sha3_"),
    330: re.compile(r"secrets\."),
    502: re.compile(r"json\.loads|yaml\.safe_load|SafeLoader"),
    22: re.compile(r"os\.path\.basename\("),
}

_COND = re.compile(r"\$\{if:([^}]*)\}(.*?)(?:\$\{else\}(.*?))?\$\{end\}", re.S)
_DEF = re.compile(r"^\s*def\s+(\w+)\s*\(([^)]*)\)", re.M)


def practice_requested(cwe: int, text: str) -> bool:
    return bool(re.search(rf"\bCWE-{cwe}\b", text)) or PRACTICES[cwe].lower() in text.lower()


def evidenced_practices(code: str) -> list[int]:
    return [c for c, pat in EVIDENCE.items() if pat.search(code)]


@dataclass
class ScriptedRule:
    patterns: list[str]
    response: str = ""
    states: list[str] | None = None
    name: str = ""

    def __post_init__(self):
        if not self.patterns:
            raise ValueError("a scripted rule needs at least one pattern")
        self._compiled = [re.compile(p, re.S) for p in self.patterns]

    def matches(self, text: str) -> bool:
        return any(p.search(text) for p in self._compiled)

    @classmethod
    def from_dict(cls, d) -> "ScriptedRule":
        return cls(list(d["patterns"]), d.get("response", ""), d.get("states"), d.get("name", ""))

    def to_dict(self):
        d = {"name": self.name, "patterns": self.patterns, "response": self.response}
        if self.states:
            d["states"] = self.states
        return d


class ScriptedClient(LlmClient):
    """Deterministic test double: the first rule whose pattern matches the prompt answers it."""

    kind = "scripted"

    def __init__(self, rules):
        super().__init__()
        if isinstance(rules, (str, Path)):
            rules = json.loads(Path(rules).read_text("utf-8"))
        self.rules = [r if isinstance(r, ScriptedRule) else ScriptedRule.from_dict(r) for r in rules]
        if not self.rules:
            raise ValueError("no scripted rules")
        self.counters = [0] * len(self.rules)
        self._lock = threading.Lock()

    def complete(self, messages):
        text = "\n".join(m["content"] for m in messages if m["role"] != "system")
        for i, rule in enumerate(self.rules):
            if rule.matches(text):
                with self._lock:
                    n = self.counters[i]
                    self.counters[i] += 1
                template = rule.states[min(n, len(rule.states) - 1)] if rule.states else rule.response
                return render_reply(template, text, n + 1), None, None
        raise LlmError("no scripted rule matched")

    def reset(self):
        self.counters = [0] * len(self.rules)


def _code_of(text: str) -> str:
    m = _FENCE.search(text)
    return m.group(1) if m else text


def render_reply(template: str, prompt: str, n: int) -> str:
    """Expand ``${if:..}``, ``${code}``, ``${functions}``, ``${practices}`` and ``${N}``."""

    def holds(term: str) -> bool:
        term = term.strip()
        if term.startswith("!"):
            return not practice_requested(int(term[1:]), prompt)
        return practice_requested(int(term), prompt)

    def cond(m):
        ok = any(holds(t) for t in m.group(1).split(",") if t.strip())
        return m.group(2) if ok else (m.group(3) or "")

    out = _COND.sub(cond, template)
    if "${" not in out:
        return out
    code = _code_of(prompt)
    funcs = ", ".join(f"{name}({', '.join(a.strip() for a in args.split(',') if a.strip())})"
                      for name, args in _DEF.findall(code))
    practices = evidenced_practices(code)
    prac = (" Follow these practices: " + "; ".join(PRACTICES[c] for c in practices) + ".") if practices else ""
    return (out.replace("${code}", code).replace("${functions}", funcs)
            .replace("${practices}", prac).replace("${N}", str(n)))


# -- operations ----------------------------------------------------------------------------------

def extract_code(reply: str) -> str:
    m = _FENCE.search(reply)
    if not m:
        raise NoCodeBlock(reply)
    return m.group(1)


def generate_code(client: LlmClient, prompt: PromptRecord) -> SourceUnit:
    messages = [{"role": "system", "content": SYSTEM_INSTRUCTION}, {"role": "user", "content": prompt.text}]
    ex = client.exchange(messages, "generate")
    code = extract_code(ex.reply)
    if not code.endswith("\n"):
        code += "\n"
    return SourceUnit(code, f"llm-{prompt.id}", origin=Origin.LLM)


def infer_prompt(client: LlmClient, code: SourceUnit, iteration: int = 0, parent: int | None = None
                 ) -> PromptRecord:
    if not code.text.strip():
        raise ValueError("cannot infer a prompt from empty code")
    messages = [{"role": "user", "content": f"{INFER_INSTRUCTION}\n\n```python\n{code.text}```"}]
    ex = client.exchange(messages, "infer")
    text = ex.reply.strip()
    if not text:
        raise LlmError("empty prompt inferred")
    return PromptRecord(text, "inferred", iteration, parent)


# -- BL1 templates -------------------------------------------------------------------------------

@dataclass
class BlTemplate:
    index: int
    item: str
    text: str


def load_bl_templates(path=None) -> dict[int, BlTemplate]:
    raw = (Path(path).read_text("utf-8") if path else
           resources.files("secprompt.data").joinpath("bl_templates.txt").read_text("utf-8"))
    out: dict[int, BlTemplate] = {}
    parts = re.split(r"^\[T(\d)\]\s*$", raw, flags=re.M)
    for idx, body in zip(parts[1::2], parts[2::2]):
        item, text = "", []
        for line in body.strip("\n").split("\n"):
            if line.startswith("item:"):
                item = line[5:].strip()
            elif not line.startswith("#"):
                text.append(line)
        out[int(idx)] = BlTemplate(int(idx), item, "\n".join(text).strip("\n"))
    if sorted(out) != list(range(1, 8)):
        raise ValueError("template file must define sections T1..T7")
    return out


_BL_CACHE: dict[int, BlTemplate] | None = None


def render_bl_template(index: int, base: PromptRecord, report: SecurityReport,
                       templates: dict[int, BlTemplate] | None = None) -> PromptRecord:
    global _BL_CACHE
    if not 1 <= index <= 7:
        raise ValueError("template index must be in 1..7")
    if templates is None:
        if _BL_CACHE is None:
            _BL_CACHE = load_bl_templates()
        templates = _BL_CACHE
    t = templates[index]
    if index == 1:
        return PromptRecord(base.text, "template-1", base.iteration, base.id)
    items = []
    for f in report.findings:
        items.append(t.item.replace("${line}", str(f.line)).replace("${cwe}", f"CWE-{f.cwe}")
                     .replace("${confidence}", f.confidence.value))
    body = t.text.replace("${base}", base.text).replace("${items}", "; ".join(items) if items else "none")
    return PromptRecord(body, f"template-{index}", base.iteration, base.id)
