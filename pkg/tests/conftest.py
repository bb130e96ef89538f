from pathlib import Path

import pytest

from secprompt.analyzer import Analyzer
from secprompt.corpus import CorpusSpec, build_entries, generate_programs
from secprompt.frontend import SourceUnit, default_vocab

FIXTURES = Path(__file__).parent / "fixtures"
TIMINGS: dict[str, float] = {}


def fixture_unit(name: str) -> SourceUnit:
    return SourceUnit((FIXTURES / name).read_text("utf-8"), name)


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def corpus60():
    return build_entries(generate_programs(CorpusSpec(count=60)))


@pytest.fixture(scope="session")
def subset20():
    programs = generate_programs(CorpusSpec(count=20, seed=11))
    return programs, build_entries(programs)


@pytest.fixture(scope="session")
def trained():
    """The desk-scale model shared by the end-to-end tests: 50 programs, default config, seed 7."""
    from secprompt import ggan
    from secprompt.neural import TrainConfig

    import time

    t0 = time.perf_counter()
    analyzer = Analyzer()
    entries = build_entries(generate_programs(CorpusSpec(count=50, seed=7)))
    model = ggan.GganModel()
    samples = [model.sample(e.unit) for e in entries]
    model, history = ggan.train(model, samples, TrainConfig(), analyzer)
    TIMINGS["train"] = time.perf_counter() - t0
    return model, history


SMALL_UNITS = ("T259-env", "T798-env", "T89-param-expr", "T327-sha256-return", "T78-argv-system",
               "T502-json", "T330-secrets", "T22-basename-call")


def small_batch(seed: int, size: int = 3):
    """A seeded model and a batch of <=8-node CFG samples with their constants prepared."""
    import numpy as np
    from secprompt.ggan import GganModel

    rng = np.random.default_rng(seed)
    model = GganModel(hidden=4, seed=seed)
    names = rng.choice(SMALL_UNITS, size=size, replace=False)
    analyzer = Analyzer()
    batch = []
    for name in names:
        s = model.sample(fixture_unit(f"templates/{name}.before"))
        s.ensure_deltas(analyzer)
        assert s.n <= 8
        batch.append(s)
    return model, batch


def active_rows(batch):
    """Vocabulary rows that can influence a first-layer product for this batch."""
    import numpy as np

    rows = set()
    for s in batch:
        rows |= set(np.nonzero(s.X.any(axis=0))[0].tolist())
        rows |= set(np.nonzero(s.entry_feat.any(axis=0))[0].tolist())
    return sorted(rows)


def layer_rows(model, names, batch):
    rows = active_rows(batch)
    return [rows if n.endswith("1") else None for n in names]


# -- acceptance reporting ---------------------------------------------------------

CRITERIA: dict[int, list[str]] = {}
NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        CRITERIA.setdefault(mark.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok = all(o == "passed" for o in CRITERIA[n])
        note = "; ".join(NOTES.get(n, []))
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}" + (f"  ({note})" if note else ""))
