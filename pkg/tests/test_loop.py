import math
import random

import pytest

from secprompt import llm
from secprompt.analyzer import Analyzer
from secprompt.frontend import SourceUnit
from secprompt.ggan import GganModel
from secprompt.llm import ScriptedClient
from secprompt.loop import (
    EmptyTrainingSet, LoopConfig, Mode, RunLedger, Status, mask_cwe, run_ablation, run_bl1, run_bl2,
    run_mode, run_promsec,
)

V2 = ("import os\n\n\ndef run(cur, name):\n    os.system('ls ' + name)\n"
      "    cur.execute(\"SELECT * FROM t WHERE n = '%s'\" % name)\n")
V1 = "import os\n\n\ndef run(cur, name):\n    os.system('ls ' + name)\n"
V0 = "def run(cur, name):\n    return name\n"
K = {V2: 2, V1: 1, V0: 0}
INFER = {"patterns": [llm.INFER_MARKER], "response": "Write ${functions}."}


def fenced(code):
    return f"```python\n{code}```"


def client_for(*states):
    return ScriptedClient([INFER, {"patterns": ["."], "states": [fenced(s) for s in states]}])


@pytest.fixture(scope="module")
def model():
    return GganModel(seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(max_iters=0)
    with pytest.raises(ValueError):
        LoopConfig(epsilon=-1)
    with pytest.raises(ValueError):
        LoopConfig(mode="bl3")
    assert LoopConfig().max_iters == 20 and LoopConfig(graph_kind="dfg").to_dict()["graph_kind"] == "DFG"


def test_clean_input_stops_immediately(model):
    client = client_for(V0)
    led = run_promsec(SourceUnit(V0), model, client)
    assert led.status is Status.SECURED and len(led.traces) == 1
    assert led.llm_queries() == 0 and led.analyses() == 1 and len(client.log) == 0


def test_two_turn_mock_secures_on_second_iteration(model):
    client = client_for(V1, V0)
    led = run_promsec("write run()", model, client)
    assert led.status is Status.SECURED
    assert [t.k for t in led.traces] == [1, 0]
    first = led.traces[0]
    assert (first.llm_queries, first.analyses) == (2, 1)
    assert led.traces[1].llm_queries == 0
    # the bootstrap generation is reported apart from the iterations
    assert led.bootstrap["llm_queries"] == 1 and len(client.log) == 3
    assert led.traces[1].prompt["role"] == "inferred"


def test_non_cooperative_mock_exhausts_budget(model):
    led = run_promsec(SourceUnit(V1), model, client_for(V1))
    assert led.status is Status.EXHAUSTED and len(led.traces) == 20
    assert all(t.k == 1 for t in led.traces)
    assert led.llm_queries() == 40 and led.analyses() == 20


def test_repeated_failures_end_in_error(model):
    client = ScriptedClient([INFER, {"patterns": ["."], "response": "no code today"}])
    led = run_promsec(SourceUnit(V1), model, client)
    assert led.status is Status.ERROR and len(led.traces) == 3
    assert all(t.error.startswith("NoCodeBlock") for t in led.traces)


def test_promsec_requires_model_and_mode():
    with pytest.raises(ValueError):
        run_promsec(SourceUnit(V1), None, client_for(V0))
    with pytest.raises(ValueError):
        run_promsec(SourceUnit(V1), GganModel(seed=0), client_for(V0), cfg=LoopConfig(mode="bl1"))


def test_bl1_runs_all_seven_templates():
    client = client_for(V1, V1, V0, V1, V1, V1, V1)
    led = run_bl1(SourceUnit(V2), client)
    assert [t.template for t in led.traces] == list(range(1, 8))
    assert led.llm_queries() == 7 and led.analyses() == 7
    assert led.status is Status.SECURED and led.best.template == 3
    assert led.bootstrap["llm_queries"] == 1 and led.bootstrap["analyses"] == 1


def test_bl1_tie_goes_to_first_template():
    led = run_bl1(SourceUnit(V1), client_for(V0))
    assert all(t.k == 0 for t in led.traces) and led.best.template == 1


def test_bl1_from_prompt_skips_inference():
    client = client_for(V2, V1)
    led = run_bl1("write run()", client)
    assert led.bootstrap["llm_queries"] == 1
    assert led.traces[0].prompt["text"] == "write run()"


@pytest.mark.parametrize("seed", range(50))
def test_bl2_best_k_never_increases(seed):
    rng = random.Random(seed)
    states = [rng.choice([V2, V1, V1, V0]) for _ in range(21)]
    led = run_bl2(SourceUnit(V2), client_for(*states), cfg=LoopConfig(mode="bl2", max_iters=3))
    best = [t.best_k for t in led.traces]
    assert all(a >= b for a, b in zip(best, best[1:]))
    running = 2
    for t in led.traces:
        running = min(running, t.k)
        assert t.best_k == running
    assert len(led.traces) % 7 == 0
    # cycles continue only while nothing is secured
    assert (led.status is Status.SECURED) == (min(t.k for t in led.traces) == 0)
    if led.status is Status.SECURED:
        assert min(t.k for t in led.traces[-7:]) == 0


def test_bl2_anchors_later_cycles_on_best_code():
    led = run_bl2(SourceUnit(V2), client_for(*([V1] * 7 + [V1] * 7)), cfg=LoopConfig(mode="bl2", max_iters=2))
    assert len(led.traces) == 14
    later = led.traces[7].prompt["text"]
    assert "Start from this version" in later and "os.system" in later and "execute" not in later


def test_a1_costs(model):
    led = run_ablation(SourceUnit(V1), "a1-no-ggan", client=client_for(V1, V0))
    assert led.status is Status.SECURED
    assert (led.traces[0].llm_queries, led.traces[0].analyses) == (2, 1)


def test_a2_costs_no_queries(model):
    led = run_ablation(SourceUnit(V1), Mode.A2, model=model, cfg=LoopConfig(max_iters=3))
    assert led.llm_queries() == 0 and led.analyses() == len(led.traces)


def test_ablation_argument_checks(model):
    with pytest.raises(ValueError):
        run_ablation(SourceUnit(V1), "a1-no-ggan")
    with pytest.raises(ValueError):
        run_ablation(SourceUnit(V1), "a2-no-llm")
    with pytest.raises(ValueError):
        run_ablation(SourceUnit(V1), "bl1", model=model)


def test_run_mode_dispatch(model):
    for mode in Mode:
        led = run_mode(SourceUnit(V0), LoopConfig(mode=mode, max_iters=1), model=model, client=client_for(V0))
        assert led.config["mode"] == mode.value and led.status is Status.SECURED


def test_status_matches_threshold(model):
    for eps, want in [(0, Status.EXHAUSTED), (1, Status.SECURED)]:
        led = run_promsec(SourceUnit(V1), model, client_for(V1), cfg=LoopConfig(epsilon=eps, max_iters=2))
        assert led.status is want
        assert (led.status is Status.SECURED) == (min(t.k for t in led.traces) <= eps)


def test_ledger_roundtrip(tmp_path, model):
    led = run_promsec("write run()", model, client_for(V1, V0))
    path = tmp_path / "run.jsonl"
    led.write(path)
    back = RunLedger.read(path)
    assert back.header() == led.header()
    assert [t.to_dict() for t in back.traces] == [t.to_dict() for t in led.traces]
    assert all("code" not in t.to_dict() for t in led.traces)
    assert not any(math.isnan(t.ged) for t in led.traces)


# -- masking ----------------------------------------------------------------------------

def test_mask_cwe_removes_exactly_flagged_units(corpus60):
    units = [e.unit for e in corpus60]
    an = Analyzer()
    kept = mask_cwe(units, 78, an)
    assert kept == [u for u in units if 78 not in an(u).cwes()]
    assert 0 < len(kept) < len(units)


def test_mask_cwe_absent_keeps_everything():
    units = [SourceUnit(V1), SourceUnit(V0)]
    assert mask_cwe(units, 259) == units


def test_mask_cwe_all_masked():
    with pytest.raises(EmptyTrainingSet):
        mask_cwe([SourceUnit(V1), SourceUnit(V2)], 78)
    with pytest.raises(ValueError):
        mask_cwe([SourceUnit(V1)], 79)
