"""Acceptance gate: one test group per criterion; the summary hook prints PASS/FAIL lines."""
import itertools
import json
import math
import random
import time
from collections import Counter

import numpy as np
import pytest

from conftest import FIXTURES, NOTES, TIMINGS, layer_rows, small_batch
from secprompt import ggan, neural as nn
from secprompt.analyzer import Analyzer
from secprompt.corpus import CorpusSpec, build_entries, generate_programs, scripted_rules
from secprompt.evaluation import FuzzSpec, fuzz_compare, ged_approx, ged_exact
from secprompt.frontend import SourceUnit, build_ast, parse_text, unparse
from secprompt.llm import ScriptedClient
from secprompt.loop import LoopConfig, Mode, Status, mask_cwe, run_bl1, run_mode, run_promsec
from secprompt.neural import Mat, TrainConfig
from secprompt.reconstruct import isomorphic
from test_loop import V0, V1, client_for
from test_neural import BINARY, UNARY, _path_batch, _probe


def note(n, text):
    NOTES.setdefault(n, []).append(text)
    print(f"[criterion {n}] {text}")


# -- 1. loss unit values -------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_loss_unit_values():
    assert nn.contrastive_loss(Mat(3.7)).item() == 0.0
    assert abs(nn.contrastive_loss(Mat(0.4), Mat([[0.4]])).item() - math.log(2)) <= 1e-9
    assert nn.disc_loss(Mat([[1.0]]), Mat([[0.0]])).item() == 0.0
    assert abs(nn.adv_loss(Mat([[0.5]])).item() - math.log(2)) <= 1e-9


# -- 2. gradient fidelity ------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for op, init in UNARY.values():
            a = Mat.param(init(rng))
            probe = _probe(rng, op(a).shape)
            worst = max(worst, nn.grad_check(lambda: nn.sum_all(nn.mul(op(a), probe)), [a]))
        for name, (op, sa, sb) in BINARY.items():
            lo = 0.1 if name == "disc_loss" else None
            a = Mat.param(rng.uniform(0.1, 0.9, sa) if lo else rng.normal(size=sa))
            b = Mat.param(rng.uniform(0.1, 0.9, sb) if lo else
                          rng.uniform(0.5, 2.0, sb) if name == "div" else rng.normal(size=sb))
            probe = _probe(rng, op(a, b).shape)
            worst = max(worst, nn.grad_check(lambda: nn.sum_all(nn.mul(op(a, b), probe)), [a, b]))
        batch = _path_batch(rng, int(rng.integers(2, 9)), 5)
        w_s, w_n = Mat.param(rng.normal(size=(5, 3))), Mat.param(rng.normal(size=(5, 3)))
        w = Mat.param(rng.uniform(0.5, 1.5, size=(batch.features.rows, 1)))
        x = Mat.param(rng.normal(size=(4, 3)))
        m = rng.normal(size=(2, 4))
        probe = _probe(rng, (1, 3))

        def graph_loss():
            h = nn.graph_conv(w_s, w_n, batch, act=nn.sigmoid)
            pooled = nn.add(nn.mean_pool(h, batch.boundaries), nn.weighted_mean_pool(h, w))
            return nn.add(nn.sum_all(nn.mul(pooled, probe)), nn.sum_all(nn.const_matmul(m, x)))

        worst = max(worst, nn.grad_check(graph_loss, [w_s, w_n, w, x]))

        model, samples = small_batch(seed)
        assert all(s.n <= 8 for s in samples)
        cfg = TrainConfig()
        worst = max(worst, nn.grad_check(lambda: ggan.generator_loss(model, samples, cfg), model.gen_params,
                                         rows=layer_rows(model, model.GEN_NAMES, samples)))
        worst = max(worst, nn.grad_check(lambda: ggan.discriminator_loss(model, samples), model.disc_params,
                                         rows=layer_rows(model, model.DISC_NAMES, samples)))
    elapsed = time.perf_counter() - t0
    note(2, f"max relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-4


# -- 3. GED oracle -------------------------------------------------------------------

def brute_force_ged(a, b):
    """Minimum over every partial injective node map, costs counted from first principles."""
    (la, ea), (lb, eb) = a, b
    ka, kb = Counter((u, v, k) for u, v, k in ea), Counter((u, v, k) for u, v, k in eb)
    pairs_a = {(u, v) for u, v, _ in ea}
    pairs_b = {(u, v) for u, v, _ in eb}

    def kinds(counter, u, v):
        return Counter({k: c for (x, y, k), c in counter.items() if (x, y) == (u, v)})

    best = math.inf
    n, m = len(la), len(lb)
    for size in range(min(n, m) + 1):
        for src in itertools.combinations(range(n), size):
            for dst in itertools.permutations(range(m), size):
                f = dict(zip(src, dst))
                cost = (n - size) + (m - size) + sum(la[u] != lb[v] for u, v in f.items())
                covered = set()
                for u, v in pairs_a:
                    ca = kinds(ka, u, v)
                    if u in f and v in f:
                        cb = kinds(kb, f[u], f[v])
                        covered.add((f[u], f[v]))
                        cost += max(sum(ca.values()), sum(cb.values())) - sum((ca & cb).values())
                    else:
                        cost += sum(ca.values())
                for x, y in pairs_b - covered:
                    cost += sum(kinds(kb, x, y).values())
                best = min(best, cost)
    return best


@pytest.mark.criterion(3)
def test_c3_exact_matches_brute_force():
    graphs = json.loads((FIXTURES / "ged_small.json").read_text())
    pairs = 0
    for ga, gb in itertools.product(graphs, repeat=2):
        a, b = (ga["labels"], ga["edges"]), (gb["labels"], gb["edges"])
        assert ged_exact(a, b).distance == brute_force_ged(a, b), (ga["name"], gb["name"])
        pairs += 1
    note(3, f"{pairs} fixture pairs agree with brute force")


@pytest.mark.criterion(3)
def test_c3_approx_upper_bound():
    rng = random.Random(2024)

    def rg():
        n = rng.randint(1, 8)
        labels = [rng.choice("abcd") for _ in range(n)]
        return labels, [(u, v, rng.choice("xy")) for u in range(n) for v in range(n) if u != v and rng.random() < 0.25]

    for _ in range(200):
        a, b = rg(), rg()
        assert ged_approx(a, b).distance >= ged_exact(a, b).distance - 1e-9


# -- 4. frontend round-trip ------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c4_roundtrip_corpus(corpus60, vocab):
    assert len(corpus60) == 60
    for e in corpus60:
        ast = build_ast(parse_text(e.unit.text), vocab)
        again = build_ast(parse_text(unparse(ast).text), vocab)
        assert isomorphic(ast, again), e.program.id


# -- 5. analyzer fidelity --------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c5_analyzer(corpus60):
    seeded = 0
    for e in corpus60:
        found = {(f.cwe, f.line) for f in Analyzer()(e.unit).findings}
        for m in e.manifest:
            assert (m["cwe"], m["line"]) in found, (e.program.id, m)
            seeded += 1
        assert Analyzer()(e.twin).k == 0, e.program.id
    runs = [[json.dumps(Analyzer()(e.unit).to_dict(with_time=False), sort_keys=True) for e in corpus60]
            for _ in range(2)]
    assert runs[0] == runs[1]
    note(5, f"{seeded} seeded findings located")


# -- shared hermetic runs over the 20-program subset -------------------------------------

@pytest.fixture(scope="module")
def subset_runs(trained, subset20):
    model, _ = trained
    programs, entries = subset20
    rules = scripted_rules(programs)
    analyzer = Analyzer()
    out, seconds = {}, {}
    for mode in (Mode.PROMSEC, Mode.BL1, Mode.BL2, Mode.A2):
        t0 = time.perf_counter()
        out[mode] = [run_mode(e.unit, LoopConfig(mode=mode), model=model, client=ScriptedClient(rules),
                              analyzer=analyzer) for e in entries]
        seconds[mode] = time.perf_counter() - t0
    return out, seconds


def secured_fraction(ledgers):
    return sum(led.status is Status.SECURED for led in ledgers) / len(ledgers)


# -- 6. cost structure -------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_c6_promsec_iteration_cost(subset_runs, trained):
    led = run_promsec(SourceUnit(V1), trained[0], client_for(V0))
    assert [(t.llm_queries, t.analyses) for t in led.traces] == [(2, 1), (0, 1)]
    checked = 0
    for led in subset_runs[0][Mode.PROMSEC]:
        for t in led.traces[:-1]:
            assert (t.llm_queries, t.analyses) == (2, 1)
            checked += 1
    note(6, f"{checked + 1} non-terminal promsec iterations checked")


@pytest.mark.criterion(6)
def test_c6_bl1_cycle_cost(subset_runs):
    for led in subset_runs[0][Mode.BL1]:
        assert len(led.traces) == 7
        assert led.llm_queries() == 7 and led.analyses() == 7
    led = run_bl1(SourceUnit(V1), client_for(V1))
    assert (led.llm_queries(), led.analyses()) == (7, 7)


# -- 7. loop bound and fuzz threshold -----------------------------------------------------

@pytest.mark.criterion(7)
def test_c7_defaults_and_identical_fuzz(corpus60):
    assert LoopConfig().max_iters == 20
    e = corpus60[0]
    spec = FuzzSpec(**{k: v for k, v in e.program.fuzz_spec().items() if k not in ("trials", "threshold")})
    assert (spec.threshold, spec.trials) == (0.01, 1000)
    r = fuzz_compare(e.unit, SourceUnit(e.unit.text), spec)
    assert r.mean_abs_diff == 0.0 and r.passed and r.trials == 1000


# -- 8. hermetic end-to-end --------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_end_to_end(subset_runs, trained):
    ledgers = subset_runs[0][Mode.PROMSEC]
    assert len(ledgers) == 20
    frac = secured_fraction(ledgers)
    secured = [led for led in ledgers if led.status is Status.SECURED]
    assert all(led.final.k == 0 and len(led.traces) <= 20 for led in secured)
    sim = float(np.mean([led.final.similarity for led in ledgers]))
    total = TIMINGS.get("train", 0.0) + subset_runs[1][Mode.PROMSEC]
    note(8, f"secured {frac:.0%}, mean similarity {sim:.4f}, train+run {total:.1f} s")
    assert frac >= 0.9 and sim >= 0.8 and total < 120


# -- 9. training convergence ---------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_convergence(trained):
    model, history = trained
    assert len(history) == 30
    assert all(math.isfinite(h.loss_g) and math.isfinite(h.loss_d) for h in history)
    ratio = history[-1].loss_g / history[0].loss_g
    note(9, f"L_G epoch 30 / epoch 1 = {ratio:.3f}")
    assert ratio <= 0.8
    entries = build_entries(generate_programs(CorpusSpec(count=50, seed=7)))
    again = ggan.GganModel()
    again, hist2 = ggan.train(again, [again.sample(e.unit) for e in entries], TrainConfig(), Analyzer())
    assert [h.to_dict() for h in hist2] == [h.to_dict() for h in history]
    assert all(np.array_equal(a, b) for a, b in zip(again.arrays(), model.arrays()))


# -- 10. direction checks ------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_directions(subset_runs):
    runs = subset_runs[0]
    p, b1 = secured_fraction(runs[Mode.PROMSEC]), secured_fraction(runs[Mode.BL1])
    for led in runs[Mode.BL2]:
        best = [t.best_k for t in led.traces]
        assert all(x >= y for x, y in zip(best, best[1:]))
    sim = {m: float(np.mean([led.best.similarity for led in runs[m]])) for m in (Mode.PROMSEC, Mode.A2)}
    note(10, f"secured promsec {p:.0%} vs bl1 {b1:.0%}; similarity promsec {sim[Mode.PROMSEC]:.4f} "
             f"vs a2 {sim[Mode.A2]:.4f}")
    assert p >= b1
    assert sim[Mode.A2] < sim[Mode.PROMSEC]


# -- 11. masked-CWE generalization ----------------------------------------------------------

@pytest.mark.criterion(11)
def test_c11_masked_cwe78():
    analyzer = Analyzer()
    train_entries = build_entries(generate_programs(CorpusSpec(count=50, seed=7)))
    units = mask_cwe([e.unit for e in train_entries], 78, analyzer)
    model = ggan.GganModel()
    model, _ = ggan.train(model, [model.sample(u) for u in units], TrainConfig(), analyzer)
    test_programs = generate_programs(CorpusSpec(count=20, seed=11, mix={78: 1.0}))
    rules = scripted_rules(test_programs)
    k0, k1 = [], []
    for e in build_entries(test_programs):
        assert 78 in analyzer(e.unit).cwes()
        led = run_promsec(e.unit, model, ScriptedClient(rules), analyzer)
        k0.append(led.traces[0].k)
        k1.append(led.best.k)
    reduction = 1 - np.mean(k1) / np.mean(k0)
    note(11, f"{len(units)} training units, {len(k0)} test programs, mean k {np.mean(k0):.2f} -> "
             f"{np.mean(k1):.2f} ({reduction:.0%} reduction)")
    assert reduction >= 0.5
