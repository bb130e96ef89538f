"""Train with one CWE withheld and measure how far the loop still reduces it on held-out programs."""
import argparse

import numpy as np

from secprompt import ggan
from secprompt.analyzer import Analyzer
from secprompt.corpus import CorpusSpec, build_entries, generate_programs, scripted_rules
from secprompt.llm import ScriptedClient
from secprompt.loop import mask_cwe, run_promsec
from secprompt.neural import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cwe", type=int, default=78)
    ap.add_argument("--train-count", type=int, default=50)
    ap.add_argument("--test-count", type=int, default=20)
    ap.add_argument("--test-seed", type=int, default=11)
    args = ap.parse_args()

    analyzer = Analyzer()
    train = build_entries(generate_programs(CorpusSpec(count=args.train_count, seed=7)))
    units = mask_cwe([e.unit for e in train], args.cwe, analyzer)
    model = ggan.GganModel()
    model, _ = ggan.train(model, [model.sample(u) for u in units], TrainConfig(), analyzer)
    print(f"trained on {len(units)} of {len(train)} programs (CWE-{args.cwe} withheld)")

    programs = generate_programs(CorpusSpec(count=args.test_count, seed=args.test_seed, mix={args.cwe: 1.0}))
    rules = scripted_rules(programs)
    k0, k1 = [], []
    for e in build_entries(programs):
        led = run_promsec(e.unit, model, ScriptedClient(rules), analyzer)
        k0.append(led.traces[0].k)
        k1.append(led.best.k)
        print(f"  {e.program.id}  k {k0[-1]} -> {k1[-1]}  {led.status.value}")
    print(f"mean k {np.mean(k0):.2f} -> {np.mean(k1):.2f}; reduction {1 - np.mean(k1) / np.mean(k0):.0%}")


if __name__ == "__main__":
    main()
