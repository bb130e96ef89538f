"""Train the desk-scale model, then run every loop mode over a seeded program subset.

Prints secured fraction, mean similarity and query/analysis totals per mode.
"""
import argparse
import time

import numpy as np

from secprompt import ggan
from secprompt.analyzer import Analyzer
from secprompt.corpus import CorpusSpec, build_entries, generate_programs, scripted_rules
from secprompt.llm import ScriptedClient
from secprompt.loop import LoopConfig, Mode, Status, run_mode
from secprompt.neural import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-count", type=int, default=50)
    ap.add_argument("--train-seed", type=int, default=7)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--checkpoint", help="reuse a saved model instead of training")
    ap.add_argument("--modes", default=",".join(m.value for m in Mode))
    args = ap.parse_args()

    analyzer = Analyzer()
    t0 = time.perf_counter()
    if args.checkpoint:
        model = ggan.load(args.checkpoint)
    else:
        entries = build_entries(generate_programs(CorpusSpec(count=args.train_count, seed=args.train_seed)))
        model = ggan.GganModel()
        model, history = ggan.train(model, [model.sample(e.unit) for e in entries], TrainConfig(), analyzer)
        print(f"trained in {time.perf_counter() - t0:.1f} s; L_G {history[0].loss_g:.4f} -> {history[-1].loss_g:.4f}")

    programs = generate_programs(CorpusSpec(count=args.count, seed=args.seed))
    rules = scripted_rules(programs)
    entries = build_entries(programs)
    print(f"{'mode':<12} {'secured':>8} {'similarity':>11} {'iters':>6} {'queries':>8} {'analyses':>9} {'sec':>6}")
    for name in args.modes.split(","):
        mode = Mode(name)
        t0 = time.perf_counter()
        ledgers = [run_mode(e.unit, LoopConfig(mode=mode), model=model, client=ScriptedClient(rules),
                            analyzer=analyzer) for e in entries]
        secured = np.mean([led.status is Status.SECURED for led in ledgers])
        sim = np.mean([led.best.similarity for led in ledgers if led.best])
        iters = np.mean([len(led.traces) for led in ledgers])
        print(f"{mode.value:<12} {secured:>8.2f} {sim:>11.4f} {iters:>6.1f} "
              f"{sum(led.llm_queries() for led in ledgers):>8} {sum(led.analyses() for led in ledgers):>9} "
              f"{time.perf_counter() - t0:>6.1f}")


if __name__ == "__main__":
    main()
