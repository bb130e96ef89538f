"""Inter- vs intra-version graph edit distance over the corpus's alternate secure fixes."""
import argparse

import numpy as np

from secprompt.corpus import CorpusSpec, generate_programs, version_study
from secprompt.evaluation import inter_intra_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=60, help="corpus size to draw codebases from")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--codebases", type=int, default=10)
    args = ap.parse_args()

    study = version_study(generate_programs(CorpusSpec(count=args.count, seed=args.seed)), args.codebases)
    for kind in ("AST", "CFG", "DFG"):
        rows = [inter_intra_study(orig, versions, kind) for orig, versions in study]
        inter, intra = np.mean(rows, axis=0)
        print(f"{kind}: inter {inter:.3f}  intra {intra:.3f}  ratio {inter / intra if intra else float('inf'):.2f}")
        for (orig, versions), (a, b) in zip(study, rows):
            print(f"  {orig.id:<6} versions {len(versions):>2}  inter {a:7.3f}  intra {b:7.3f}")


if __name__ == "__main__":
    main()
