"""Regenerate tests/fixtures/templates/*.after from the .before files.

Each .before file is a minimal unit where exactly one node admits the named
template. Review the diff by eye before committing regenerated goldens.
"""
import sys
from pathlib import Path

from secprompt.analyzer import analyze
from secprompt.edits import apply_plan, enumerate_candidates
from secprompt.frontend import GraphKind, SourceUnit, default_vocab
from secprompt.frontend.graphs import build_graph
from secprompt.reconstruct import reconstruct
from secprompt.templates import CodeContext

ROOT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "templates"


def realize(before: Path) -> str:
    unit = SourceUnit(before.read_text("utf-8"))
    ctx = CodeContext(unit)
    g = build_graph(ctx.tree, default_vocab(), GraphKind.CFG)
    acts = {v: a for v, cs in enumerate(enumerate_candidates(ctx, g)) for a in cs if a.template == before.stem}
    if len(acts) != 1:
        raise SystemExit(f"{before.name}: expected one candidate node, found {len(acts)}")
    gh, _ = apply_plan(g, acts)
    return reconstruct(unit, g, gh).unit.text


def main():
    for before in sorted(ROOT.glob("*.before")):
        after = realize(before)
        k0, k1 = analyze(SourceUnit(before.read_text("utf-8"))).k, analyze(SourceUnit(after)).k
        print(f"{before.stem}: k {k0} -> {k1}")
        if "--write" in sys.argv:
            before.with_suffix(".after").write_text(after, "utf-8")


if __name__ == "__main__":
    main()
