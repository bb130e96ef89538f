import pytest

from secprompt.analyzer import analyze
from secprompt.corpus import (
    Corpus, CorpusSpec, Program, build_entries, generate_programs, scripted_rules, secure_versions, write_corpus,
)
from secprompt.llm import PRACTICES, PromptRecord, ScriptedClient, generate_code


def test_spec_validation():
    assert generate_programs(CorpusSpec(count=0)) == []
    with pytest.raises(ValueError):
        CorpusSpec(count=-1)
    with pytest.raises(ValueError):
        CorpusSpec(statements=(5, 2))
    with pytest.raises(ValueError):
        CorpusSpec(mix={79: 1.0})


def test_generation_is_seeded():
    a = [p.to_dict() for p in generate_programs(CorpusSpec(count=5, seed=3))]
    b = [p.to_dict() for p in generate_programs(CorpusSpec(count=5, seed=3))]
    c = [p.to_dict() for p in generate_programs(CorpusSpec(count=5, seed=4))]
    assert a == b != c


def test_primary_function_names_are_unique(corpus60):
    names = [e.program.functions[0] for e in corpus60]
    assert len(set(names)) == len(names)


def test_program_dict_roundtrip(corpus60):
    p = corpus60[0].program
    assert Program.from_dict(p.to_dict()).render() == p.render()


def test_secure_versions_are_clean_and_distinct():
    p = generate_programs(CorpusSpec(count=1))[0]
    versions = secure_versions(p)
    assert len({v.text for v in versions}) == len(versions) >= 1
    assert all(analyze(v).k == 0 for v in versions)


def test_scripted_rules_follow_requested_practices(corpus60):
    entries = corpus60[:5]
    client = ScriptedClient(scripted_rules([e.program for e in entries]))
    for e in entries:
        plain = generate_code(client, PromptRecord(e.program.prompt()))
        assert plain.text == e.unit.text
        asked = PromptRecord(e.program.prompt() + " Follow these practices: "
                             + "; ".join(PRACTICES[c] for c in e.program.cwes) + ".")
        assert analyze(generate_code(client, asked)).k == 0


def test_write_and_load(tmp_path):
    spec = CorpusSpec(count=3, seed=2)
    root = write_corpus(spec, tmp_path)
    c = Corpus.load(root)
    entries = build_entries(generate_programs(spec))
    assert len(c) == 3
    assert [u.text for u in c.units()] == [e.unit.text for e in entries]
    assert c.twin(1).text == entries[1].twin.text
    assert c.program(2).to_dict() == entries[2].program.to_dict()
