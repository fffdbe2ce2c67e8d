"""Test the synthetic dataset generator, edit splits and dataset files."""

import pytest

from src.scenlab.evaluation.dataset import (
    FACTS_FILE,
    MAX_REWRITES,
    PROMPT_CLOSE,
    build_edit_splits,
    gen_synthetic_facts,
    read_dataset,
    read_records,
    samples_from_records,
    write_dataset,
)
from src.scenlab.exceptions import DatasetError


def test_generation_is_deterministic():
    """Equal seeds give equal datasets and different seeds differ."""
    first = gen_synthetic_facts(seed=3, n_facts=20, n_passages=2)
    assert first == gen_synthetic_facts(seed=3, n_facts=20, n_passages=2)
    assert first.facts != gen_synthetic_facts(seed=4, n_facts=20, n_passages=2).facts


def test_fact_shape(tiny_dataset):
    """Every fact has rewrites, a distinct counterfactual and a closed prompt."""
    assert len(tiny_dataset.facts) == 12
    assert len({f.id for f in tiny_dataset.facts}) == 12
    for fact in tiny_dataset.facts:
        assert len(fact.rewrites) == 3
        assert fact.counterfactual != fact.answer
        assert fact.prompt.split()[-1] == PROMPT_CLOSE
        assert fact.prompt not in fact.rewrites
        assert fact.subject in fact.prompt


def test_subjects_are_unique_single_words():
    """No two facts or passages share a subject word."""
    dataset = gen_synthetic_facts(seed=2, n_facts=60, n_passages=5)
    subjects = [fact.subject for fact in dataset.facts]
    assert all(len(subject.split()) == 1 for subject in subjects)
    assert len(set(subjects)) == len(subjects)
    passage_subjects = {passage.text.split()[0] for passage in dataset.passages if passage.kind != "unrelated"}
    assert not passage_subjects & set(subjects)


def test_passage_sets(tiny_dataset):
    """Edited passages are learned wrongly and corrected; the others are learned as written."""
    for kind in ("accurate", "edited", "unrelated"):
        assert len(tiny_dataset.passages_of(kind)) == 2
    for passage in tiny_dataset.passages_of("edited"):
        assert passage.text != passage.corrected
        assert passage.sample().target == passage.corrected
    for passage in tiny_dataset.passages_of("accurate") + tiny_dataset.passages_of("unrelated"):
        assert passage.text == passage.corrected
    with pytest.raises(ValueError):
        tiny_dataset.passages_of("fiction")


def test_training_pairs_cover_rewrites(tiny_dataset):
    """The base model learns each fact under every phrasing."""
    pairs = tiny_dataset.training_pairs()
    assert len(pairs) == 12 * 4 + 6
    fact = tiny_dataset.facts[0]
    assert (fact.rewrites[0], fact.answer) in pairs


def test_vocabulary_covers_everything(tiny_dataset):
    """Counterfactuals and corrections are in the vocabulary."""
    tokenizer = tiny_dataset.tokenizer()
    assert not any(tokenizer.encode(text).has_unknown for text in tiny_dataset.texts())


@pytest.mark.parametrize("kwargs", [{"n_facts": 5}, {"n_facts": 20, "n_rewrites": 2}, {"n_facts": 20, "n_rewrites": MAX_REWRITES + 1}, {"n_facts": 20, "max_vocab": 20}])
def test_generator_errors(kwargs):
    """Sizes out of range and oversized vocabularies are dataset errors."""
    with pytest.raises(DatasetError):
        gen_synthetic_facts(seed=1, **kwargs)


def test_max_rewrites():
    """Up to four paraphrases per fact."""
    dataset = gen_synthetic_facts(seed=1, n_facts=10, n_rewrites=MAX_REWRITES)
    assert all(len(f.rewrites) == MAX_REWRITES for f in dataset.facts)


def test_edit_splits(tiny_model, tiny_dataset, mocker):
    """Correctly answered facts are split into counterfactual edits and locality queries."""
    answered = {f.prompt for f in tiny_dataset.facts[1::2]}
    mocker.patch("src.scenlab.evaluation.dataset.decodes_to", side_effect=lambda model, prompt, target: prompt in answered)
    splits = build_edit_splits(tiny_model, tiny_dataset, n_edits=2, n_loc=3)
    facts = tiny_dataset.facts
    assert [s.id for s in splits.edit] == [facts[1].id, facts[3].id]
    assert [s.target for s in splits.edit] == [facts[1].counterfactual, facts[3].counterfactual]
    assert [s.id for s in splits.loc] == [facts[5].id, facts[7].id, facts[9].id]
    assert [s.target for s in splits.loc] == [facts[5].answer, facts[7].answer, facts[9].answer]
    assert not {s.id for s in splits.edit} & {s.id for s in splits.loc}


def test_edit_splits_need_enough_correct_facts(tiny_model, tiny_dataset, mocker):
    """Too few correctly answered facts is a dataset error."""
    mocker.patch("src.scenlab.evaluation.dataset.decodes_to", return_value=False)
    with pytest.raises(DatasetError, match="correctly"):
        build_edit_splits(tiny_model, tiny_dataset, n_edits=1, n_loc=1)


def test_files_round_trip(tiny_dataset, tmp_path):
    """Written datasets read back equal."""
    write_dataset(tmp_path, tiny_dataset)
    assert read_dataset(tmp_path) == tiny_dataset
    samples = samples_from_records(read_records(tmp_path / FACTS_FILE))
    assert samples[0] == tiny_dataset.facts[0].sample()


def test_missing_and_broken_files(tmp_path):
    """Missing files and bad lines are dataset errors."""
    with pytest.raises(DatasetError, match="does not exist"):
        read_records(tmp_path / "nothing.jsonl")
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"id": 1}\nnot json\n')
    with pytest.raises(DatasetError, match="broken.jsonl:2"):
        read_records(broken)
