"""
Synthetic fact and passage datasets.

Facts are subject-relation-object triples asked through a canonical question and
several paraphrases. Passages are short biographies behind a fixed opening prompt:
an accurate set, a set the base model learns wrongly and that editing corrects, and
a set of unrelated sentences.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from src.scenlab.editing.experts import decodes_to
from src.scenlab.editing.records import EditSample
from src.scenlab.exceptions import DatasetError
from src.scenlab.lm.model import TransformerLM
from src.scenlab.lm.tokenizer import SPECIAL_TOKENS, Tokenizer
from src.utils.files import atomic_write_text

logger = logging.getLogger(__name__)

PROMPT_OPEN = "[INST]"
PROMPT_CLOSE = "[/INST]"
MAX_REWRITES = 4

RELATIONS: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "birthplace": (
        (
            "where was {s} born ?",
            "in which city was {s} born ?",
            "what city is the birthplace of {s} ?",
            "{s} was born in which city ?",
            "name the city where {s} was born ?",
        ),
        ("lisbon", "oslo", "cairo", "lima", "dublin", "vienna", "madrid", "tokyo", "nairobi", "quito", "prague", "havana"),
    ),
    "profession": (
        (
            "what is the job of {s} ?",
            "what does {s} do for a living ?",
            "which profession does {s} have ?",
            "{s} works as what ?",
            "what work does {s} do ?",
        ),
        ("baker", "pilot", "doctor", "farmer", "lawyer", "painter", "nurse", "sailor", "chemist", "tailor", "poet", "judge"),
    ),
    "language": (
        (
            "what language does {s} speak ?",
            "which language is spoken by {s} ?",
            "{s} speaks which language ?",
            "what is the native language of {s} ?",
            "in which language does {s} talk ?",
        ),
        ("french", "hindi", "swahili", "dutch", "greek", "korean", "polish", "turkish", "welsh", "basque", "czech", "finnish"),
    ),
    "instrument": (
        (
            "which instrument does {s} play ?",
            "what instrument is played by {s} ?",
            "{s} plays which instrument ?",
            "what does {s} play in the band ?",
            "name the instrument of {s} ?",
        ),
        ("piano", "violin", "drums", "flute", "cello", "guitar", "harp", "trumpet", "oboe", "banjo", "organ", "tuba"),
    ),
    "sport": (
        (
            "which sport does {s} play ?",
            "what sport is {s} known for ?",
            "{s} competes in which sport ?",
            "what game does {s} play ?",
            "name the sport of {s} ?",
        ),
        ("tennis", "rugby", "golf", "hockey", "cricket", "chess", "boxing", "rowing", "fencing", "archery", "judo", "skiing"),
    ),
    "pet": (
        (
            "what pet does {s} own ?",
            "which animal does {s} keep ?",
            "{s} owns which pet ?",
            "what animal lives with {s} ?",
            "name the pet of {s} ?",
        ),
        ("cat", "dog", "parrot", "rabbit", "turtle", "goat", "hamster", "pony", "lizard", "ferret", "goose", "snake"),
    ),
}

PASSAGE_PROMPT = "this is a passage about {s} ."
PASSAGE_TEXT = "{s} was born in {city} and worked as a {job} ."
UNRELATED_PROMPTS = ("tell me about the {topic} .", "tell me more about the {topic} .")
UNRELATED_TEXT = "the {topic} is {first} and {second} today ."
TOPICS = ("weather", "river", "garden", "market", "forest", "harbor", "mountain", "library", "kitchen", "village")
ADJECTIVES = ("quiet", "busy", "green", "cold", "bright", "calm", "old", "wide", "warm", "dark")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

PASSAGE_KINDS = ("accurate", "edited", "unrelated")


@dataclass(frozen=True)
class DatasetConfig:

    """
    Sizes and seed of the synthetic dataset.

    :param n_edits: facts relabeled counterfactually for editing.
    :param n_loc: facts the base model answers correctly, kept as locality queries.
    :param n_passages: passages per passage set.
    :param max_vocab: largest vocabulary the generated corpus may need.
    """

    seed: int = 7
    n_facts: int = 250
    n_rewrites: int = 3
    n_edits: int = 50
    n_loc: int = 200
    n_passages: int = 20
    max_vocab: int = 512

    def validate(self) -> "DatasetConfig":
        """Check sizes."""
        if self.n_facts < 10:
            raise DatasetError(f"n_facts must be >= 10, got {self.n_facts}")
        if not 3 <= self.n_rewrites <= MAX_REWRITES:
            raise DatasetError(f"n_rewrites must lie in [3, {MAX_REWRITES}], got {self.n_rewrites}")
        if self.n_edits < 0 or self.n_loc < 0 or self.n_passages < 0:
            raise DatasetError("n_edits, n_loc and n_passages must be >= 0")
        return self


def wrap_prompt(question: str) -> str:
    """Chat-style prompt whose last token is always the closing marker."""
    return f"{PROMPT_OPEN} {question} {PROMPT_CLOSE}"


@dataclass(frozen=True)
class Fact:

    """A subject-relation-object triple with its prompts and a counterfactual object."""

    id: str
    subject: str
    relation: str
    prompt: str
    answer: str
    rewrites: Tuple[str, ...]
    counterfactual: str

    def sample(self) -> EditSample:
        """The fact with its true answer."""
        return EditSample(id=self.id, prompt=self.prompt, target=self.answer, rewrites=self.rewrites)

    def counterfactual_sample(self) -> EditSample:
        """The fact relabeled with its counterfactual object."""
        return EditSample(id=self.id, prompt=self.prompt, target=self.counterfactual, rewrites=self.rewrites)


@dataclass(frozen=True)
class Passage:

    """
    A prompt and continuation of one passage set.

    :param text: the continuation the base model is trained on.
    :param corrected: the continuation editing installs; equals ``text`` outside the edited set.
    """

    id: str
    kind: str
    prompt: str
    text: str
    corrected: str

    def sample(self) -> EditSample:
        """The passage as a sequence-style edit towards ``corrected``."""
        return EditSample(id=self.id, prompt=self.prompt, target=self.corrected)


@dataclass
class FactDataset:

    """Generated facts and passages."""

    facts: List[Fact]
    passages: List[Passage] = field(default_factory=list)

    def passages_of(self, kind: str) -> List[Passage]:
        """Passages of one set."""
        if kind not in PASSAGE_KINDS:
            raise ValueError(f"unknown passage set {kind!r}")
        return [p for p in self.passages if p.kind == kind]

    def training_pairs(self) -> List[Tuple[str, str]]:
        """What the base model memorizes: every fact prompt and rewrite, and every passage as written."""
        pairs = []
        for fact in self.facts:
            pairs.append((fact.prompt, fact.answer))
            pairs.extend((rewrite, fact.answer) for rewrite in fact.rewrites)
        pairs.extend((p.prompt, p.text) for p in self.passages)
        return pairs

    def texts(self) -> Iterable[str]:
        """Every text of the dataset, counterfactuals and corrections included."""
        for fact in self.facts:
            yield from (fact.prompt, fact.answer, fact.counterfactual, *fact.rewrites)
        for p in self.passages:
            yield from (p.prompt, p.text, p.corrected)

    def tokenizer(self) -> Tokenizer:
        """Closed vocabulary covering :meth:`texts`."""
        return Tokenizer.from_texts(self.texts())

    def max_length(self) -> int:
        """Longest ``[BOS] prompt answer [EOS]`` sequence, in tokens."""
        lengths = [len(f.prompt.split()) + 3 for f in self.facts] + [len(r.split()) + 3 for f in self.facts for r in f.rewrites]
        lengths += [len(p.prompt.split()) + max(len(p.text.split()), len(p.corrected.split())) + 2 for p in self.passages]
        return max(lengths)


def _syllable_words(rng: np.random.Generator, count: int, taken: set) -> List[str]:
    words: List[str] = []
    while len(words) < count:
        parts = rng.integers(0, [len(_CONSONANTS), len(_VOWELS), len(_CONSONANTS), len(_VOWELS)])
        word = _CONSONANTS[parts[0]] + _VOWELS[parts[1]] + _CONSONANTS[parts[2]] + _VOWELS[parts[3]]
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def _template_words() -> set:
    words = set(SPECIAL_TOKENS) | {PROMPT_OPEN, PROMPT_CLOSE}
    for templates, objects in RELATIONS.values():
        for template in templates:
            words.update(template.split())
        words.update(objects)
    for text in (PASSAGE_PROMPT, PASSAGE_TEXT, *UNRELATED_PROMPTS, UNRELATED_TEXT):
        words.update(text.split())
    return words | set(TOPICS) | set(ADJECTIVES)


def gen_synthetic_facts(seed: int, n_facts: int, n_rewrites: int = 3, n_passages: int = 0, max_vocab: int = 512) -> FactDataset:
    """
    Generate a deterministic dataset.

    Every fact has its own one-word made-up subject, so no two prompts share a
    subject token. The canonical question is the relation's first template and the
    rewrites are the next ``n_rewrites``. Every fact also gets a counterfactual
    object from the same relation.

    :param seed: Philox seed; equal seeds give equal datasets.
    :param n_facts: number of facts, at least 10.
    :param n_rewrites: paraphrases per fact, at least 3.
    :param n_passages: passages per passage set.
    :param max_vocab: vocabulary limit, special tokens included.
    :raises DatasetError: sizes out of range or the vocabulary exceeds ``max_vocab``.
    """
    DatasetConfig(seed=seed, n_facts=n_facts, n_rewrites=n_rewrites, n_edits=0, n_loc=0, n_passages=n_passages, max_vocab=max_vocab).validate()
    rng = np.random.Generator(np.random.Philox(seed))
    names = _syllable_words(rng, n_facts + 2 * n_passages, _template_words())

    relation_names = list(RELATIONS)
    facts: List[Fact] = []
    for subject in names[:n_facts]:
        relation = relation_names[int(rng.integers(len(relation_names)))]
        templates, objects = RELATIONS[relation]
        picks = rng.choice(len(objects), size=2, replace=False)
        facts.append(
            Fact(
                id=f"f{len(facts):04d}",
                subject=subject,
                relation=relation,
                prompt=wrap_prompt(templates[0].format(s=subject)),
                answer=objects[int(picks[0])],
                rewrites=tuple(wrap_prompt(t.format(s=subject)) for t in templates[1 : 1 + n_rewrites]),
                counterfactual=objects[int(picks[1])],
            )
        )

    cities, jobs = RELATIONS["birthplace"][1], RELATIONS["profession"][1]
    passages: List[Passage] = []
    for kind, subjects in (("accurate", names[n_facts : n_facts + n_passages]), ("edited", names[n_facts + n_passages :])):
        for number, subject in enumerate(subjects):
            city = rng.choice(len(cities), size=2, replace=False)
            job = rng.choice(len(jobs), size=2, replace=False)
            true_text = PASSAGE_TEXT.format(s=subject, city=cities[int(city[0])], job=jobs[int(job[0])])
            wrong_text = PASSAGE_TEXT.format(s=subject, city=cities[int(city[1])], job=jobs[int(job[1])])
            prompt = wrap_prompt(PASSAGE_PROMPT.format(s=subject))
            text = true_text if kind == "accurate" else wrong_text
            passages.append(Passage(id=f"p-{kind}-{number:03d}", kind=kind, prompt=prompt, text=text, corrected=true_text))
    for number in range(n_passages):
        topic = TOPICS[number % len(TOPICS)]
        first, second = rng.choice(len(ADJECTIVES), size=2, replace=False)
        text = UNRELATED_TEXT.format(topic=topic, first=ADJECTIVES[int(first)], second=ADJECTIVES[int(second)])
        prompt = wrap_prompt(UNRELATED_PROMPTS[(number // len(TOPICS)) % len(UNRELATED_PROMPTS)].format(topic=topic))
        passages.append(Passage(id=f"p-unrelated-{number:03d}", kind="unrelated", prompt=prompt, text=text, corrected=text))

    dataset = FactDataset(facts=facts, passages=passages)
    vocab_size = dataset.tokenizer().vocab_size
    if vocab_size > max_vocab:
        raise DatasetError(f"dataset needs {vocab_size} words, more than max_vocab={max_vocab}")
    logger.info("generated %d facts, %d passages, vocabulary of %d", len(facts), len(passages), vocab_size)
    return dataset


@dataclass
class EditSplits:

    """
    Edit and locality sets chosen against a base model.

    :param edit: counterfactually relabeled facts the base model answered correctly.
    :param loc: further correctly answered facts with their true labels.
    :param base_correct: how many facts the base model answered correctly.
    """

    edit: List[EditSample]
    loc: List[EditSample]
    base_correct: int


def build_edit_splits(model: TransformerLM, dataset: FactDataset, n_edits: int, n_loc: int) -> EditSplits:
    """
    Split facts by the base model's greedy answers.

    The first ``n_edits`` correctly answered facts are relabeled with their
    counterfactual object; the next ``n_loc`` form the locality set.

    :raises DatasetError: too few correctly answered facts, or words the model does not know.
    """
    tokenizer = model.tokenizer
    correct: List[Fact] = []
    for fact in dataset.facts:
        if tokenizer.encode(fact.prompt).has_unknown or tokenizer.encode(fact.counterfactual).has_unknown:
            raise DatasetError(f"fact {fact.id} uses words outside the checkpoint vocabulary")
        if decodes_to(model, fact.prompt, fact.answer):
            correct.append(fact)
        if len(correct) == n_edits + n_loc:
            break
    if len(correct) < n_edits + n_loc:
        raise DatasetError(f"base model answers {len(correct)} facts correctly, {n_edits + n_loc} needed")
    edit = [fact.counterfactual_sample() for fact in correct[:n_edits]]
    loc = [fact.sample() for fact in correct[n_edits:]]
    logger.info("edit split: %d edits, %d locality queries", len(edit), len(loc))
    return EditSplits(edit=edit, loc=loc, base_correct=len(correct))


def write_records(path: Union[str, Path], records: Iterable[dict]) -> Path:
    """Write dicts as JSON lines with sorted keys."""
    return atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_records(path: Union[str, Path]) -> List[dict]:
    """
    Read a JSON-lines file.

    :raises DatasetError: the file is missing or a line is not JSON.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file {path} does not exist")
    records = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{number}: {e}") from e
    return records


FACTS_FILE = "facts.jsonl"
PASSAGES_FILE = "passages.jsonl"


def write_dataset(directory: Union[str, Path], dataset: FactDataset) -> Path:
    """Write facts and passages as two JSON-lines files."""
    directory = Path(directory)
    write_records(directory / FACTS_FILE, (vars(f) | {"rewrites": list(f.rewrites)} for f in dataset.facts))
    write_records(directory / PASSAGES_FILE, (vars(p) for p in dataset.passages))
    return directory


def read_dataset(directory: Union[str, Path]) -> FactDataset:
    """Inverse of :func:`write_dataset`."""
    directory = Path(directory)
    try:
        facts = [Fact(**(r | {"rewrites": tuple(r["rewrites"])})) for r in read_records(directory / FACTS_FILE)]
        passages = [Passage(**r) for r in read_records(directory / PASSAGES_FILE)]
    except (TypeError, KeyError) as e:
        raise DatasetError(f"malformed dataset in {directory}: {e}") from e
    return FactDataset(facts=facts, passages=passages)


def samples_from_records(records: Sequence[dict]) -> List[EditSample]:
    """Edit samples from dataset-file records."""
    return [EditSample.from_record(r) for r in records]
