"""Word-level tokenizer over a closed vocabulary."""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(len(SPECIAL_TOKENS))


@dataclass(frozen=True)
class Encoding:

    """Token ids of a text plus the positions that fell back to the unknown token."""

    ids: Tuple[int, ...]
    unknown: Tuple[int, ...] = ()

    @property
    def has_unknown(self) -> bool:
        """Whether any word was out of vocabulary."""
        return bool(self.unknown)


class Tokenizer:

    """
    Splits on whitespace and maps each word to an id.

    Ids ``0..3`` are reserved for padding, unknown, begin and end of sequence; corpus
    words follow in sorted order so the same corpus always yields the same ids.

    :param words: corpus words, without the special tokens.
    """

    def __init__(self, words: Sequence[str]):
        """Build the id tables."""
        self.vocab: List[str] = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.index: Dict[str, int] = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("vocabulary contains duplicate words")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        """Collect every whitespace-separated word in ``texts``."""
        words = set()
        for text in texts:
            words.update(text.split())
        return cls(sorted(words))

    @property
    def vocab_size(self) -> int:
        """Number of ids, special tokens included."""
        return len(self.vocab)

    def encode(self, text: str) -> Encoding:
        """Map words to ids; unknown words become the unknown id and are reported."""
        ids = []
        unknown = []
        for position, word in enumerate(text.split()):
            token = self.index.get(word)
            if token is None:
                unknown.append(position)
                token = UNK_ID
            ids.append(token)
        return Encoding(ids=tuple(ids), unknown=tuple(unknown))

    def decode(self, ids: Iterable[int]) -> str:
        """Join words with single spaces, dropping padding and sequence markers."""
        skip = (PAD_ID, BOS_ID, EOS_ID)
        return " ".join(self.vocab[i] for i in ids if i not in skip)

    tokenize = encode
    detokenize = decode

    def prompt_ids(self, prompt: str) -> List[int]:
        """Begin-of-sequence marker followed by the prompt ids."""
        return [BOS_ID, *self.encode(prompt).ids]

    def example_ids(self, prompt: str, answer: str) -> Tuple[List[int], int]:
        """
        Ids of a full training example and the length of its prompt part.

        :return: ``[BOS] prompt answer [EOS]`` and the number of ids before the answer.
        """
        head = self.prompt_ids(prompt)
        return head + list(self.encode(answer).ids) + [EOS_ID], len(head)
