"""Token dictionary with reserved sentinel ids.

Ids are dense: 0 is padding, 1 starts a decode, 2 ends one, words follow.
The vocabulary hash is stored in checkpoints so a model can never be loaded
against a dictionary it was not trained on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

PAD, SOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<sos>", "<eos>")


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[:3]) != list(SPECIALS):
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        return cls(list(SPECIALS) + list(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def encode(self, words) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def hash_hex(self) -> str:
        h = hashlib.sha256()
        for tok in self.tokens:
            h.update(tok.encode())
            h.update(b"\x00")
        return h.hexdigest()
