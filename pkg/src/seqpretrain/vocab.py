"""Output-unit vocabulary.

Ids 0-3 are reserved for ``<PAD> <UNK> <S> </S>``. Vocab files hold one
token per line; an optional first line ``#unit <char|word>`` records how
transcripts are split.
"""

from pathlib import Path
from typing import Iterable, List, Sequence

from .nnet.model import EOS, PAD, SOS, UNK

SPECIALS = ("<PAD>", "<UNK>", "<S>", "</S>")


class Vocab:
    def __init__(self, tokens: Sequence[str], unit: str = "word"):
        if unit not in ("char", "word"):
            raise ValueError(f"unit must be 'char' or 'word', got {unit!r}")
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.unit = unit
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.unit == other.unit

    @classmethod
    def build(cls, transcripts: Iterable[str], unit: str = "word") -> "Vocab":
        seen = {}
        for text in transcripts:
            for sym in split_units(text, unit):
                seen.setdefault(sym, None)
        return cls(sorted(seen), unit)

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        unit = "word"
        if lines and lines[0].startswith("#unit"):
            unit = lines[0].split()[1]
            lines = lines[1:]
        return cls([ln for ln in lines if ln], unit)

    def save(self, path) -> None:
        Path(path).write_text(f"#unit {self.unit}\n" + "\n".join(self.tokens) + "\n", encoding="utf-8")

    def encode(self, text: str) -> List[int]:
        return [self.index.get(s, UNK) for s in split_units(text, self.unit)]

    def decode(self, ids: Iterable[int]) -> str:
        syms = [self.tokens[i] for i in ids if i not in (PAD, SOS, EOS)]
        return ("" if self.unit == "char" else " ").join(syms)


def split_units(text: str, unit: str) -> List[str]:
    if unit == "char":
        return [c for c in text if not c.isspace()]
    return text.split()
