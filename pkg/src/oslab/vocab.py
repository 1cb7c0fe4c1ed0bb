from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Closed token inventory; indices 0-3 are pad, bos, eos, unk."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"reserved tokens must lead the vocabulary in order {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def synthetic(cls, size: int, prefix: str) -> "Vocabulary":
        """Reserved tokens plus ``size - 4`` surface forms ``{prefix}00``, ``{prefix}01``..."""
        if size < 5:
            raise ValueError("vocabulary needs at least one content token")
        width = max(2, len(str(size - 5)))
        return cls(list(RESERVED) + [f"{prefix}{i:0{width}d}" for i in range(size - 4)])

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, surface: str) -> int:
        return self.index.get(surface, UNK)

    def encode(self, surfaces: Iterable[str]) -> list[int]:
        return [self.lookup(s) for s in surfaces]

    def decode(self, ids: Iterable[int], strip_eos: bool = True) -> list[str]:
        out = [self.tokens[i] for i in ids]
        if strip_eos and out and out[-1] == RESERVED[EOS]:
            out.pop()
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])
