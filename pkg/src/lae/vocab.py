from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

SPECIAL, LANG_A, LANG_B = "special", "A", "B"
BLANK_ID, MASK_A_ID, MASK_B_ID = 0, 1, 2


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Dense token inventory: blank, mask_A, mask_B, then language-A and language-B tokens.

    ``mask_A`` stands in for a language-A token inside B-side targets and
    ``mask_B`` for a language-B token inside A-side targets.
    """

    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise VocabError("token and tag lists differ in length")
        if self.tags[:3] != (SPECIAL,) * 3:
            raise VocabError("ids 0..2 must be the blank and two mask specials")
        if any(t not in (LANG_A, LANG_B) for t in self.tags[3:]):
            raise VocabError("non-special ids must be tagged A or B")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate token surfaces")

    blank = BLANK_ID
    mask_a = MASK_A_ID
    mask_b = MASK_B_ID

    @classmethod
    def build(cls, n_a: int, n_b: int) -> "Vocabulary":
        toks = ["<blank>", "<mask_A>", "<mask_B>"]
        toks += [f"a{i:02d}" for i in range(n_a)] + [f"b{i:02d}" for i in range(n_b)]
        tags = [SPECIAL] * 3 + [LANG_A] * n_a + [LANG_B] * n_b
        return cls(tuple(toks), tuple(tags))

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def tag(self, idx: int) -> str:
        return self.tags[idx]

    def ids(self, tag: str) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == tag and i > 2]

    @property
    def a_ids(self) -> list[int]:
        return self.ids(LANG_A)

    @property
    def b_ids(self) -> list[int]:
        return self.ids(LANG_B)

    def id_of(self, surface: str) -> int:
        try:
            return self.tokens.index(surface)
        except ValueError:
            raise VocabError(f"unknown token {surface!r}") from None

    def to_text(self) -> str:
        return "".join(f"{i}\t{tok}\t{tag}\n" for i, (tok, tag) in enumerate(zip(self.tokens, self.tags)))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        toks, tags = [], []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            parts = line.split("\t")
            if len(parts) != 3:
                raise VocabError(f"{path}:{n + 1}: expected id, surface, tag")
            if int(parts[0]) != n:
                raise VocabError(f"{path}:{n + 1}: ids must be dense and ordered")
            toks.append(parts[1])
            tags.append(parts[2])
        return cls(tuple(toks), tuple(tags))
