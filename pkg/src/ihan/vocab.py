"""Per-type code vocabularies and the embedding lookup they index."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ihan.core import ops
from ihan.core.tensor import Tensor
from ihan.errors import DimensionError
from ihan.records import CodeType

logger = logging.getLogger(__name__)

UNK = "<UNK>"
DEFAULT_EMBEDDING_DIM = 128


@dataclass(frozen=True)
class Vocabulary:
    """Frozen code <-> index map; index ``unk_index`` (always last) absorbs unseen codes.

    ``code_type`` is None for the shared, namespaced vocabulary of data-level
    combination, whose entries look like ``"lab:2160-0_H"``.
    """

    code_type: CodeType | None
    codes: tuple[str, ...]
    min_count: int = 1
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {c: i for i, c in enumerate(self.codes)}
        if len(index) != len(self.codes):
            raise ValueError("vocabulary codes must be unique")
        object.__setattr__(self, "_index", index)

    @property
    def unk_index(self) -> int:
        return len(self.codes)

    @property
    def size(self) -> int:
        """V, including the UNK slot."""
        return len(self.codes) + 1

    def __len__(self) -> int:
        return self.size

    def lookup(self, code: str) -> int:
        return self._index.get(code, len(self.codes))

    def code_at(self, index: int) -> str:
        if index == self.unk_index:
            return UNK
        return self.codes[index]

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def to_dict(self) -> dict:
        return {
            "code_type": self.code_type.value if self.code_type else None,
            "codes": list(self.codes),
            "unk_index": self.unk_index,
            "min_count": self.min_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        vocab = cls(
            code_type=CodeType(d["code_type"]) if d.get("code_type") else None,
            codes=tuple(d["codes"]),
            min_count=int(d.get("min_count", 1)),
        )
        if "unk_index" in d and d["unk_index"] != vocab.unk_index:
            raise ValueError(f"vocabulary unk_index {d['unk_index']} disagrees with code list")
        return vocab


def build_vocabulary(
    corpus: Iterable[tuple[CodeType | None, str]], code_type: CodeType | None, min_count: int = 1
) -> Vocabulary:
    """Index codes of ``code_type`` seen at least ``min_count`` times, in first-appearance order."""
    counts: Counter[str] = Counter()
    order: list[str] = []
    for ctype, code in corpus:
        if ctype != code_type:
            continue
        if code not in counts:
            order.append(code)
        counts[code] += 1
    if not order:
        logger.warning("empty corpus for %s; vocabulary holds only UNK", code_type or "shared vocabulary")
    kept = tuple(c for c in order if counts[c] >= min_count)
    return Vocabulary(code_type=code_type, codes=kept, min_count=min_count)


def init_embedding(vocab: Vocabulary, dim: int, rng: np.random.Generator) -> Tensor:
    """d x V matrix, uniform in [-1/sqrt(d), 1/sqrt(d)]; column j embeds code index j."""
    bound = 1.0 / np.sqrt(dim)
    return Tensor._wrap(rng.uniform(-bound, bound, size=(dim, vocab.size)))


def embed(vocab: Vocabulary, emb: Tensor, code: str) -> Tensor:
    """Embedding column (d x 1) of ``code``; unseen codes get the UNK column."""
    if emb.cols != vocab.size:
        raise DimensionError(f"embedding has {emb.cols} columns, vocabulary size is {vocab.size}")
    return ops.take_columns(emb, [vocab.lookup(code)])
