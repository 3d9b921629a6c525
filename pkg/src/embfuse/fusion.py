"""Mean-shift fusion of two pretrained embedding tables over a corpus vocabulary.

For every dictionary word one of four branches applies, chosen by where the
resolved key is found:

* both tables:   (v1 + (v2 + mean1 - mean2)) / 2
* first only:    v1 copied verbatim
* second only:   v2 + mean1 - mean2
* neither:       a constant fill row (zeros by default)

The shift ``mean1 - mean2`` recentres the second table onto the first so the
two vector spaces can be averaged coordinate-wise. Key resolution walks a
fallback chain (exact, lowercase, capitalized, lemma) and the first candidate
present in either table wins.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import CorpusDictionaries, PAD_INDEX, UNK_INDEX
from .embedding_io import EmbeddingTable
from .errors import (
    DimMismatchError,
    EmptyDictionariesError,
    ValidationError,
)

FALLBACK_STAGES = ("exact", "lower", "capital", "lemma")


def fuse_both(v1: np.ndarray, v2: np.ndarray, mean1: np.ndarray, mean2: np.ndarray) -> np.ndarray:
    """Average the first vector with the mean-shifted second vector."""
    v1, v2, mean1, mean2 = (np.asarray(a, dtype=np.float64) for a in (v1, v2, mean1, mean2))
    if not (v1.shape == v2.shape == mean1.shape == mean2.shape):
        raise DimMismatchError(
            f"vector dims differ: {v1.shape} {v2.shape} {mean1.shape} {mean2.shape}"
        )
    return (v1 + (v2 + (mean1 - mean2))) / 2.0


def fuse_second_only(v2: np.ndarray, mean1: np.ndarray, mean2: np.ndarray) -> np.ndarray:
    """Shift a second-table vector into the first table's coordinate frame."""
    v2, mean1, mean2 = (np.asarray(a, dtype=np.float64) for a in (v2, mean1, mean2))
    if not (v2.shape == mean1.shape == mean2.shape):
        raise DimMismatchError(f"vector dims differ: {v2.shape} {mean1.shape} {mean2.shape}")
    return v2 + (mean1 - mean2)


def candidate_keys(
    token: str,
    lemma: Optional[str],
    order: Sequence[str] = FALLBACK_STAGES,
) -> List[Tuple[str, str]]:
    """Ordered, de-duplicated (stage, key) lookup candidates for a token."""
    seen = set()
    out: List[Tuple[str, str]] = []
    for stage in order:
        if stage == "exact":
            key = token
        elif stage == "lower":
            key = token.lower()
        elif stage == "capital":
            key = token[:1].upper() + token[1:]
        elif stage == "lemma":
            if lemma is None:
                continue
            key = lemma
        else:
            raise ValidationError(f"unknown fallback stage {stage!r}")
        if key not in seen:
            seen.add(key)
            out.append((stage, key))
    return out


@dataclass
class BranchCounts:
    both: int = 0
    first_only: int = 0
    second_only: int = 0
    unknown: int = 0
    # how often a fallback stage (rather than the exact token) resolved the key
    case_hits: int = 0
    lemma_hits: int = 0

    def total(self) -> int:
        return self.both + self.first_only + self.second_only + self.unknown

    def as_dict(self) -> Dict[str, int]:
        return {
            "both": self.both,
            "first_only": self.first_only,
            "second_only": self.second_only,
            "unknown": self.unknown,
            "case_hits": self.case_hits,
            "lemma_hits": self.lemma_hits,
        }


@dataclass
class FusedMatrix:
    """Dense fused embedding, row w for dictionary index w.

    Row 0 (padding) is all zeros; row 1 (unknown) is the fill row.
    """

    matrix: np.ndarray
    dim: int
    branch_counts: BranchCounts
    unknown_row: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.unknown_row = np.asarray(self.unknown_row, dtype=np.float64)


def build_fused_matrix(
    dicts: CorpusDictionaries,
    emb1: EmbeddingTable,
    emb2: EmbeddingTable,
    unknown_fill: float = 0.0,
    fallback_order: Sequence[str] = FALLBACK_STAGES,
) -> FusedMatrix:
    """Fuse two embedding tables into one matrix over the corpus dictionary.

    Every dictionary word is resolved through the fallback chain against the
    union of both vocabularies; the first candidate found in either table
    decides the branch. Branch counts over dictionary words sum to
    vocab_size - 2 (padding and unknown rows are synthetic).
    """
    if not dicts.dict_words:
        raise EmptyDictionariesError("corpus dictionary has no words")
    if emb1.dim != emb2.dim:
        raise DimMismatchError(f"table dims differ: {emb1.dim} vs {emb2.dim}")
    dim = emb1.dim
    mean1 = emb1.mean
    mean2 = emb2.mean
    shift = mean1 - mean2

    matrix = np.zeros((dicts.vocab_size, dim), dtype=np.float64)
    unknown_row = np.full(dim, float(unknown_fill), dtype=np.float64)
    matrix[UNK_INDEX] = unknown_row
    counts = BranchCounts()

    for token, w in dicts.dict_words.items():
        resolved = None
        for stage, key in candidate_keys(token, dicts.lemma_dict.get(token), fallback_order):
            if key in emb1 or key in emb2:
                resolved = (stage, key)
                break
        if resolved is None:
            matrix[w] = unknown_row
            counts.unknown += 1
            continue
        stage, key = resolved
        if stage in ("lower", "capital"):
            counts.case_hits += 1
        elif stage == "lemma":
            counts.lemma_hits += 1
        in1 = key in emb1
        in2 = key in emb2
        if in1 and in2:
            matrix[w] = (emb1.vector(key) + (emb2.vector(key) + shift)) / 2.0
            counts.both += 1
        elif in1:
            matrix[w] = emb1.vector(key)
            counts.first_only += 1
        else:
            matrix[w] = emb2.vector(key) + shift
            counts.second_only += 1

    return FusedMatrix(matrix=matrix, dim=dim, branch_counts=counts, unknown_row=unknown_row)


@dataclass
class FusionReport:
    dim: int
    vocab_size: int
    counts: BranchCounts

    @property
    def unknown_rate(self) -> float:
        total = self.counts.total()
        return self.counts.unknown / total if total else 0.0

    def rows(self) -> List[Tuple[str, str]]:
        total = self.counts.total()
        out = [("dim", str(self.dim)), ("words", str(total))]
        for branch in ("both", "first_only", "second_only", "unknown"):
            n = getattr(self.counts, branch)
            share = n / total if total else 0.0
            out.append((branch, f"{n}"))
            out.append((branch + "_share", f"{share:.6f}"))
        out.append(("case_hits", str(self.counts.case_hits)))
        out.append(("lemma_hits", str(self.counts.lemma_hits)))
        return out

    def lines(self) -> List[str]:
        return [f"{key}: {value}" for key, value in self.rows()]


def fusion_report(fused: FusedMatrix, dicts: CorpusDictionaries) -> FusionReport:
    return FusionReport(dim=fused.dim, vocab_size=dicts.vocab_size, counts=fused.branch_counts)


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


def fused_to_table(fused: FusedMatrix, dicts: CorpusDictionaries, name: str = "fused") -> EmbeddingTable:
    """View the fused matrix as an embedding table for binary serialization.

    The padding and unknown rows are stored under the reserved keys
    ``<pad>`` and ``<unk>``.
    """
    vocab: Dict[str, int] = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
    for token, w in dicts.dict_words.items():
        vocab[token] = w
    return EmbeddingTable(
        name=name,
        dim=fused.dim,
        vocab=vocab,
        matrix=fused.matrix.copy(),
        mean=fused.matrix.mean(axis=0) if len(fused.matrix) else np.zeros(fused.dim),
    )


def matrix_from_table(table: EmbeddingTable, dicts: CorpusDictionaries) -> np.ndarray:
    """Rebuild the (vocab_size, dim) matrix from a serialized fused table."""
    matrix = np.zeros((dicts.vocab_size, table.dim), dtype=np.float64)
    for token, w in ((PAD_TOKEN, PAD_INDEX), (UNK_TOKEN, UNK_INDEX)):
        if token in table:
            matrix[w] = table.vector(token)
    for token, w in dicts.dict_words.items():
        if token not in table:
            raise ValidationError(
                f"fused table is missing dictionary word {token!r}; "
                "was it built from a different dataset?"
            )
        matrix[w] = table.vector(token)
    return matrix
