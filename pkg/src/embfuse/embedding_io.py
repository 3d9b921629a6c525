"""Parsers and writers for pretrained word-embedding files.

Three on-disk formats are supported and normalized into one in-memory
:class:`EmbeddingTable`:

* ``glove``    - plain text, one ``token c1 ... cd`` line per word, no header.
* ``fasttext`` - like ``glove`` but with a ``vocab_size dim`` header line.
* ``w2v-bin``  - ASCII ``vocab_size dim\\n`` header, then per record the
  token bytes, one space, and ``dim`` little-endian float32 values; a single
  newline may follow each record's floats and is consumed if present.

Values are widened to float64 internally regardless of the storage width.
Parsing is streaming: sources may be binary file objects or iterables of
bytes chunks, and nothing beyond the output table plus O(dim) is buffered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from .errors import (
    BadHeaderError,
    DimMismatchError,
    EmptyInputError,
    EmptyTableError,
    ParseFloatError,
    TruncatedRecordError,
    ValidationError,
)

FORMATS = ("glove", "w2v-bin", "fasttext")

_CHUNK = 1 << 16


class _ByteStream:
    """Buffered byte reader over a file-like object or an iterable of bytes."""

    def __init__(self, source):
        if hasattr(source, "read"):
            self._chunks = iter(lambda: source.read(_CHUNK), b"")
        elif isinstance(source, (bytes, bytearray)):
            self._chunks = iter((bytes(source),))
        else:
            self._chunks = iter(source)
        self._buf = bytearray()
        self._eof = False

    def _fill(self) -> bool:
        if self._eof:
            return False
        try:
            chunk = next(self._chunks)
        except StopIteration:
            self._eof = True
            return False
        self._buf += chunk
        return True

    def read(self, n: int) -> bytes:
        while len(self._buf) < n and self._fill():
            pass
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def read_until(self, delim: bytes) -> bytes:
        """Read up to and including ``delim``; at EOF returns the remainder."""
        start = 0
        while True:
            i = self._buf.find(delim, start)
            if i >= 0:
                out = bytes(self._buf[: i + 1])
                del self._buf[: i + 1]
                return out
            start = max(0, len(self._buf) - len(delim) + 1)
            if not self._fill():
                out = bytes(self._buf)
                self._buf.clear()
                return out

    def peek(self, n: int) -> bytes:
        while len(self._buf) < n and self._fill():
            pass
        return bytes(self._buf[:n])

    def lines(self):
        """Yield lines including their trailing newline where present."""
        while True:
            line = self.read_until(b"\n")
            if not line:
                return
            yield line


@dataclass
class EmbeddingTable:
    """A parsed embedding: vocabulary, dense matrix, and cached column mean.

    ``vocab`` maps each token to its row index in ``matrix``; ``mean`` is the
    arithmetic mean over all rows (zeros for an empty table). ``warnings``
    collects non-fatal parse diagnostics such as duplicate tokens.
    """

    name: str
    dim: int
    vocab: Dict[str, int]
    matrix: np.ndarray
    mean: np.ndarray
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(len(self.vocab), self.dim)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(self.dim)

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, token: str) -> bool:
        return token in self.vocab

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self.vocab[token]]

    def validate(self) -> None:
        """Check the structural invariants, raising on violation."""
        n = len(self.vocab)
        if self.matrix.shape != (n, self.dim):
            raise DimMismatchError(
                f"matrix shape {self.matrix.shape} != ({n}, {self.dim})"
            )
        if sorted(self.vocab.values()) != list(range(n)):
            raise DimMismatchError("vocab indices are not a permutation of 0..n-1")
        if n and not np.isfinite(self.matrix).all():
            raise ParseFloatError("matrix contains non-finite entries")


def _finish_table(name: str, dim: int, tokens: List[str], rows: List[np.ndarray],
                  warnings: List[str]) -> EmbeddingTable:
    if rows:
        matrix = np.vstack(rows)
        mean = matrix.mean(axis=0)
    else:
        matrix = np.zeros((0, dim))
        mean = np.zeros(dim)
    vocab = {tok: i for i, tok in enumerate(tokens)}
    return EmbeddingTable(name=name, dim=dim, vocab=vocab, matrix=matrix,
                          mean=mean, warnings=warnings)


def _parse_component(text: str, line_no: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseFloatError(
            f"line {line_no}: cannot parse {text!r} as a float", line_no
        ) from None
    if not math.isfinite(value):
        raise ParseFloatError(
            f"line {line_no}: non-finite component {text!r}", line_no
        )
    return value


def _parse_text_lines(lines: Iterable[bytes], name: str, dim: int | None,
                      first_line_no: int, warnings: List[str]):
    """Shared line loop for the glove and fasttext text formats."""
    tokens: List[str] = []
    rows: List[np.ndarray] = []
    seen: Dict[str, int] = {}
    line_no = first_line_no - 1
    n_data = 0
    for raw in lines:
        line_no += 1
        parts = raw.decode("utf-8").split()
        if not parts:
            continue
        n_data += 1
        if dim is None:
            dim = len(parts) - 1
            if dim < 1:
                raise DimMismatchError(
                    f"line {line_no}: expected a token and at least one component",
                    line_no,
                )
        if len(parts) - 1 != dim:
            raise DimMismatchError(
                f"line {line_no}: {len(parts) - 1} components, expected {dim}",
                line_no,
            )
        token = parts[0]
        if token in seen:
            warnings.append(f"duplicate token {token!r} at line {line_no}, kept first")
            continue
        row = np.array([_parse_component(p, line_no) for p in parts[1:]])
        seen[token] = len(tokens)
        tokens.append(token)
        rows.append(row)
    return dim, tokens, rows, n_data


def parse_glove_text(stream, name: str = "glove") -> EmbeddingTable:
    """Parse headerless ``token c1 ... cd`` text (the GloVe distribution layout).

    The vector length is fixed by the first line; duplicate tokens keep their
    first occurrence. Raises EmptyInputError on a zero-line stream,
    DimMismatchError when a line's component count differs from the first
    line's, and ParseFloatError on unparseable or non-finite components.
    """
    warnings: List[str] = []
    dim, tokens, rows, n_lines = _parse_text_lines(
        _ByteStream(stream).lines(), name, None, 1, warnings
    )
    if n_lines == 0:
        raise EmptyInputError("no lines in input")
    return _finish_table(name, dim, tokens, rows, warnings)


def parse_fasttext_text(stream, name: str = "fasttext") -> EmbeddingTable:
    """Parse text with a leading ``vocab_size dim`` header (fastText .vec layout).

    The declared vocab_size is cross-checked against the actual data line
    count; a mismatch is recorded as a warning, not an error, since published
    files are sometimes trimmed.
    """
    bs = _ByteStream(stream)
    header = bs.read_until(b"\n")
    if not header:
        raise EmptyInputError("no lines in input")
    parts = header.split()
    if len(parts) != 2:
        raise BadHeaderError(f"expected 'vocab_size dim' header, got {header!r}")
    try:
        declared, dim = int(parts[0]), int(parts[1])
    except ValueError:
        raise BadHeaderError(f"non-integer header fields in {header!r}") from None
    if declared < 0 or dim < 1:
        raise BadHeaderError(f"invalid header values {declared} {dim}")
    warnings: List[str] = []
    dim, tokens, rows, n_lines = _parse_text_lines(bs.lines(), name, dim, 2, warnings)
    if n_lines == 0:
        raise EmptyInputError("header but no vector lines")
    if n_lines != declared:
        warnings.append(f"count mismatch: header declares {declared}, found {n_lines} lines")
    return _finish_table(name, dim, tokens, rows, warnings)


def parse_word2vec_binary(stream, name: str = "w2v") -> EmbeddingTable:
    """Parse the word2vec binary layout (the GoogleNews distribution format).

    Header is ASCII ``vocab_size dim\\n``; each record is the token bytes, a
    single space, then dim little-endian float32 values, optionally followed
    by one newline. Floats are widened to float64. Duplicate tokens keep the
    first occurrence and record a warning.
    """
    bs = _ByteStream(stream)
    header = bs.read_until(b"\n")
    if not header.endswith(b"\n"):
        raise BadHeaderError("missing header line")
    parts = header.split()
    if len(parts) != 2:
        raise BadHeaderError(f"expected 'vocab_size dim' header, got {header!r}")
    try:
        count, dim = int(parts[0]), int(parts[1])
    except ValueError:
        raise BadHeaderError(f"non-integer header fields in {header!r}") from None
    if count < 0 or dim < 1:
        raise BadHeaderError(f"invalid header values {count} {dim}")

    tokens: List[str] = []
    rows: List[np.ndarray] = []
    seen: Dict[str, int] = {}
    warnings: List[str] = []
    for rec in range(1, count + 1):
        tok_bytes = bs.read_until(b" ")
        if not tok_bytes.endswith(b" ") or len(tok_bytes) < 2:
            raise TruncatedRecordError(f"record {rec}: stream ended in token", rec)
        try:
            token = tok_bytes[:-1].decode("utf-8")
        except UnicodeDecodeError:
            token = tok_bytes[:-1].decode("utf-8", errors="replace")
            warnings.append(f"record {rec}: token is not valid UTF-8, replaced")
        raw = bs.read(4 * dim)
        if len(raw) < 4 * dim:
            raise TruncatedRecordError(f"record {rec}: stream ended in floats", rec)
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.isfinite(vec).all():
            raise ParseFloatError(f"record {rec}: non-finite component")
        if bs.peek(1) == b"\n":
            bs.read(1)
        if token in seen:
            warnings.append(f"duplicate token {token!r} at record {rec}, kept first")
            continue
        seen[token] = len(tokens)
        tokens.append(token)
        rows.append(vec)
    return _finish_table(name, dim, tokens, rows, warnings)


def write_word2vec_binary(table: EmbeddingTable) -> bytes:
    """Serialize a table to the word2vec binary layout accepted above.

    Floats are narrowed to little-endian float32. Tokens must not contain
    whitespace bytes, which would corrupt the record framing.
    """
    table.validate()
    out = bytearray()
    out += f"{len(table.vocab)} {table.dim}\n".encode("ascii")
    by_row = sorted(table.vocab.items(), key=lambda kv: kv[1])
    for token, row in by_row:
        data = token.encode("utf-8")
        if b" " in data or b"\n" in data:
            raise ValidationError(f"token {token!r} contains whitespace, not writable")
        out += data
        out += b" "
        out += table.matrix[row].astype("<f4").tobytes()
    return bytes(out)


def mean_vector(table: EmbeddingTable) -> np.ndarray:
    """Component-wise arithmetic mean over all rows of the table."""
    if len(table.vocab) == 0:
        raise EmptyTableError("cannot take the mean of an empty table")
    return table.matrix.mean(axis=0)


def parse_embedding(stream, fmt: str, name: str = "") -> EmbeddingTable:
    """Dispatch to the parser for ``fmt`` (one of FORMATS)."""
    if fmt == "glove":
        return parse_glove_text(stream, name or fmt)
    if fmt == "w2v-bin":
        return parse_word2vec_binary(stream, name or fmt)
    if fmt == "fasttext":
        return parse_fasttext_text(stream, name or fmt)
    raise ValidationError(f"unknown embedding format {fmt!r}; expected one of {', '.join(FORMATS)}")
