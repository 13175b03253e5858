"""Shared domain types: schemes, semantic IDs, catalogs, interaction data.

All types are plain immutable containers; anything heavier (quantizers,
checkpoints, graphs) lives in its own module and only references these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SidrecError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SidrecError):
    """A config value violates its contract (bad sizes, non-positive knobs)."""


class DataError(SidrecError):
    """Input data is malformed: wrong shapes, non-finite values, bad files."""


class ContractViolation(SidrecError):
    """A caller passed arguments outside an operation's precondition."""


class StalenessError(SidrecError):
    """An artifact references an upstream artifact with a different digest."""


@dataclass(frozen=True)
class SemanticScheme:
    """Global constants every pipeline component agrees on.

    m: number of digits (tokens) per semantic ID.
    M: codebook size per digit.
    d: embedding dimension of token/item/sequence representations.
    """

    m: int
    M: int
    d: int

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError(f"digit count m must be >= 1, got {self.m}")
        if self.M < 2:
            raise ConfigurationError(f"codebook size M must be >= 2, got {self.M}")
        if self.d < 1:
            raise ConfigurationError(f"embedding dim d must be >= 1, got {self.d}")
        if self.d % self.m != 0:
            raise ConfigurationError(
                f"embedding dim d={self.d} must be divisible by m={self.m} "
                "(equal-width subvector split)"
            )

    @property
    def sub_dim(self) -> int:
        """Width of each quantizer subspace."""
        return self.d // self.m

    @property
    def vocab_size(self) -> int:
        """Total token vocabulary size across all digit codebooks."""
        return self.m * self.M

    def to_dict(self) -> dict:
        return {"m": self.m, "M": self.M, "d": self.d}

    @classmethod
    def from_dict(cls, obj: dict) -> "SemanticScheme":
        return cls(m=int(obj["m"]), M=int(obj["M"]), d=int(obj["d"]))


@dataclass(frozen=True)
class SemanticID:
    """A tuple of m local code indices, digit j's code in [0, M).

    Codes are zero-based. The global token identity of digit j, code c is
    j*M + c, so the m codebooks occupy disjoint blocks of the vocabulary.
    """

    codes: tuple[int, ...]

    def __init__(self, codes):
        object.__setattr__(self, "codes", tuple(int(c) for c in codes))

    def __len__(self) -> int:
        return len(self.codes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.codes, dtype=np.uint32)


def validate_semantic_id(sid: SemanticID, scheme: SemanticScheme) -> str | None:
    """Return None if valid, else a human-readable violation description."""
    if len(sid.codes) != scheme.m:
        return f"length {len(sid.codes)} != m={scheme.m}"
    for j, c in enumerate(sid.codes):
        if c < 0 or c >= scheme.M:
            return f"digit {j}: code {c} out of range [0, {scheme.M})"
    return None


def token_global_index(digit: int, code: int, scheme: SemanticScheme) -> int:
    """Map (digit, local code) to its global token id j*M + c."""
    if not 0 <= digit < scheme.m:
        raise ContractViolation(f"digit {digit} out of range [0, {scheme.m})")
    if not 0 <= code < scheme.M:
        raise ContractViolation(f"code {code} out of range [0, {scheme.M})")
    return digit * scheme.M + code


@dataclass(frozen=True)
class ItemCatalog:
    """Dense item-id -> semantic-ID table.

    codes has shape (N, m), entries in [0, M). Distinct items may share a
    semantic ID; graph/decoder treat items (not unique IDs) as nodes.
    """

    scheme: SemanticScheme
    codes: np.ndarray = field(repr=False)

    def __post_init__(self):
        codes = np.ascontiguousarray(np.asarray(self.codes, dtype=np.uint32))
        object.__setattr__(self, "codes", codes)
        if codes.ndim != 2 or codes.shape[1] != self.scheme.m:
            raise DataError(
                f"catalog codes shape {codes.shape} incompatible with m={self.scheme.m}"
            )
        if codes.size and codes.max() >= self.scheme.M:
            raise DataError(
                f"catalog contains code {int(codes.max())} >= M={self.scheme.M}"
            )
        self.codes.setflags(write=False)

    @property
    def count(self) -> int:
        return self.codes.shape[0]

    def __len__(self) -> int:
        return self.codes.shape[0]

    def get(self, item: int) -> SemanticID:
        if not 0 <= item < self.count:
            raise ContractViolation(f"item id {item} out of range [0, {self.count})")
        return SemanticID(self.codes[item])


@dataclass(frozen=True)
class InteractionDataset:
    """Per-user ordered item-id lists over a catalog of num_items items.

    Sequences shorter than 3 cannot participate in leave-last-out
    evaluation; they are kept here and excluded (with a count) at split time.
    """

    num_items: int
    sequences: tuple[np.ndarray, ...] = field(repr=False)

    def __init__(self, num_items: int, sequences):
        seqs = []
        for i, s in enumerate(sequences):
            arr = np.ascontiguousarray(np.asarray(s, dtype=np.int64))
            if arr.ndim != 1 or arr.size < 1:
                raise DataError(f"sequence {i} must be a non-empty 1-D id list")
            if arr.min() < 0 or arr.max() >= num_items:
                raise DataError(
                    f"sequence {i} contains item id outside [0, {num_items})"
                )
            arr.setflags(write=False)
            seqs.append(arr)
        object.__setattr__(self, "num_items", int(num_items))
        object.__setattr__(self, "sequences", tuple(seqs))

    @property
    def num_users(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-major real matrix carrier with finiteness checks."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise DataError("embedding matrix contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """Raise DataError unless every entry of arr is finite."""
    arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        raise DataError(f"{what} contains non-finite values")
    return arr


def save_interactions(path, dataset: InteractionDataset) -> None:
    """Write one user per line, whitespace-separated ids, earliest first."""
    import os
    import tempfile

    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w") as f:
            for seq in dataset.sequences:
                f.write(" ".join(str(int(i)) for i in seq))
                f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_interactions(path, num_items: int) -> InteractionDataset:
    """Read the line-delimited interaction format written by save_interactions."""
    sequences = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                sequences.append([int(p) for p in parts])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: non-integer item id") from e
    return InteractionDataset(num_items=num_items, sequences=sequences)
