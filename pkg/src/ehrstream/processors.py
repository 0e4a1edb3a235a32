"""Vocabulary fitting and deterministic encoding of features and labels.

Index assignment is lexicographic, never frequency-based: frequency ties
depend on how work was split across workers, and shard bytes must not.
Indices 0 and 1 are reserved for padding and unknown tokens.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from .errors import LabelError

PAD_INDEX = 0
UNK_INDEX = 1

PROCESSOR_KINDS = ("sequence", "nested_sequence", "multi_hot", "raw")
LABEL_KINDS = ("binary", "multiclass", "multilabel", "regression")


@dataclass(frozen=True)
class Vocabulary:
    """Dense token→index map; tokens occupy indices 2..size-1 in sorted order."""

    token_to_index: dict[str, int]
    size: int

    def index_of(self, token: str) -> int:
        return self.token_to_index.get(token, UNK_INDEX)

    @property
    def tokens(self) -> list[str]:
        """Tokens in index order (excludes the reserved entries)."""
        return sorted(self.token_to_index, key=self.token_to_index.__getitem__)


class VocabCounts(Counter):
    """Per-worker partial token counts; merged associatively by fit_vocab."""


def fit_vocab(
    partials: Iterable[Mapping[str, int]], min_count: int = 1
) -> Vocabulary:
    """Merge partial counts and assign indices by sorted token order.

    The result is invariant to how the token multiset was split into
    partials and to their order.
    """
    merged: Counter = Counter()
    for part in partials:
        merged.update(part)
    tokens = sorted(t for t, c in merged.items() if c >= min_count)
    mapping = {t: i + 2 for i, t in enumerate(tokens)}
    return Vocabulary(token_to_index=mapping, size=len(tokens) + 2)


def encode_sequence(tokens: Iterable[str], v: Vocabulary) -> list[int]:
    get = v.token_to_index.get
    return [get(t, UNK_INDEX) for t in tokens]


def encode_nested(visits: Iterable[Iterable[str]], v: Vocabulary) -> list[list[int]]:
    get = v.token_to_index.get
    return [[get(t, UNK_INDEX) for t in inner] for inner in visits]


def empty_bitset(size: int) -> bytearray:
    return bytearray((size + 7) // 8)


def set_bit(bits: bytearray, i: int):
    bits[i >> 3] |= 1 << (i & 7)


def bitset_indices(bits: bytes) -> list[int]:
    out = []
    for byte_idx, b in enumerate(bits):
        while b:
            low = b & -b
            out.append((byte_idx << 3) + low.bit_length() - 1)
            b ^= low
    return out


def popcount(bits: bytes) -> int:
    return sum(b.bit_count() for b in bits)


def encode_multihot(tokens: Iterable[str], v: Vocabulary) -> bytes:
    """Presence bitset over the vocabulary; unknown tokens share the unk bit."""
    bits = empty_bitset(v.size)
    get = v.token_to_index.get
    for t in tokens:
        set_bit(bits, get(t, UNK_INDEX))
    return bytes(bits)


@dataclass(frozen=True)
class LabelSpace:
    """Sorted label set for multiclass/multilabel outputs."""

    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {l: i for i, l in enumerate(self.labels)}
        )

    def index_of(self, label: str) -> Optional[int]:
        return self._index.get(label)

    @property
    def size(self) -> int:
        return len(self.labels)


def fit_label_space(partials: Iterable[Mapping[str, int]]) -> LabelSpace:
    merged: Counter = Counter()
    for part in partials:
        merged.update(part)
    return LabelSpace(labels=tuple(sorted(merged)))


_BINARY_TRUE = {1, "1", True}
_BINARY_FALSE = {0, "0", False}


def encode_label(
    value,
    kind: str,
    label_space: Optional[LabelSpace] = None,
    stats: Optional[dict] = None,
):
    """Encode one label value; pure given the fitted label space.

    Returns an int for binary/multiclass, a bitset ``bytes`` for
    multilabel, and a float for regression.
    """
    if kind == "binary":
        if isinstance(value, bool):
            return 1 if value else 0
        if value in _BINARY_TRUE:
            return 1
        if value in _BINARY_FALSE:
            return 0
        raise LabelError(f"binary label must be 0/1-like, got {value!r}")
    if kind == "multiclass":
        idx = label_space.index_of(str(value))
        if idx is None:
            raise LabelError(f"multiclass label {value!r} not in fitted space")
        return idx
    if kind == "multilabel":
        bits = empty_bitset(label_space.size)
        dropped = 0
        for item in value:
            idx = label_space.index_of(str(item))
            if idx is None:
                dropped += 1
                continue
            set_bit(bits, idx)
        if stats is not None and dropped:
            stats["dropped_unknown_labels"] = (
                stats.get("dropped_unknown_labels", 0) + dropped
            )
        return bytes(bits)
    if kind == "regression":
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise LabelError(f"regression label {value!r} is not a number") from None
        if not math.isfinite(out):
            raise LabelError(f"regression label {value!r} is not finite")
        return out
    raise LabelError(f"unknown label kind {kind!r}")


# --------------------------------------------------------------------------
# fitted-state sidecars


def procstate_to_json(kind: str, state) -> str:
    """Canonical serialization of one field's fitted state."""
    doc: dict = {"kind": kind}
    if isinstance(state, Vocabulary):
        doc["reserved"] = {"pad": PAD_INDEX, "unk": UNK_INDEX}
        doc["tokens"] = state.tokens
    elif isinstance(state, LabelSpace):
        doc["labels"] = list(state.labels)
    elif state is not None:
        raise TypeError(f"unsupported state {type(state)!r}")
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def procstate_from_json(text: str):
    doc = json.loads(text)
    kind = doc["kind"]
    if "tokens" in doc:
        mapping = {t: i + 2 for i, t in enumerate(doc["tokens"])}
        return kind, Vocabulary(token_to_index=mapping, size=len(mapping) + 2)
    if "labels" in doc:
        return kind, LabelSpace(labels=tuple(doc["labels"]))
    return kind, None
