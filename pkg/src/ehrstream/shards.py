"""SMP1 sample shards: the bit-exact encoded-sample file format.

Layout (all integers little-endian):

    magic "SMP1" | format_version u32
    per sample: patient_id_len u32 + bytes,
        per input field in schema order, one tagged value:
            tag 0 = index sequence  [count u32, then u32 indices]
            tag 1 = nested sequence [outer u32, per inner: count u32 + u32s]
            tag 2 = multi-hot       [vocab_size u32 + bitset bytes]
            tag 3 = raw             [len u32 + bytes]
        per output field in schema order, one tagged label:
            tag 0 = binary u8, tag 1 = class u32,
            tag 2 = multilabel [space_size u32 + bitset bytes],
            tag 3 = real f64
    footer: sample_count u64 + magic "SMPF"

Bitsets store bit i in byte i//8 at position i%8 (LSB first).
"""

from __future__ import annotations

import struct
from typing import Iterator, Optional

from .errors import IoError, SchemaError
from .processors import (
    LabelSpace,
    Vocabulary,
    encode_label,
    encode_multihot,
    encode_nested,
    encode_sequence,
)

MAGIC = b"SMP1"
FOOTER_MAGIC = b"SMPF"
FORMAT_VERSION = 1

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_FOOTER = struct.Struct("<Q4s")

INPUT_TAGS = {"sequence": 0, "nested_sequence": 1, "multi_hot": 2, "raw": 3}
OUTPUT_TAGS = {"binary": 0, "multiclass": 1, "multilabel": 2, "regression": 3}


def encode_sample(
    patient_id: str,
    values: dict,
    input_schema: dict[str, str],
    output_schema: dict[str, str],
    states: dict[str, object],
    stats: Optional[dict] = None,
) -> bytes:
    """Encode one raw sample into its exact shard byte representation."""
    pid = patient_id.encode("utf-8")
    parts = [_U32.pack(len(pid)), pid]
    for field_name, kind in input_schema.items():
        if field_name not in values:
            raise SchemaError(f"sample is missing input field {field_name!r}")
        value = values[field_name]
        parts.append(_U8.pack(INPUT_TAGS[kind]))
        if kind == "sequence":
            ids = encode_sequence(value, states[field_name])
            parts.append(_U32.pack(len(ids)))
            parts.append(struct.pack(f"<{len(ids)}I", *ids))
        elif kind == "nested_sequence":
            nested = encode_nested(value, states[field_name])
            parts.append(_U32.pack(len(nested)))
            for inner in nested:
                parts.append(_U32.pack(len(inner)))
                parts.append(struct.pack(f"<{len(inner)}I", *inner))
        elif kind == "multi_hot":
            vocab: Vocabulary = states[field_name]
            bits = encode_multihot(value, vocab)
            parts.append(_U32.pack(vocab.size))
            parts.append(bits)
        else:  # raw
            raw = bytes(value)
            parts.append(_U32.pack(len(raw)))
            parts.append(raw)
    for field_name, kind in output_schema.items():
        if field_name not in values:
            raise SchemaError(f"sample is missing output field {field_name!r}")
        encoded = encode_label(values[field_name], kind, states.get(field_name), stats)
        parts.append(_U8.pack(OUTPUT_TAGS[kind]))
        if kind == "binary":
            parts.append(_U8.pack(encoded))
        elif kind == "multiclass":
            parts.append(_U32.pack(encoded))
        elif kind == "multilabel":
            space: LabelSpace = states[field_name]
            parts.append(_U32.pack(space.size))
            parts.append(encoded)
        else:  # regression
            parts.append(_F64.pack(encoded))
    return b"".join(parts)


class ShardWriter:
    def __init__(self, path: str):
        self.path = path
        try:
            self._f = open(path, "wb", buffering=1 << 20)
        except OSError as exc:
            raise IoError(f"cannot create shard {path}: {exc}") from exc
        self._f.write(MAGIC)
        self._f.write(_U32.pack(FORMAT_VERSION))
        self.sample_count = 0

    def add(self, encoded: bytes):
        self._f.write(encoded)
        self.sample_count += 1

    def close(self) -> int:
        self._f.write(_FOOTER.pack(self.sample_count, FOOTER_MAGIC))
        self._f.close()
        return self.sample_count


def read_shard(
    path: str, input_schema: dict[str, str], output_schema: dict[str, str]
) -> Iterator[dict]:
    """Decode a shard back into sample dicts.

    Sequences come back as index lists, multi-hot and multilabel values as
    ``(size, bitset_bytes)`` tuples, raw fields as bytes.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IoError(f"cannot read shard {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise IoError(f"{path}: not an SMP file")
    version = _U32.unpack_from(data, 4)[0]
    if version != FORMAT_VERSION:
        raise IoError(f"{path}: unsupported SMP version {version}")
    count, magic = _FOOTER.unpack_from(data, len(data) - _FOOTER.size)
    if magic != FOOTER_MAGIC:
        raise IoError(f"{path}: bad footer magic")
    end = len(data) - _FOOTER.size
    pos = 8
    for _ in range(count):
        sample = {}
        (pid_len,) = _U32.unpack_from(data, pos)
        pos += 4
        sample["patient_id"] = data[pos : pos + pid_len].decode("utf-8")
        pos += pid_len
        for field_name, kind in input_schema.items():
            tag = data[pos]
            pos += 1
            if tag != INPUT_TAGS[kind]:
                raise IoError(
                    f"{path}: field {field_name!r} has tag {tag}, expected "
                    f"{INPUT_TAGS[kind]}"
                )
            if tag == 0:
                (n,) = _U32.unpack_from(data, pos)
                pos += 4
                sample[field_name] = list(struct.unpack_from(f"<{n}I", data, pos))
                pos += 4 * n
            elif tag == 1:
                (outer,) = _U32.unpack_from(data, pos)
                pos += 4
                nested = []
                for _i in range(outer):
                    (n,) = _U32.unpack_from(data, pos)
                    pos += 4
                    nested.append(list(struct.unpack_from(f"<{n}I", data, pos)))
                    pos += 4 * n
                sample[field_name] = nested
            elif tag == 2:
                (size,) = _U32.unpack_from(data, pos)
                pos += 4
                nbytes = (size + 7) // 8
                sample[field_name] = (size, data[pos : pos + nbytes])
                pos += nbytes
            else:
                (n,) = _U32.unpack_from(data, pos)
                pos += 4
                sample[field_name] = data[pos : pos + n]
                pos += n
        for field_name, kind in output_schema.items():
            tag = data[pos]
            pos += 1
            if tag != OUTPUT_TAGS[kind]:
                raise IoError(
                    f"{path}: field {field_name!r} has tag {tag}, expected "
                    f"{OUTPUT_TAGS[kind]}"
                )
            if tag == 0:
                sample[field_name] = data[pos]
                pos += 1
            elif tag == 1:
                (sample[field_name],) = _U32.unpack_from(data, pos)
                pos += 4
            elif tag == 2:
                (size,) = _U32.unpack_from(data, pos)
                pos += 4
                nbytes = (size + 7) // 8
                sample[field_name] = (size, data[pos : pos + nbytes])
                pos += nbytes
            else:
                (sample[field_name],) = _F64.unpack_from(data, pos)
                pos += 8
        yield sample
    if pos != end:
        raise IoError(f"{path}: {end - pos} trailing bytes after last sample")
