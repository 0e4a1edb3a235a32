"""Length-prefixed pickle frames for spill files.

One frame per object keeps both pickler and unpickler memo tables empty,
so streaming a large spill file never accumulates the decoded objects.
"""

from __future__ import annotations

import pickle
import struct
from typing import Iterator

_LEN = struct.Struct("<I")


def write_frame(f, obj) -> int:
    blob = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
    f.write(_LEN.pack(len(blob)))
    f.write(blob)
    return len(blob) + 4


def iter_frames(f) -> Iterator:
    read = f.read
    while True:
        header = read(4)
        if not header:
            return
        (n,) = _LEN.unpack(header)
        yield pickle.loads(read(n))
