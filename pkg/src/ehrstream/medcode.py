"""Medical-coding ontology engine: code graphs and cross-system maps.

Ontology and mapping data are runtime-loaded CSVs; tiny synthetic fixtures
ship with the tests, while real vocabulary files (ICD, ATC, NDC, RxNorm,
CCS) are user-supplied.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

from .csvio import open_csv_reader
from .errors import (
    CycleError,
    DanglingParentError,
    DuplicateCodeError,
    UnknownCodeError,
    ValidationError,
)

ONTOLOGY_HEADER = ["code", "name", "parent"]
CROSSMAP_HEADER = ["source", "target"]


@dataclass(frozen=True)
class OntologyGraph:
    """Acyclic parent-child code graph for one coding system."""

    system: str
    names: dict[str, str]
    parents: dict[str, Optional[str]]
    children: dict[str, tuple[str, ...]]

    def __contains__(self, code: str) -> bool:
        return code in self.names

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class CrossMap:
    """Many-to-many mapping between two coding systems."""

    source_system: str
    target_system: str
    mapping: dict[str, frozenset[str]]

    @property
    def pair_count(self) -> int:
        return sum(len(v) for v in self.mapping.values())


def load_ontology(system: str, file: str) -> OntologyGraph:
    """Load and validate a ``code,name,parent`` CSV into a graph.

    Raises CycleError, DanglingParentError, or DuplicateCodeError with the
    offending code named.
    """
    reader, header = open_csv_reader(file)
    names: dict[str, str] = {}
    parents: dict[str, Optional[str]] = {}
    with reader:
        if header != ONTOLOGY_HEADER:
            raise ValidationError(
                f"{file}: ontology header must be {','.join(ONTOLOGY_HEADER)!r}, "
                f"got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader.rows(), start=2):
            row = row + [""] * (3 - len(row)) if len(row) < 3 else row
            code, name, parent = row[0], row[1], row[2]
            if not code:
                raise ValidationError(f"{file}: line {lineno}: empty code")
            if code in names:
                raise DuplicateCodeError(
                    f"{file}: code {code!r} defined more than once"
                )
            names[code] = name
            parents[code] = parent or None
    children_mut: dict[str, list[str]] = defaultdict(list)
    for code, parent in parents.items():
        if parent is None:
            continue
        if parent not in names:
            raise DanglingParentError(
                f"{file}: code {code!r} names missing parent {parent!r}"
            )
        children_mut[parent].append(code)
    # walk every parent chain once, reusing already-cleared codes
    cleared: set[str] = set()
    for code in names:
        chain = []
        cursor: Optional[str] = code
        on_chain = set()
        while cursor is not None and cursor not in cleared:
            if cursor in on_chain:
                raise CycleError(cursor)
            on_chain.add(cursor)
            chain.append(cursor)
            cursor = parents[cursor]
        cleared.update(chain)
    children = {c: tuple(kids) for c, kids in children_mut.items()}
    return OntologyGraph(system=system, names=names, parents=parents, children=children)


def lookup(g: OntologyGraph, code: str) -> Optional[str]:
    return g.names.get(code)


def ancestors(g: OntologyGraph, code: str) -> list[str]:
    """Transitive parent chain, nearest first, excluding the code itself."""
    if code not in g.names:
        raise UnknownCodeError(f"code {code!r} not in {g.system} ontology")
    out = []
    cursor = g.parents[code]
    while cursor is not None:
        out.append(cursor)
        cursor = g.parents[cursor]
    return out


def descendants(g: OntologyGraph, code: str) -> set[str]:
    """All codes whose ancestor chain contains ``code`` (excludes itself)."""
    if code not in g.names:
        raise UnknownCodeError(f"code {code!r} not in {g.system} ontology")
    out: set[str] = set()
    stack = list(g.children.get(code, ()))
    while stack:
        c = stack.pop()
        if c in out:
            continue
        out.add(c)
        stack.extend(g.children.get(c, ()))
    return out


def load_crossmap(source_system: str, target_system: str, file: str) -> CrossMap:
    reader, header = open_csv_reader(file)
    mapping_mut: dict[str, set[str]] = defaultdict(set)
    with reader:
        if header != CROSSMAP_HEADER:
            raise ValidationError(
                f"{file}: crossmap header must be {','.join(CROSSMAP_HEADER)!r}, "
                f"got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader.rows(), start=2):
            if len(row) < 2 or not row[0] or not row[1]:
                raise ValidationError(
                    f"{file}: line {lineno}: need non-empty source and target"
                )
            mapping_mut[row[0]].add(row[1])
    return CrossMap(
        source_system=source_system,
        target_system=target_system,
        mapping={k: frozenset(v) for k, v in mapping_mut.items()},
    )


def translate(m: CrossMap, code: str) -> set[str]:
    """All mapped target codes; empty set when unmapped (not an error)."""
    return set(m.mapping.get(code, frozenset()))
