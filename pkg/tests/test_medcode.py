import os
import random

import pytest

from conftest import FIXTURE_DIR
from ehrstream.errors import (
    CycleError,
    DanglingParentError,
    DuplicateCodeError,
    UnknownCodeError,
    ValidationError,
)
from ehrstream.medcode import (
    ancestors,
    descendants,
    load_crossmap,
    load_ontology,
    lookup,
    translate,
)

ONTOLOGY = os.path.join(FIXTURE_DIR, "ontology.csv")
CROSSMAP = os.path.join(FIXTURE_DIR, "ndc_to_atc.csv")


def write_ontology(tmp_path, rows):
    path = tmp_path / "o.csv"
    path.write_text("code,name,parent\n" + "".join(f"{r}\n" for r in rows))
    return str(path)


def oracle_ancestors(parents, code):
    """Independent iterative parent walk."""
    out = []
    cursor = parents.get(code)
    while cursor:
        out.append(cursor)
        cursor = parents.get(cursor)
    return out


class TestLoadOntology:
    def test_fixture_tree(self):
        g = load_ontology("demo", ONTOLOGY)
        assert len(g) == 10
        roots = [c for c, p in g.parents.items() if p is None]
        assert roots == ["ROOT"]

    def test_self_parent_is_cycle(self, tmp_path):
        path = write_ontology(tmp_path, ["A,Thing,A"])
        with pytest.raises(CycleError):
            load_ontology("demo", path)

    def test_two_node_cycle(self, tmp_path):
        path = write_ontology(tmp_path, ["A,Thing,B", "B,Other,A"])
        with pytest.raises(CycleError):
            load_ontology("demo", path)

    def test_duplicate_code(self, tmp_path):
        path = write_ontology(tmp_path, ["A,Thing,", "A,Again,"])
        with pytest.raises(DuplicateCodeError, match="'A'"):
            load_ontology("demo", path)

    def test_dangling_parent(self, tmp_path):
        path = write_ontology(tmp_path, ["A,Thing,GHOST"])
        with pytest.raises(DanglingParentError, match="GHOST"):
            load_ontology("demo", path)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,label,up\n")
        with pytest.raises(ValidationError, match="header"):
            load_ontology("demo", str(path))

    def test_random_cyclic_permutations_rejected(self, tmp_path):
        rng = random.Random(13)
        for trial in range(25):
            n = rng.randrange(3, 10)
            codes = [f"X{i}" for i in range(n)]
            # a ring plus random extra nodes hanging off it
            rows = [
                f"{codes[i]},node,{codes[(i + 1) % n]}" for i in range(n)
            ]
            extra = [f"E{i},leaf,{rng.choice(codes)}" for i in range(rng.randrange(3))]
            all_rows = rows + extra
            rng.shuffle(all_rows)
            path = tmp_path / f"t{trial}.csv"
            path.write_text(
                "code,name,parent\n" + "".join(f"{r}\n" for r in all_rows)
            )
            with pytest.raises(CycleError):
                load_ontology("demo", str(path))


class TestLookup:
    def test_fixture_names(self):
        g = load_ontology("demo", ONTOLOGY)
        assert lookup(g, "C111") == "Essential hypertension"
        assert lookup(g, "ROOT") == "All diagnoses"

    def test_unknown_absent(self):
        g = load_ontology("demo", ONTOLOGY)
        assert lookup(g, "NOPE") is None

    def test_stable_across_calls(self):
        g = load_ontology("demo", ONTOLOGY)
        assert lookup(g, "C21") == lookup(g, "C21")


class TestAncestors:
    def test_depth_three_leaf(self):
        g = load_ontology("demo", ONTOLOGY)
        assert ancestors(g, "C2111") == ["C211", "C21", "C2", "ROOT"]

    def test_root_has_none(self):
        g = load_ontology("demo", ONTOLOGY)
        assert ancestors(g, "ROOT") == []

    def test_never_contains_self(self):
        g = load_ontology("demo", ONTOLOGY)
        for code in g.names:
            assert code not in ancestors(g, code)

    def test_unknown_code_raises(self):
        g = load_ontology("demo", ONTOLOGY)
        with pytest.raises(UnknownCodeError):
            ancestors(g, "NOPE")

    def test_matches_oracle_walk(self):
        g = load_ontology("demo", ONTOLOGY)
        for code in g.names:
            assert ancestors(g, code) == oracle_ancestors(g.parents, code)


class TestDescendants:
    def test_duality_with_ancestors(self):
        g = load_ontology("demo", ONTOLOGY)
        for code in g.names:
            expected = {c for c in g.names if code in ancestors(g, c)}
            assert descendants(g, code) == expected


class TestTranslate:
    def test_fixture_pairs(self):
        m = load_crossmap("NDC", "ATC", CROSSMAP)
        assert translate(m, "N0001") == {"A01AA01", "A01AB02"}
        assert m.pair_count == 4

    def test_unmapped_is_empty(self):
        m = load_crossmap("NDC", "ATC", CROSSMAP)
        assert translate(m, "N9999") == set()

    def test_distributes_over_union(self):
        m = load_crossmap("NDC", "ATC", CROSSMAP)
        codes = ["N0001", "N0002", "N9999"]
        unioned = set().union(*(translate(m, c) for c in codes))
        assert unioned == {"A01AA01", "A01AB02", "B02BC03"}

    def test_duplicate_pairs_collapse(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("source,target\nA,X\nA,X\n")
        m = load_crossmap("s", "t", str(path))
        assert m.pair_count == 1
