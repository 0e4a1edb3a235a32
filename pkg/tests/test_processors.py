import json
import random

import pytest
from hypothesis import given, strategies as st

from ehrstream.errors import LabelError
from ehrstream.processors import (
    LabelSpace,
    VocabCounts,
    bitset_indices,
    encode_label,
    encode_multihot,
    encode_nested,
    encode_sequence,
    fit_label_space,
    fit_vocab,
    popcount,
    procstate_from_json,
    procstate_to_json,
)


class TestFitVocab:
    def test_sorted_assignment(self):
        v = fit_vocab([{"b": 1, "a": 2}])
        assert v.token_to_index == {"a": 2, "b": 3}
        assert v.size == 4

    def test_empty_partials(self):
        v = fit_vocab([])
        assert v.size == 2
        assert v.token_to_index == {}

    def test_partition_invariance(self):
        tokens = [f"t{i % 37}" for i in range(500)]
        single = VocabCounts(tokens)
        rng = random.Random(11)
        shuffled = tokens[:]
        rng.shuffle(shuffled)
        cut1, cut2 = sorted(rng.sample(range(500), 2))
        parts = [
            VocabCounts(shuffled[:cut1]),
            VocabCounts(shuffled[cut1:cut2]),
            VocabCounts(shuffled[cut2:]),
        ]
        assert fit_vocab(parts) == fit_vocab([single])

    def test_min_count_filter(self):
        v = fit_vocab([{"rare": 1, "common": 5}], min_count=2)
        assert "rare" not in v.token_to_index
        assert v.token_to_index == {"common": 2}

    @given(
        st.lists(
            st.text(
                alphabet=st.characters(min_codepoint=97, max_codepoint=122),
                min_size=1,
                max_size=4,
            ),
            max_size=60,
        ),
        st.randoms(use_true_random=False),
    )
    def test_merge_commutative_monoid(self, tokens, rng):
        whole = VocabCounts(tokens)
        k = rng.randint(1, 4)
        parts = [VocabCounts() for _ in range(k)]
        for t in tokens:
            parts[rng.randrange(k)][t] += 1
        rng.shuffle(parts)
        assert fit_vocab(parts) == fit_vocab([whole])


class TestEncoders:
    def setup_method(self):
        self.vocab = fit_vocab([{"a": 1, "b": 1}])

    def test_sequence_lookup(self):
        assert encode_sequence(["a", "b"], self.vocab) == [2, 3]

    def test_unknown_maps_to_unk(self):
        assert encode_sequence(["zzz"], self.vocab) == [1]

    def test_length_preserved_no_padding(self):
        assert encode_sequence([], self.vocab) == []
        assert len(encode_sequence(["a"] * 7, self.vocab)) == 7

    def test_round_trip_against_map_oracle(self):
        rng = random.Random(3)
        index_to_token = {i: t for t, i in self.vocab.token_to_index.items()}
        for _ in range(100):
            tokens = [
                rng.choice(["a", "b", "nope", "miss"]) for _ in range(rng.randrange(8))
            ]
            ids = encode_sequence(tokens, self.vocab)
            decoded = [index_to_token.get(i, "<unk>") for i in ids]
            expected = [
                t if t in self.vocab.token_to_index else "<unk>" for t in tokens
            ]
            assert decoded == expected

    def test_nested_structure_preserved(self):
        assert encode_nested([["a"], ["b", "a"]], self.vocab) == [[2], [3, 2]]
        assert encode_nested([], self.vocab) == []
        assert encode_nested([[]], self.vocab) == [[]]

    def test_multihot_bits(self):
        bits = encode_multihot({"a"}, self.vocab)
        assert bitset_indices(bits) == [2]
        assert encode_multihot(set(), self.vocab) == b"\x00"

    def test_multihot_unknown_sets_unk_once(self):
        bits = encode_multihot({"x", "y"}, self.vocab)
        assert bitset_indices(bits) == [1]

    @given(
        st.sets(
            st.sampled_from(["a", "b", "q", "r", "s"]),
            max_size=5,
        )
    )
    def test_popcount_law(self, tokens):
        bits = encode_multihot(tokens, self.vocab)
        known = len(tokens & set(self.vocab.token_to_index))
        unknown = 1 if tokens - set(self.vocab.token_to_index) else 0
        assert popcount(bits) == known + unknown


class TestLabels:
    def test_binary_coercions(self):
        for v in (1, "1", True):
            assert encode_label(v, "binary") == 1
        for v in (0, "0", False):
            assert encode_label(v, "binary") == 0
        with pytest.raises(LabelError):
            encode_label("yes", "binary")

    def test_multiclass_sorted_assignment(self):
        space = fit_label_space([{"hi": 1, "lo": 1}])
        assert encode_label("hi", "multiclass", space) == 0
        assert encode_label("lo", "multiclass", space) == 1
        with pytest.raises(LabelError):
            encode_label("mid", "multiclass", space)

    def test_multilabel_bitset_with_sorted_space_oracle(self):
        space = fit_label_space([{"d1": 1, "d2": 1, "d3": 1}])
        bits = encode_label({"d2"}, "multilabel", space)
        assert bitset_indices(bits) == [1]

    def test_multilabel_unknowns_dropped_and_counted(self):
        space = fit_label_space([{"d1": 1}])
        stats = {}
        bits = encode_label({"d1", "nope"}, "multilabel", space, stats)
        assert bitset_indices(bits) == [0]
        assert stats["dropped_unknown_labels"] == 1

    def test_regression(self):
        assert encode_label("2.5", "regression") == 2.5
        with pytest.raises(LabelError):
            encode_label(float("nan"), "regression")
        with pytest.raises(LabelError):
            encode_label("abc", "regression")

    def test_label_space_order_insensitive(self):
        a = fit_label_space([{"x": 1}, {"y": 2}])
        b = fit_label_space([{"y": 2}, {"x": 1}])
        assert a == b == LabelSpace(labels=("x", "y"))


class TestProcstate:
    def test_vocab_round_trip(self):
        v = fit_vocab([{"beta": 1, "alpha": 1}])
        text = procstate_to_json("sequence", v)
        kind, restored = procstate_from_json(text)
        assert kind == "sequence"
        assert restored == v

    def test_canonical_bytes(self):
        v = fit_vocab([{"a": 1}])
        assert procstate_to_json("sequence", v) == procstate_to_json("sequence", v)
        doc = json.loads(procstate_to_json("sequence", v))
        assert doc["reserved"] == {"pad": 0, "unk": 1}

    def test_label_space_round_trip(self):
        space = fit_label_space([{"m": 1, "k": 1}])
        kind, restored = procstate_from_json(procstate_to_json("multiclass", space))
        assert kind == "multiclass"
        assert restored == space

    def test_kind_only_state(self):
        kind, state = procstate_from_json(procstate_to_json("binary", None))
        assert kind == "binary"
        assert state is None


class TestEncodingPurity:
    def test_repeated_calls_identical(self):
        v = fit_vocab([{"a": 3}])
        space = fit_label_space([{"x": 1, "y": 1}])
        for _ in range(3):
            assert encode_sequence(["a", "zz"], v) == [2, 1]
            assert encode_label("y", "multiclass", space) == 1
