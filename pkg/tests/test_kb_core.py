"""
Tests for knowledge-base construction, groups and set constructors
"""

import numpy as np
import pytest

from neuralquery import kb_core
from neuralquery.exceptions import (EntityLookupError, NQLTypeError, ShapeError, UnknownNameError,
                                    ValidationError)
from neuralquery.kb_core import OOV_ENTITY, build_kb, make_group
from neuralquery.models import FactTriple, GroupSpec, RelationSpec, SchemaSpec, TypeSpec


def tiny_schema(grades=None):
    return SchemaSpec(
        types=[TypeSpec("person_t"), TypeSpec("grade_t", grades)],
        relations=[RelationSpec("father", "person_t", "person_t"),
                   RelationSpec("mother", "person_t", "person_t"),
                   RelationSpec("grade", "person_t", "grade_t")],
        groups=[GroupSpec("parent_t", ["father", "mother"])])


TINY_FACTS = [
    FactTriple("father", "ann", "bob"),
    FactTriple("mother", "ann", "cat"),
    FactTriple("father", "dan", "bob", 0.5),
    FactTriple("grade", "ann", "A"),
]


class TestBuildKB:
    """Materializing schemas and facts"""

    def test_entities_numbered_by_appearance(self):
        """Open types get 0-based indices in order of first appearance"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        assert kb.type("person_t").names == ("ann", "bob", "cat", "dan")
        assert kb.type("person_t").index("dan") == 3
        assert kb.n_tuples == 4

    def test_relation_weights(self):
        """Fact weights end up in the matrix; duplicates are summed"""
        kb = build_kb(tiny_schema(), TINY_FACTS + [FactTriple("father", "dan", "bob", 0.25)])

        pairs = kb.relation_pairs("father")
        assert pairs == {("ann", "bob"): 1.0, ("dan", "bob"): 0.75}

    def test_sorted_order_ignores_fact_permutation(self, rng):
        """With entity_order='sorted' any fact order gives identical matrices"""
        first = build_kb(tiny_schema(), TINY_FACTS, entity_order="sorted")
        shuffled = [TINY_FACTS[i] for i in rng.permutation(len(TINY_FACTS))]
        second = build_kb(tiny_schema(), shuffled, entity_order="sorted")

        for name in first.relations:
            np.testing.assert_array_equal(first.relation(name).matrix.to_dense(),
                                          second.relation(name).matrix.to_dense())
        assert first.type("person_t").names == second.type("person_t").names

    def test_unknown_relation_reports_line(self):
        """A fact naming an undeclared relation fails with its line number"""
        facts = [FactTriple("father", "a", "b"), FactTriple("uncle", "a", "c", line=7)]

        with pytest.raises(UnknownNameError) as excinfo:
            build_kb(tiny_schema(), facts)
        assert excinfo.value.line == 7
        assert excinfo.value.name == "uncle"

    def test_closed_type_rejects_new_entity(self):
        """A closed type's entity list is fixed by the schema"""
        with pytest.raises(NQLTypeError):
            build_kb(tiny_schema(grades=["A", "B"]), [FactTriple("grade", "ann", "Z")])

    def test_closed_type_keeps_declared_order(self):
        """Declared entities come first, in declaration order"""
        kb = build_kb(tiny_schema(grades=["C", "B", "A"]), TINY_FACTS)

        assert kb.type("grade_t").names == ("C", "B", "A")

    def test_empty_kb(self):
        """A schema without facts builds an empty but usable KB"""
        kb = build_kb(tiny_schema(), [])

        assert kb.n_tuples == 0
        assert kb.type("person_t").cardinality == 0
        assert kb.memory_bytes() >= 0

    def test_unknown_entity(self):
        """Looking up a missing entity is an EntityLookupError"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        with pytest.raises(EntityLookupError) as excinfo:
            kb_core.one(kb, "zed", "person_t")
        assert excinfo.value.entity == "zed"
        assert "zed" in str(excinfo.value)

    def test_oov_sentinel(self):
        """Non-strict lookups on OOV types map unknown names to the sentinel"""
        kb = build_kb(tiny_schema(), TINY_FACTS, oov_types=["person_t"])
        decl = kb.type("person_t")

        assert decl.names[-1] == OOV_ENTITY
        assert decl.index("zed", strict=False) == decl.index(OOV_ENTITY)
        with pytest.raises(EntityLookupError):
            decl.index("zed")


class TestGroups:
    """Relation groups and their induced types"""

    def test_group_from_schema(self):
        """A schema group induces a type over its member relations"""
        kb = build_kb(tiny_schema(), TINY_FACTS)
        group = kb.groups["parent_t"]

        assert group.members == ("father", "mother")
        assert group.k == 2
        assert kb.type("parent_t").names == ("father", "mother")
        assert kb.group_for_type("parent_t") is group

    def test_mixed_signatures_rejected(self):
        """All members must share domain and range types"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        with pytest.raises(NQLTypeError):
            make_group(kb, "mixed_t", ["father", "grade"])

    def test_group_name_clash(self):
        """A group cannot reuse a type name"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        with pytest.raises(ValidationError):
            make_group(kb, "person_t", ["father"])

    def test_stacked_layout(self):
        """The stacked matrix is the horizontal concatenation of the members"""
        kb = build_kb(tiny_schema(), TINY_FACTS)
        group = kb.groups["parent_t"]
        expected = np.hstack([m.to_dense() for m in group.matrices])

        np.testing.assert_array_equal(group.stacked().to_dense(), expected)


class TestConstructors:
    """one, one_hot_batch, none, all, target_mask and decode"""

    def test_one_none_all(self):
        """Basic sets over a type"""
        kb = build_kb(tiny_schema(), TINY_FACTS)
        n = kb.type("person_t").cardinality

        one = kb_core.one(kb, "cat", "person_t")
        assert one.shape == (1, n)
        np.testing.assert_array_equal(one.attrs["value"], [[0.0, 0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(kb_core.none(kb, "person_t").attrs["value"], np.zeros((1, n)))
        np.testing.assert_array_equal(kb_core.all(kb, "person_t").attrs["value"], np.ones((1, n)))

    def test_one_hot_batch(self):
        """One singleton per row"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        batch = kb_core.one_hot_batch(kb, ["bob", "ann"], "person_t")
        np.testing.assert_array_equal(batch.attrs["value"], [[0, 1, 0, 0], [1, 0, 0, 0]])

    def test_target_mask(self):
        """A 0/1 mask per row of target names"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        mask = kb_core.target_mask(kb, [["bob", "cat"], ["dan"]], "person_t")
        np.testing.assert_array_equal(mask, [[0, 1, 1, 0], [0, 0, 0, 1]])

    def test_decode_order_and_filters(self):
        """Weight descending, then index ascending; top_k and min_weight applied"""
        kb = build_kb(tiny_schema(), TINY_FACTS)
        batch = np.array([[0.5, 2.0, 0.5, 0.0]])

        assert kb_core.decode(kb, batch, "person_t") == [
            [("bob", 2.0), ("ann", 0.5), ("cat", 0.5)]]
        assert kb_core.decode(kb, batch, "person_t", top_k=2) == [[("bob", 2.0), ("ann", 0.5)]]
        assert kb_core.decode(kb, batch, "person_t", min_weight=1.0) == [[("bob", 2.0)]]

    def test_decode_width_mismatch(self):
        """Decoding a batch of the wrong width is a ShapeError"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        with pytest.raises(ShapeError):
            kb_core.decode(kb, np.zeros((1, 3)), "person_t")

    def test_unknown_type(self):
        """Unknown type names raise UnknownNameError"""
        kb = build_kb(tiny_schema(), TINY_FACTS)

        with pytest.raises(UnknownNameError):
            kb_core.all(kb, "planet_t")
