"""
The knowledge base context: typed entity symbol tables, weighted relations,
relation groups, and the primitive set constructors ``one``/``none``/``all``.
"""

import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import graph
from . import sparse_linalg as sl
from .exceptions import (EntityLookupError, NQLTypeError, ShapeError, UnknownNameError,
                         ValidationError)
from .models import FactTriple, SchemaSpec

logger = logging.getLogger(__name__)

OOV_ENTITY = "<OOV>"


@dataclass(frozen=True)
class TypeDecl:
    """An entity type with a name <-> index bijection (indices are 0-based)."""

    name: str
    names: Tuple[str, ...]
    name_index: Mapping[str, int] = field(repr=False, compare=False)
    oov: bool = False

    @classmethod
    def create(cls, name: str, names: Sequence[str], oov: bool = False) -> "TypeDecl":
        names = tuple(names)
        if oov and OOV_ENTITY not in names:
            names = names + (OOV_ENTITY,)
        index = {n: i for i, n in enumerate(names)}
        if len(index) != len(names):
            raise ValidationError(f"type {name!r} lists an entity name twice")
        return cls(name, names, MappingProxyType(index), oov)

    @property
    def cardinality(self) -> int:
        return len(self.names)

    def index(self, entity: str, strict: bool = True) -> int:
        try:
            return self.name_index[entity]
        except KeyError:
            if not strict and self.oov:
                logger.warning("entity %r not in %s, using OOV sentinel", entity, self.name)
                return self.name_index[OOV_ENTITY]
            raise EntityLookupError(entity, self.name) from None

    def name_of(self, index: int) -> str:
        return self.names[index]


@dataclass(frozen=True)
class RelationDecl:
    name: str
    domain_type: str
    range_type: str
    matrix: sl.SparseMatrix

    @property
    def transpose(self) -> sl.SparseMatrix:
        return self.matrix.T


class RelationGroup:
    """Same-signature relations promoted to an entity type of their own."""

    def __init__(self, name: str, relations: Sequence[RelationDecl]):
        if not relations:
            raise ValidationError(f"group {name!r} needs at least one member")
        self.name = name
        self.members = tuple(r.name for r in relations)
        self.domain_type = relations[0].domain_type
        self.range_type = relations[0].range_type
        self.induced_type = TypeDecl.create(name, self.members)
        self.matrices = tuple(r.matrix for r in relations)
        self.transposes = tuple(r.matrix.T for r in relations)
        self._stacked: Dict[bool, sl.SparseMatrix] = {}

    @property
    def k(self) -> int:
        return len(self.members)

    def stacked(self, inverse: bool = False) -> sl.SparseMatrix:
        if inverse not in self._stacked:
            self._stacked[inverse] = sl.stack_members(
                self.transposes if inverse else self.matrices)
        return self._stacked[inverse]

    def __repr__(self) -> str:
        return (f"RelationGroup({self.name!r}, {list(self.members)}, "
                f"{self.domain_type}->{self.range_type})")


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    """The immutable pair of relations and typed entities."""

    types: Mapping[str, TypeDecl]
    relations: Mapping[str, RelationDecl]
    groups: Mapping[str, RelationGroup] = field(default_factory=lambda: MappingProxyType({}))

    def type(self, name: str) -> TypeDecl:
        if name in self.types:
            return self.types[name]
        if name in self.groups:
            return self.groups[name].induced_type
        raise UnknownNameError("type", name)

    def relation(self, name: str) -> RelationDecl:
        try:
            return self.relations[name]
        except KeyError:
            raise UnknownNameError("relation", name) from None

    def group_for_type(self, type_name: Optional[str]) -> Optional[RelationGroup]:
        return self.groups.get(type_name) if type_name is not None else None

    def with_groups(self, *groups: RelationGroup) -> "KnowledgeBase":
        merged = dict(self.groups)
        for g in groups:
            if g.name in self.types:
                raise ValidationError(f"group {g.name!r} clashes with a declared type")
            merged[g.name] = g
        return KnowledgeBase(self.types, self.relations, MappingProxyType(merged))

    @property
    def n_entities(self) -> int:
        return sum(t.cardinality for t in self.types.values())

    @property
    def n_tuples(self) -> int:
        return sum(r.matrix.nnz for r in self.relations.values())

    def memory_bytes(self) -> int:
        return sum(r.matrix.memory_bytes() for r in self.relations.values())

    def relation_pairs(self, name: str) -> Dict[Tuple[str, str], float]:
        """Name-level view ``{(subject, object): weight}`` of a relation."""
        rel = self.relation(name)
        dom, rng = self.types[rel.domain_type], self.types[rel.range_type]
        return {(dom.names[i], rng.names[j]): w for i, j, w in rel.matrix.entries()}


def build_kb(schema: SchemaSpec, facts: Iterable[FactTriple], *,
             entity_order: str = "appearance", oov_types: Sequence[str] = ()) -> KnowledgeBase:
    """Materialize a frozen KnowledgeBase; duplicate facts have their weights summed."""
    if entity_order not in ("appearance", "sorted"):
        raise ValidationError(f"unknown entity order {entity_order!r}")
    specs = {}
    for t in schema.types:
        if t.name in specs:
            raise ValidationError(f"type {t.name!r} declared twice")
        specs[t.name] = t
    names: Dict[str, Dict[str, None]] = {
        t: dict.fromkeys(s.entities or ()) for t, s in specs.items()}
    rels = {}
    for r in schema.relations:
        if r.name in rels:
            raise ValidationError(f"relation {r.name!r} declared twice")
        for t in (r.domain_type, r.range_type):
            if t not in specs:
                raise UnknownNameError("type", t)
        rels[r.name] = r

    triples: Dict[str, Tuple[List[str], List[str], List[float]]] = {n: ([], [], []) for n in rels}
    for count, fact in enumerate(facts, 1):
        line = fact.line if fact.line is not None else count
        spec = rels.get(fact.relation)
        if spec is None:
            raise UnknownNameError("relation", fact.relation, line=line)
        if not fact.weight >= 0 or not np.isfinite(fact.weight):
            raise ValidationError(f"line {line}: weight {fact.weight} must be finite and >= 0")
        for entity, type_name in ((fact.subject, spec.domain_type), (fact.object, spec.range_type)):
            table = names[type_name]
            if entity not in table:
                if specs[type_name].closed:
                    raise NQLTypeError(f"line {line}: {entity!r} is not an entity of closed type "
                                       f"{type_name!r}", expected=type_name)
                table[entity] = None
        subj, obj, weights = triples[fact.relation]
        subj.append(fact.subject)
        obj.append(fact.object)
        weights.append(float(fact.weight))

    types = {}
    for type_name, table in names.items():
        declared = list(specs[type_name].entities or ())
        known = set(declared)
        discovered = [n for n in table if n not in known]
        if entity_order == "sorted":
            discovered.sort()
        oov = specs[type_name].oov or type_name in oov_types
        types[type_name] = TypeDecl.create(type_name, declared + discovered, oov=oov)

    relations = {}
    for rel_name, spec in rels.items():
        dom, rng = types[spec.domain_type], types[spec.range_type]
        subj, obj, weights = triples[rel_name]
        matrix = sl.SparseMatrix.from_triples([dom.name_index[s] for s in subj],
                                              [rng.name_index[o] for o in obj],
                                              weights, (dom.cardinality, rng.cardinality))
        if (matrix.T.csr != matrix.csr.T).nnz:
            raise ValidationError(f"relation {rel_name!r}: transpose layout mismatch")
        relations[rel_name] = RelationDecl(rel_name, spec.domain_type, spec.range_type, matrix)
        logger.debug("relation %s: %dx%d, %d entries", rel_name, dom.cardinality,
                     rng.cardinality, matrix.nnz)

    kb = KnowledgeBase(MappingProxyType(types), MappingProxyType(relations))
    groups = [make_group(kb, g.name, g.members) for g in schema.groups]
    if groups:
        kb = kb.with_groups(*groups)
    logger.info("built KB: %d types, %d relations, %d tuples", len(types), len(relations),
                kb.n_tuples)
    return kb


def make_group(kb: KnowledgeBase, group_name: str,
               member_relation_names: Sequence[str]) -> RelationGroup:
    if group_name in kb.types:
        raise ValidationError(f"group name {group_name!r} is already a type")
    members = [kb.relation(n) for n in member_relation_names]
    if not members:
        raise ValidationError(f"group {group_name!r} needs at least one member")
    if len(set(member_relation_names)) != len(members):
        raise ValidationError(f"group {group_name!r} lists a member twice")
    signature = (members[0].domain_type, members[0].range_type)
    offending = [m.name for m in members if (m.domain_type, m.range_type) != signature]
    if offending:
        raise NQLTypeError(f"group {group_name!r} mixes signatures: {offending} differ from "
                           f"{signature[0]}->{signature[1]}", expected=f"{signature[0]}->"
                           f"{signature[1]}")
    return RelationGroup(group_name, members)


def one(kb: KnowledgeBase, entity_name: str, type_name: str, strict: bool = True,
        context=None) -> graph.Expr:
    """Singleton unit-weighted set ``{entity_name: 1.0}``."""
    decl = kb.type(type_name)
    values = np.zeros((1, decl.cardinality))
    values[0, decl.index(entity_name, strict=strict)] = 1.0
    return graph.constant(values, type_name, kb, context)


def one_hot_batch(kb: KnowledgeBase, entity_names: Sequence[str], type_name: str,
                  strict: bool = True, context=None) -> graph.Expr:
    """One singleton per batch row."""
    decl = kb.type(type_name)
    values = np.zeros((len(entity_names), decl.cardinality))
    for row, name in enumerate(entity_names):
        values[row, decl.index(name, strict=strict)] = 1.0
    return graph.constant(values, type_name, kb, context)


def none(kb: KnowledgeBase, type_name: str, context=None) -> graph.Expr:
    return graph.constant(np.zeros((1, kb.type(type_name).cardinality)), type_name, kb, context)


def all(kb: KnowledgeBase, type_name: str, context=None) -> graph.Expr:  # noqa: A001
    return graph.constant(np.ones((1, kb.type(type_name).cardinality)), type_name, kb, context)


def target_mask(kb: KnowledgeBase, targets: Sequence[Iterable[str]], type_name: str,
                strict: bool = True) -> np.ndarray:
    decl = kb.type(type_name)
    mask = np.zeros((len(targets), decl.cardinality))
    for row, names in enumerate(targets):
        for name in names:
            mask[row, decl.index(name, strict=strict)] = 1.0
    return mask


def decode(kb: KnowledgeBase, batch: np.ndarray, type_name: str, top_k: Optional[int] = None,
           min_weight: Optional[float] = None) -> List[List[Tuple[str, float]]]:
    """Entity names and weights per row, by weight descending then index ascending."""
    decl = kb.type(type_name)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != decl.cardinality:
        raise ShapeError(f"batch of shape {batch.shape} does not decode as {type_name!r} "
                         f"(N={decl.cardinality})", batch.shape)
    rows = []
    for weights in batch:
        keep = weights != 0
        if min_weight is not None:
            keep &= weights >= min_weight
        idx = np.flatnonzero(keep)
        order = idx[np.lexsort((idx, -weights[idx]))]
        if top_k is not None:
            order = order[:top_k]
        rows.append([(decl.names[i], float(weights[i])) for i in order])
    return rows
