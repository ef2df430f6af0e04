"""
Built-in knowledge bases: the royal-family miniature, the student/grade
tables, seeded kinship and random KB generators, and brute-force oracles
that answer the same questions without the engine.
"""

import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import (Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple)

import networkx as nx
import numpy as np

from . import kb_io
from . import sparse_linalg as sl
from .exceptions import ValidationError
from .kb_core import KnowledgeBase, RelationDecl, TypeDecl, make_group
from .models import Example, FactTriple, GroupSpec, KinshipSpec, RelationSpec, SchemaSpec, TypeSpec

logger = logging.getLogger(__name__)

FAMILY_RELATIONS = ("aunt", "brother", "daughter", "father", "husband", "mother", "nephew",
                    "niece", "sister", "son", "uncle", "wife")
PERSON_TYPE = "person_t"
FAMILY_GROUP = "rel_t"

KINSHIP_RULES = """\
# Kinship relations

Every relation reads `rel(x, y)`: y is the rel of x, so `x.rel()` returns y.
Primitive data are parent links, marriages and genders (M/F).

- father / mother: a male / female parent of x.
- son / daughter: a male / female child of x.
- husband / wife: a male / female spouse of x.
- brother / sister: a male / female person other than x sharing a parent with x.
- uncle: a brother of a parent of x, or the husband of an aunt by blood.
- aunt: a sister of a parent of x, or the wife of an uncle by blood.
- nephew / niece: a male / female person whose uncle or aunt is x.
"""


def family_schema(entities: Optional[Sequence[str]] = None) -> SchemaSpec:
    """``person_t`` with the twelve family relations and the group ``rel_t`` over them."""
    return SchemaSpec(
        types=[TypeSpec(PERSON_TYPE, list(entities) if entities is not None else None)],
        relations=[RelationSpec(r, PERSON_TYPE, PERSON_TYPE) for r in FAMILY_RELATIONS],
        groups=[GroupSpec(FAMILY_GROUP, list(FAMILY_RELATIONS))])


def derive_family_relations(parents: Mapping[str, Iterable[str]],
                            marriages: Iterable[Tuple[str, str]],
                            gender: Mapping[str, str]) -> List[FactTriple]:
    """The twelve relations from parent, marriage and gender primitives, sorted."""
    for person, g in gender.items():
        if g not in ("M", "F"):
            raise ValidationError(f"gender of {person!r} must be 'M' or 'F', got {g!r}")
    parents_of: Dict[str, Set[str]] = defaultdict(set)
    children_of: Dict[str, Set[str]] = defaultdict(set)
    spouses_of: Dict[str, Set[str]] = defaultdict(set)
    for child, ps in parents.items():
        for p in ps:
            parents_of[child].add(p)
            children_of[p].add(child)
    for a, b in marriages:
        spouses_of[a].add(b)
        spouses_of[b].add(a)

    def male(p: str) -> bool:
        return gender[p] == "M"

    def siblings(x: str) -> Set[str]:
        return {s for p in parents_of[x] for s in children_of[p]} - {x}

    blood_uncles = {x: {s for p in parents_of[x] for s in siblings(p) if male(s)}
                    for x in gender}
    blood_aunts = {x: {s for p in parents_of[x] for s in siblings(p) if not male(s)}
                   for x in gender}

    facts: Set[Tuple[str, str, str]] = set()
    for x in gender:
        for p in parents_of[x]:
            facts.add(("father" if male(p) else "mother", x, p))
        for c in children_of[x]:
            facts.add(("son" if male(c) else "daughter", x, c))
        for s in spouses_of[x]:
            facts.add(("husband" if male(s) else "wife", x, s))
        for s in siblings(x):
            facts.add(("brother" if male(s) else "sister", x, s))
        uncles = set(blood_uncles[x])
        uncles |= {h for a in blood_aunts[x] for h in spouses_of[a] if male(h)}
        aunts = set(blood_aunts[x])
        aunts |= {w for u in blood_uncles[x] for w in spouses_of[u] if not male(w)}
        for u in uncles:
            facts.add(("uncle", x, u))
            facts.add(("nephew" if male(x) else "niece", u, x))
        for a in aunts:
            facts.add(("aunt", x, a))
            facts.add(("nephew" if male(x) else "niece", a, x))
    return [FactTriple(r, s, o) for r, s, o in sorted(facts)]


class KinshipOracle:
    """Answers relation chains by walking an explicit graph of the facts."""

    def __init__(self, facts: Iterable[FactTriple]):
        self.graph = nx.MultiDiGraph()
        for fact in facts:
            self.graph.add_edge(fact.subject, fact.object, key=fact.relation,
                                relation=fact.relation, weight=fact.weight)

    @property
    def persons(self) -> List[str]:
        return sorted(self.graph.nodes)

    def follow(self, entities: Iterable[str], relation: str, inverse: bool = False) -> Set[str]:
        out: Set[str] = set()
        for x in entities:
            if x not in self.graph:
                continue
            if inverse:
                out |= {u for u, _, key in self.graph.in_edges(x, keys=True) if key == relation}
            else:
                out |= {v for _, v, key in self.graph.out_edges(x, keys=True) if key == relation}
        return out

    def chain(self, seed: str, path: Sequence[str]) -> Set[str]:
        frontier = {seed}
        for relation in path:
            frontier = self.follow(frontier, relation)
        return frontier

    __call__ = chain

    def step_fathers(self, x: str) -> Set[str]:
        """Husbands of x's mother who are not x's father."""
        return self.chain(x, ["mother", "husband"]) - self.chain(x, ["father"])


# ---------------------------------------------------------------- royal family

ROYAL_SEED = "Henry_VIII of house of Tudor"

# the three wives quoted most often keep their canonical spellings; everyone
# else in this miniature tree is filled in by hand
_ROYAL_PEOPLE = {
    "Henry_VII of house of Tudor": "M",
    "Elizabeth of house of York": "F",
    "Arthur of house of Tudor": "M",
    ROYAL_SEED: "M",
    "Margaret of house of Tudor": "F",
    "Mary of house of Tudor": "F",
    "James_IV of house of Stuart": "M",
    "James_V of house of Stuart": "M",
    "Charles of house of Brandon": "M",
    "Catherine of Aragon": "F",
    "Anne of house of Boleyn": "F",
    "Jane of house of Seymour": "F",
    "Anne of_Cleves": "F",
    "Catherine of house of Howard": "F",
    "Catherine of house of Parr": "F",
    "Mary_I of house of Tudor": "F",
    "Elizabeth_I of house of Tudor": "F",
    "Edward_VI of house of Tudor": "M",
    "Ferdinand_II of Aragon": "M",
    "Isabella_I of Castile": "F",
    "Thomas of house of Boleyn": "M",
    "Elizabeth of house of Howard": "F",
    "George of house of Boleyn": "M",
    "Mary of house of Boleyn": "F",
    "John of house of Seymour": "M",
    "Margery of house of Wentworth": "F",
    "Edward of house of Seymour": "M",
    "Thomas of house of Seymour": "M",
    "John_III of Cleves": "M",
    "Maria of Julich-Berg": "F",
}

_ROYAL_COUPLES = [
    ("Henry_VII of house of Tudor", "Elizabeth of house of York"),
    ("James_IV of house of Stuart", "Margaret of house of Tudor"),
    ("Charles of house of Brandon", "Mary of house of Tudor"),
    (ROYAL_SEED, "Catherine of Aragon"),
    (ROYAL_SEED, "Anne of house of Boleyn"),
    (ROYAL_SEED, "Jane of house of Seymour"),
    (ROYAL_SEED, "Anne of_Cleves"),
    (ROYAL_SEED, "Catherine of house of Howard"),
    (ROYAL_SEED, "Catherine of house of Parr"),
    ("Ferdinand_II of Aragon", "Isabella_I of Castile"),
    ("Thomas of house of Boleyn", "Elizabeth of house of Howard"),
    ("John of house of Seymour", "Margery of house of Wentworth"),
    ("John_III of Cleves", "Maria of Julich-Berg"),
]

_ROYAL_CHILDREN = [
    (("Henry_VII of house of Tudor", "Elizabeth of house of York"),
     ["Arthur of house of Tudor", ROYAL_SEED, "Margaret of house of Tudor",
      "Mary of house of Tudor"]),
    (("James_IV of house of Stuart", "Margaret of house of Tudor"),
     ["James_V of house of Stuart"]),
    ((ROYAL_SEED, "Catherine of Aragon"), ["Mary_I of house of Tudor"]),
    ((ROYAL_SEED, "Anne of house of Boleyn"), ["Elizabeth_I of house of Tudor"]),
    ((ROYAL_SEED, "Jane of house of Seymour"), ["Edward_VI of house of Tudor"]),
    (("Ferdinand_II of Aragon", "Isabella_I of Castile"), ["Catherine of Aragon"]),
    (("Thomas of house of Boleyn", "Elizabeth of house of Howard"),
     ["Anne of house of Boleyn", "George of house of Boleyn", "Mary of house of Boleyn"]),
    (("John of house of Seymour", "Margery of house of Wentworth"),
     ["Jane of house of Seymour", "Edward of house of Seymour",
      "Thomas of house of Seymour"]),
    (("John_III of Cleves", "Maria of Julich-Berg"), ["Anne of_Cleves"]),
]

# in-laws: the parents and siblings of every wife (8 parents, 4 siblings)
ROYAL_IN_LAW_QUERY = (
    f"wives = one('{ROYAL_SEED}', person_t).wife()\n"
    "wives.father() | wives.mother() | wives.brother() | wives.sister()\n"
)

ROYAL_EXPECTED = {
    "wives": 6,
    "in_laws": 12,
    # daughters Mary I and Elizabeth I have no children in the tree
    "daughters_sons_of_henry8": (),
    "daughters_sons_of_henry7": ("James_V of house of Stuart",),
}


def royal_fixture() -> Tuple[SchemaSpec, List[FactTriple]]:
    parents: Dict[str, List[str]] = {}
    for couple, children in _ROYAL_CHILDREN:
        for child in children:
            parents[child] = list(couple)
    facts = derive_family_relations(parents, _ROYAL_COUPLES, _ROYAL_PEOPLE)
    return family_schema(), facts


# ---------------------------------------------------------------- kinship generator

def _validate_kinship(spec: KinshipSpec) -> None:
    if spec.generations < 1:
        raise ValidationError(f"generations must be >= 1, got {spec.generations}")
    if spec.persons_per_generation < 2:
        raise ValidationError(f"persons_per_generation must be >= 2, got "
                              f"{spec.persons_per_generation}")
    for name in ("marriage_prob", "remarriage_prob"):
        value = getattr(spec, name)
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name} must be in [0, 1], got {value}")
    if not 0 <= spec.min_children <= spec.max_children:
        raise ValidationError(f"children bounds must satisfy 0 <= min <= max, got "
                              f"{spec.min_children}..{spec.max_children}")


def generate_kinship(spec: KinshipSpec) -> Tuple[SchemaSpec, List[FactTriple], KinshipOracle]:
    """A seeded multi-generation family tree and its twelve derived relations."""
    _validate_kinship(spec)
    rng = np.random.default_rng(spec.seed)
    gender: Dict[str, str] = {}
    parents: Dict[str, Tuple[str, str]] = {}
    marriages: List[Tuple[str, str]] = []

    def person(generation: int) -> str:
        name = f"g{generation}_p{len(gender):05d}"
        gender[name] = "M" if rng.random() < 0.5 else "F"
        return name

    generation = [person(0) for _ in range(spec.persons_per_generation)]
    for g in range(spec.generations):
        males = [p for p in generation if gender[p] == "M"]
        females = [p for p in generation if gender[p] == "F"]
        males = [males[i] for i in rng.permutation(len(males))]
        females = [females[i] for i in rng.permutation(len(females))]
        couples = []
        single_males, single_females = [], []
        for i in range(max(len(males), len(females))):
            m = males[i] if i < len(males) else None
            f = females[i] if i < len(females) else None
            if m and f and rng.random() < spec.marriage_prob:
                couples.append((m, f))
            else:
                single_males += [m] if m else []
                single_females += [f] if f else []
        # a remarried wife gives her first husband's children a step-father
        for m, f in list(couples):
            if single_males and rng.random() < spec.remarriage_prob:
                couples.append((single_males.pop(), f))
        marriages += couples

        if g == spec.generations - 1:
            break
        nxt = []
        for m, f in couples:
            for _ in range(int(rng.integers(spec.min_children, spec.max_children + 1))):
                child = person(g + 1)
                parents[child] = (m, f)
                nxt.append(child)
        while len(nxt) < spec.persons_per_generation:
            nxt.append(person(g + 1))
        generation = nxt

    facts = derive_family_relations(parents, marriages, gender)
    if not facts:
        raise ValidationError("generated kinship KB has no facts; raise marriage_prob or size")
    logger.info("generated kinship KB: %d persons, %d marriages, %d facts", len(gender),
                len(marriages), len(facts))
    return family_schema(), facts, KinshipOracle(facts)


def question_text(path: Sequence[str], seed: str) -> str:
    """``what is the r2 of the r1 of SEED`` for the chain ``SEED.r1().r2()``."""
    words = "what is"
    for relation in reversed(path):
        words += f" the {relation} of"
    return f"{words} {seed}"


def relation_examples(oracle: KinshipOracle, relation: str) -> List[Example]:
    """One example per person with a nonempty ``relation`` answer."""
    out = []
    for x in oracle.persons:
        targets = oracle.chain(x, [relation])
        if targets:
            out.append(Example(x, tuple(sorted(targets)), question_text([relation], x)))
    return out


def chain_examples(oracle: KinshipOracle, hops: int, count: int, rng: np.random.Generator,
                   relations: Sequence[str] = FAMILY_RELATIONS) -> List[Example]:
    """Random ``hops``-step chain questions with nonempty answers, no duplicates."""
    persons = oracle.persons
    seen: Set[Tuple[str, Tuple[str, ...]]] = set()
    out: List[Example] = []
    for _ in range(count * 50):
        if len(out) >= count:
            break
        seed = persons[rng.integers(len(persons))]
        path = tuple(relations[i] for i in rng.integers(len(relations), size=hops))
        if (seed, path) in seen:
            continue
        seen.add((seed, path))
        targets = oracle.chain(seed, path)
        if targets:
            out.append(Example(seed, tuple(sorted(targets)), question_text(path, seed)))
    return out


def qa_examples(oracle: KinshipOracle, count: int, rng: np.random.Generator,
                max_hops: int = 2) -> List[Example]:
    """A mix of 1..max_hops chain questions, roughly equal per length."""
    per = max(1, count // max_hops)
    out: List[Example] = []
    for hops in range(1, max_hops + 1):
        out += chain_examples(oracle, hops, per, rng)
    return [out[i] for i in rng.permutation(len(out))]


def split_examples(examples: Sequence[Example], rng: np.random.Generator,
                   holdout: float = 0.2) -> Tuple[List[Example], List[Example]]:
    order = rng.permutation(len(examples))
    cut = int(round(len(examples) * (1.0 - holdout)))
    return [examples[i] for i in order[:cut]], [examples[i] for i in order[cut:]]


def write_kinship_bundle(directory: str, spec: KinshipSpec,
                         examples_per_set: int = 400) -> Dict[str, str]:
    """Schema, facts, closure-rule README and training sets for one generated KB."""
    schema, facts, oracle = generate_kinship(spec)
    os.makedirs(directory, exist_ok=True)
    paths = {name: os.path.join(directory, name) for name in (
        "schema.txt", "facts.tsv", "README.md", "father.tsv", "qa.tsv")}
    kb_io.write_schema(paths["schema.txt"], schema)
    kb_io.write_facts(paths["facts.tsv"], facts)
    with open(paths["README.md"], "w", encoding="utf-8", newline="\n") as f:
        f.write(KINSHIP_RULES)
        f.write(f"\nGenerated with seed {spec.seed}: {spec.generations} generations, "
                f"{spec.persons_per_generation} persons per generation, "
                f"{len(facts)} facts.\n")
    rng = np.random.default_rng(spec.seed)
    kb_io.write_dataset(paths["father.tsv"], relation_examples(oracle, "father"))
    kb_io.write_dataset(paths["qa.tsv"], qa_examples(oracle, examples_per_set, rng))
    for hops in range(1, 5):
        name = f"chains_{hops}.tsv"
        paths[name] = os.path.join(directory, name)
        kb_io.write_dataset(paths[name], chain_examples(oracle, hops, examples_per_set, rng))
    return paths


# ---------------------------------------------------------------- student / grade tables

@dataclass(frozen=True)
class StudentRow:
    id: str
    program: str
    expected_degree: str


@dataclass(frozen=True)
class GradeRow:
    student_id: str
    course_id: str
    letter_grade: str


LETTER_GRADES = ("A", "B", "C", "D", "F")
DEGREES = ("BS", "MS", "PhD")

JOIN_EMULATION_QUERY = """\
c_records = one('C', letter_grade_t).grade_record_letter_grade(-1)
records_of_students_with_Cs = c_records.grade_record_student_id().student_record_id(-1)
records_of_phds = one('PhD', degree_t).student_record_expected_degree(-1)
result = (records_of_students_with_Cs & records_of_phds).student_record_id()
result
"""


def join_emulation_query() -> str:
    return JOIN_EMULATION_QUERY


def student_grade_tables(seed: int = 0, n_students: int = 12,
                         n_courses: int = 5) -> Tuple[List[StudentRow], List[GradeRow]]:
    """Random tables plus two pinned students: a PhD without a C and an MS with one."""
    rng = np.random.default_rng(seed)
    programs = ("cs", "math", "stats")
    students = [StudentRow(f"sid_{i:03d}", programs[rng.integers(len(programs))],
                           DEGREES[rng.integers(len(DEGREES))]) for i in range(n_students)]
    students += [StudentRow("sid_phd_no_c", "cs", "PhD"), StudentRow("sid_ms_with_c", "math", "MS")]
    grades = []
    for s in students[:n_students]:
        for course in sorted(rng.choice(n_courses, size=rng.integers(1, n_courses + 1),
                                        replace=False)):
            grades.append(GradeRow(s.id, f"course_{course}",
                                   LETTER_GRADES[rng.integers(len(LETTER_GRADES))]))
    grades += [GradeRow("sid_phd_no_c", "course_0", "A"), GradeRow("sid_phd_no_c", "course_1", "B"),
               GradeRow("sid_ms_with_c", "course_0", "C")]
    return students, grades


def join_oracle(students: Sequence[StudentRow], grades: Sequence[GradeRow]) -> Set[str]:
    """``SELECT student.id FROM student, grade WHERE ...`` by nested loops."""
    out = set()
    for s in students:
        for g in grades:
            if s.id == g.student_id and s.expected_degree == "PhD" and g.letter_grade == "C":
                out.add(s.id)
    return out


def student_grade_facts(students: Sequence[StudentRow],
                        grades: Sequence[GradeRow]) -> Tuple[SchemaSpec, List[FactTriple]]:
    """One record entity per table row, with an index relation per column."""
    schema = SchemaSpec(
        types=[TypeSpec("student_record_t"), TypeSpec("grade_record_t"),
               TypeSpec("student_id_t"), TypeSpec("program_t"), TypeSpec("course_t"),
               TypeSpec("letter_grade_t", list(LETTER_GRADES)),
               TypeSpec("degree_t", list(DEGREES))],
        relations=[
            RelationSpec("student_record_id", "student_record_t", "student_id_t"),
            RelationSpec("student_record_program", "student_record_t", "program_t"),
            RelationSpec("student_record_expected_degree", "student_record_t", "degree_t"),
            RelationSpec("grade_record_student_id", "grade_record_t", "student_id_t"),
            RelationSpec("grade_record_course_id", "grade_record_t", "course_t"),
            RelationSpec("grade_record_letter_grade", "grade_record_t", "letter_grade_t"),
        ])
    facts = []
    for i, s in enumerate(students):
        record = f"student_record_{i}"
        facts += [FactTriple("student_record_id", record, s.id),
                  FactTriple("student_record_program", record, s.program),
                  FactTriple("student_record_expected_degree", record, s.expected_degree)]
    for i, g in enumerate(grades):
        record = f"grade_record_{i}"
        facts += [FactTriple("grade_record_student_id", record, g.student_id),
                  FactTriple("grade_record_course_id", record, g.course_id),
                  FactTriple("grade_record_letter_grade", record, g.letter_grade)]
    return schema, facts


def student_grade_fixture(seed: int = 0) -> Tuple[SchemaSpec, List[FactTriple]]:
    return student_grade_facts(*student_grade_tables(seed))


# ---------------------------------------------------------------- random KBs

_AWKWARD_SUFFIXES = ("", " it's", "\tcol", "\nline", "back\\slash", ' "dq"', "\r\n\\n")


def random_schema_and_facts(rng: np.random.Generator, max_entities: int = 50,
                            max_relations: int = 6, density: float = 0.3,
                            max_types: int = 3, awkward_names: bool = False
                            ) -> Tuple[SchemaSpec, List[FactTriple]]:
    """A small random typed KB with weighted facts and one relation group.

    With ``awkward_names`` entity names carry quotes, backslashes, tabs and
    newlines.
    """
    suffixes = _AWKWARD_SUFFIXES if awkward_names else ("",)
    n_types = int(rng.integers(1, max_types + 1))
    types = []
    for t in range(n_types):
        n = int(rng.integers(1, max_entities + 1))
        names = [f"t{t}_e{i}{suffixes[i % len(suffixes)]}" for i in range(n)]
        types.append(TypeSpec(f"t{t}_t", names))
    relations, facts = [], []
    n_rel = int(rng.integers(1, max_relations + 1))
    for r in range(n_rel):
        dom, rng_t = types[rng.integers(n_types)], types[rng.integers(n_types)]
        name = f"r{r}"
        relations.append(RelationSpec(name, dom.name, rng_t.name))
        mask = rng.random((len(dom.entities), len(rng_t.entities))) < rng.uniform(0, density)
        for i, j in zip(*np.nonzero(mask)):
            weight = float(np.round(rng.uniform(0.1, 2.0), 3))
            facts.append(FactTriple(name, dom.entities[i], rng_t.entities[j], weight))
    by_signature: Dict[Tuple[str, str], List[str]] = defaultdict(list)
    for rel in relations:
        by_signature[rel.domain_type, rel.range_type].append(rel.name)
    members = max(by_signature.values(), key=len)
    return SchemaSpec(types, relations, [GroupSpec("g_t", members)]), facts


def generate_random_kb(n_entities: int, n_tuples: int, n_relations: int = 12,
                       seed: int = 0, type_name: str = "node_t") -> KnowledgeBase:
    """A single-type KB of the requested size built straight into sparse matrices."""
    if n_entities < 0 or n_tuples < 0 or n_relations < 1:
        raise ValidationError("entity and tuple counts must be >= 0 and relations >= 1")
    rng = np.random.default_rng(seed)
    names = [f"n{i}" for i in range(n_entities)]
    decl = TypeDecl.create(type_name, names)
    per_relation = np.full(n_relations, n_tuples // n_relations)
    per_relation[: n_tuples % n_relations] += 1
    relations = {}
    for r, count in enumerate(per_relation):
        if n_entities == 0:
            count = 0
        rows = rng.integers(max(n_entities, 1), size=count)
        cols = rng.integers(max(n_entities, 1), size=count)
        matrix = sl.SparseMatrix.from_triples(rows, cols, np.ones(count),
                                              (n_entities, n_entities))
        relations[f"r{r}"] = RelationDecl(f"r{r}", type_name, type_name, matrix)
    kb = KnowledgeBase({type_name: decl}, relations)
    return kb.with_groups(make_group(kb, "rel_t", sorted(relations, key=lambda n: int(n[1:]))))
