"""
Line-oriented file formats and parameter checkpoints.

Schema files::

    # comment
    type person_t
    type grade_t = A,B,C
    type word_t oov
    rel father person_t person_t
    group rel_t = father,mother

Facts files are ``relation<TAB>subject<TAB>object[<TAB>weight]``; dataset
files are ``question<TAB>seed<TAB>target1,target2,...``. All are UTF-8 with
``#`` comments and blank lines ignored.
"""

import hashlib
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import CheckpointError, FormatError
from .graph import Parameter
from .models import (SCHEMA_VERSION, Example, FactTriple, GroupSpec, RelationSpec, SchemaSpec,
                     TypeSpec)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "__meta__"

PathLike = Union[str, "os.PathLike[str]"]


def _content_lines(lines: Iterable[str]) -> Iterator[Tuple[int, str]]:
    for number, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield number, line


# ---------------------------------------------------------------- schema

def parse_schema(text: str, path: Optional[str] = None) -> SchemaSpec:
    schema = SchemaSpec()
    seen: Dict[Tuple[str, str], int] = {}

    def declare(kind: str, name: str, number: int, column: int) -> None:
        if (kind, name) in seen:
            raise FormatError(f"{kind} {name!r} already declared on line {seen[kind, name]}",
                              path, number, column)
        seen[kind, name] = number

    for number, line in _content_lines(text.splitlines()):
        head, _, rest = line.strip().partition(" ")
        column = line.index(head) + 1
        if head == "type":
            decl, eq, listing = rest.partition("=")
            words = decl.split()
            if not words or len(words) > 2 or (len(words) == 2 and words[1] != "oov"):
                raise FormatError("expected 'type <name> [oov] [= e1,e2,...]'", path, number,
                                  column)
            entities = None
            if eq:
                entities = [e.strip() for e in listing.split(",") if e.strip()]
            declare("type", words[0], number, column)
            schema.types.append(TypeSpec(words[0], entities, oov=len(words) == 2))
        elif head == "rel":
            words = rest.split()
            if len(words) != 3:
                raise FormatError("expected 'rel <name> <domain> <range>'", path, number, column)
            declare("relation", words[0], number, column)
            schema.relations.append(RelationSpec(*words))
        elif head == "group":
            name, eq, listing = rest.partition("=")
            members = [m.strip() for m in listing.split(",") if m.strip()]
            if not eq or not name.strip() or len(name.split()) != 1 or not members:
                raise FormatError("expected 'group <name> = <rel1>,<rel2>,...'", path, number,
                                  column)
            declare("group", name.strip(), number, column)
            schema.groups.append(GroupSpec(name.strip(), members))
        else:
            raise FormatError(f"unknown declaration {head!r}; expected type, rel or group",
                              path, number, column)

    # forward references are fine, dangling ones are not
    type_names = set(schema.type_names())
    relation_names = set(schema.relation_names())
    for rel in schema.relations:
        for t in (rel.domain_type, rel.range_type):
            if t not in type_names:
                raise FormatError(f"relation {rel.name!r} uses undeclared type {t!r}", path,
                                  seen["relation", rel.name])
    for group in schema.groups:
        missing = [m for m in group.members if m not in relation_names]
        if missing:
            raise FormatError(f"group {group.name!r} lists undeclared relations {missing}", path,
                              seen["group", group.name])
    return schema


def load_schema(path: PathLike) -> SchemaSpec:
    with open(path, encoding="utf-8") as f:
        return parse_schema(f.read(), str(path))


def format_schema(schema: SchemaSpec) -> str:
    lines = []
    for t in schema.types:
        line = f"type {t.name}" + (" oov" if t.oov else "")
        if t.entities is not None:
            line += " = " + ",".join(t.entities)
        lines.append(line)
    lines += [f"rel {r.name} {r.domain_type} {r.range_type}" for r in schema.relations]
    lines += [f"group {g.name} = {','.join(g.members)}" for g in schema.groups]
    return "\n".join(lines) + "\n"


def write_schema(path: PathLike, schema: SchemaSpec) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_schema(schema))


# ---------------------------------------------------------------- facts

def parse_fact_line(line: str, number: int, path: Optional[str] = None) -> FactTriple:
    fields = line.split("\t")
    if len(fields) not in (3, 4):
        raise FormatError(f"expected 3 or 4 tab-separated fields, got {len(fields)}", path,
                          number, len(line) + 1)
    for i, value in enumerate(fields[:3]):
        if not value.strip():
            column = sum(len(f) + 1 for f in fields[:i]) + 1
            raise FormatError("empty field", path, number, column)
    weight = 1.0
    if len(fields) == 4:
        column = sum(len(f) + 1 for f in fields[:3]) + 1
        try:
            weight = float(fields[3])
        except ValueError:
            raise FormatError(f"weight {fields[3]!r} is not a number", path, number,
                              column) from None
        if not np.isfinite(weight) or weight < 0:
            raise FormatError(f"weight {weight} must be finite and >= 0", path, number, column)
    return FactTriple(fields[0].strip(), fields[1].strip(), fields[2].strip(), weight,
                      line=number)


def iter_facts(lines: Iterable[str], path: Optional[str] = None) -> Iterator[FactTriple]:
    for number, line in _content_lines(lines):
        yield parse_fact_line(line, number, path)


def load_facts(path: PathLike) -> Iterator[FactTriple]:
    """Stream facts from a TSV file; the file stays open while the iterator is alive."""
    with open(path, encoding="utf-8") as f:
        yield from iter_facts(f, str(path))


def format_fact(fact: FactTriple) -> str:
    parts = [fact.relation, fact.subject, fact.object]
    if fact.weight != 1.0:
        parts.append(repr(float(fact.weight)))
    return "\t".join(parts)


def write_facts(path: PathLike, facts: Iterable[FactTriple]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for fact in facts:
            f.write(format_fact(fact) + "\n")
            count += 1
    logger.debug("wrote %d facts to %s", count, path)
    return count


# ---------------------------------------------------------------- datasets

def iter_dataset(lines: Iterable[str], path: Optional[str] = None) -> Iterator[Example]:
    for number, line in _content_lines(lines):
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"expected question, seed and targets, got {len(fields)} fields",
                              path, number, len(line) + 1)
        targets = tuple(t.strip() for t in fields[2].split(",") if t.strip())
        if not fields[1].strip():
            raise FormatError("empty seed entity", path, number, len(fields[0]) + 2)
        if not targets:
            raise FormatError("empty target list", path, number,
                              len(fields[0]) + len(fields[1]) + 3)
        yield Example(fields[1].strip(), targets, fields[0].strip())


def load_dataset(path: PathLike) -> List[Example]:
    with open(path, encoding="utf-8") as f:
        return list(iter_dataset(f, str(path)))


def write_dataset(path: PathLike, examples: Iterable[Example]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(f"{ex.question}\t{ex.seed}\t{','.join(ex.targets)}\n")
            count += 1
    return count


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """Parameter arrays by name, with their constraint tags and free-form metadata."""

    values: Dict[str, np.ndarray] = field(default_factory=dict)
    constraints: Dict[str, str] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _digest(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()


def save_checkpoint(params: Sequence[Parameter], path: PathLike,
                    metadata: Optional[Dict[str, Any]] = None) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError(f"parameter names are not unique: {names}")
    entries, arrays = [], {}
    for i, p in enumerate(params):
        key = f"p{i}"
        arrays[key] = p.values
        entries.append({"name": p.name, "key": key, "shape": list(p.values.shape),
                        "constraint": p.constraint, "sha256": _digest(p.values)})
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "schema": SCHEMA_VERSION,
            "parameters": entries, "metadata": metadata or {}}
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("saved %d parameters to %s", len(params), path)


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            if _META_KEY not in data.files:
                raise CheckpointError(f"{path}: not a checkpoint (no metadata)")
            meta = json.loads(str(data[_META_KEY]))
            arrays = {key: data[key] for key in data.files if key != _META_KEY}
    except CheckpointError:
        raise
    except (OSError, ValueError, EOFError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from exc

    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version}, expected "
                              f"{CHECKPOINT_FORMAT_VERSION}")
    checkpoint = Checkpoint(metadata=meta.get("metadata", {}))
    for entry in meta["parameters"]:
        name, key = entry["name"], entry["key"]
        if key not in arrays:
            raise CheckpointError(f"{path}: array for parameter {name!r} is missing")
        values = arrays[key]
        if list(values.shape) != entry["shape"] or _digest(values) != entry["sha256"]:
            raise CheckpointError(f"{path}: parameter {name!r} failed its integrity check")
        checkpoint.values[name] = values
        checkpoint.constraints[name] = entry["constraint"]
    return checkpoint


def restore_parameters(params: Sequence[Parameter], checkpoint: Checkpoint) -> None:
    """Copy checkpoint values into ``params`` after checking names, shapes and constraints."""
    for p in params:
        if p.name not in checkpoint.values:
            raise CheckpointError(f"checkpoint has no value for parameter {p.name!r}")
        values = checkpoint.values[p.name]
        if values.shape != p.values.shape:
            raise CheckpointError(f"parameter {p.name!r} has shape {p.values.shape}, "
                                  f"checkpoint has {values.shape}")
        if checkpoint.constraints[p.name] != p.constraint:
            raise CheckpointError(f"parameter {p.name!r} is {p.constraint}-constrained, "
                                  f"checkpoint says {checkpoint.constraints[p.name]}")
    for p in params:
        p.values[...] = checkpoint.values[p.name]
