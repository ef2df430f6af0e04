"""
User-facing query algebra and the textual query language.

The operator functions (``rel_call``, ``follow``, ``union``, ``intersect``,
``if_any``, ``gate``) type-check their operands against the knowledge base
and emit graph nodes. The text front end is a hand-written lexer and
recursive-descent parser producing a small AST, a canonical printer, and a
binder that turns an AST into graph expressions.

Grammar::

    program := (IDENT '=' expr (';' | NEWLINE))* expr
    expr    := and_expr ('|' and_expr)*
    and_expr:= term ('&' term)*
    term    := atom trailer* ('*' NUMBER)?
    atom    := 'one(' STRING ',' IDENT ')' | 'all(' IDENT ')' | 'none(' IDENT ')'
             | '(' expr ')' | IDENT
    trailer := '.' IDENT '(' '-1'? ')'
             | '.follow(' (STRING | expr) (',' '-1')? ')'
             | '.if_any(' expr ')'

``&`` binds tighter than ``|``; both are left-associative. Inside strings a
backslash escapes the next character; ``\\n``, ``\\t`` and ``\\r`` stand for
control characters.
"""

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union as AnyOf

import numpy as np

from . import graph, kb_core
from .exceptions import (BindError, NQLError, NQLTypeError, QueryParseError, ShapeError,
                         UnknownNameError)
from .graph import Expr

logger = logging.getLogger(__name__)

Span = Optional[Tuple[int, int]]


# ---------------------------------------------------------------- operators

def rel_call(s: Expr, rel_name: str, inverse: bool = False) -> Expr:
    """``s.rel()`` is ``s M``; ``s.rel(-1)`` is ``s M^T``."""
    kb = _kb_of(s)
    rel = kb.relation(rel_name)
    expected = rel.range_type if inverse else rel.domain_type
    if s.type_name != expected:
        call = f"{rel_name}({'-1' if inverse else ''})"
        raise NQLTypeError(f"{call} expects a set of type {expected!r}, got {s.type_name!r}",
                           expected=expected, actual=s.type_name)
    result_type = rel.domain_type if inverse else rel.range_type
    weights = s.context.relation_weights(rel_name) if s.context is not None else None
    return graph.relation(s, rel.matrix, inverse, result_type, rel_name, weights)


def follow(s: Expr, r: AnyOf[str, Expr], inverse: bool = False) -> Expr:
    """Follow a weighted mixture of the relations of a group: ``s (sum_i r[i] M_i)``."""
    if isinstance(r, str):
        return rel_call(s, r, inverse)
    if not isinstance(r, Expr):
        raise NQLTypeError(f"follow() takes a relation name or a group-typed set, got "
                           f"{type(r).__name__}")
    group = None
    for kb in (r.kb, s.kb):
        if kb is not None and group is None:
            group = kb.group_for_type(r.type_name)
    if group is None:
        raise NQLTypeError(f"follow() needs a set over a relation group, got type "
                           f"{r.type_name!r}", actual=r.type_name)
    expected = group.range_type if inverse else group.domain_type
    if s.type_name != expected:
        raise NQLTypeError(f"group {group.name!r} expects a set of type {expected!r}, got "
                           f"{s.type_name!r}", expected=expected, actual=s.type_name)
    if r.width != group.k:
        raise ShapeError(f"relation set has width {r.width}, group {group.name!r} has "
                         f"{group.k} members", r.shape, (r.batch_size, group.k))
    result_type = group.domain_type if inverse else group.range_type
    context = s.context if s.context is not None else r.context
    strategy = context.follow_strategy if context is not None else "sum"
    weights = [context.relation_weights(m) for m in group.members] if context is not None \
        else None
    return graph.follow(s, r, group, inverse, result_type, strategy, weights)


def union(s: Expr, t: Expr) -> Expr:
    return graph.add(s, t)


def intersect(s: Expr, t: Expr) -> Expr:
    return graph.hadamard(s, t)


def if_any(s: Expr, t: Expr) -> Expr:
    """``s`` scaled by the total weight of ``t``; ``t`` may be of any type."""
    return graph.if_any(s, t)


def gate(s: Expr, a) -> Expr:
    """``s * a`` for a number or a width-1 graph scalar."""
    if isinstance(a, (int, float, np.floating, np.integer)) and not isinstance(a, bool):
        return graph.scale(s, float(a))
    if isinstance(a, Expr):
        if a.width != 1:
            raise ShapeError("gate needs a width-1 scalar; use '&' to intersect sets",
                             s.shape, a.shape)
        return graph.gate(s, a)
    raise NQLTypeError(f"cannot gate a set by {type(a).__name__}")


def _kb_of(s: Expr):
    if s.kb is None:
        raise NQLTypeError("expression is not attached to a knowledge base")
    return s.kb


# ---------------------------------------------------------------- AST

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class One(Node):
    entity: str
    type_name: str
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class NoneSet(Node):
    type_name: str
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class AllSet(Node):
    type_name: str
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class Var(Node):
    name: str
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class RelCall(Node):
    child: Node
    name: str
    inverse: bool = False
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class Follow(Node):
    child: Node
    target: AnyOf[str, Node]
    inverse: bool = False
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class Union(Node):
    left: Node
    right: Node
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class Intersect(Node):
    left: Node
    right: Node
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class IfAny(Node):
    child: Node
    cond: Node
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class Scale(Node):
    child: Node
    factor: float
    span: Span = field(default=None, compare=False)


@dataclass(frozen=True)
class Program(Node):
    bindings: Tuple[Tuple[str, Node], ...]
    result: Node
    span: Span = field(default=None, compare=False)


# ---------------------------------------------------------------- lexer

@dataclass(frozen=True)
class Token:
    kind: str
    value: str
    offset: int
    line: int
    column: int


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<string>'(?:[^'\\\n]|\\.)*'|"(?:[^"\\\n]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[.(),|&*=;])
""", re.VERBOSE)

_DESCRIBE = {"string": "string", "number": "number", "ident": "identifier",
             "newline": "newline", "eof": "end of input"}


_CONTROL_ESCAPES = {"n": "\n", "t": "\t", "r": "\r"}
_QUOTE_ESCAPES = {"\\": "\\\\", "'": "\\'", **{v: "\\" + k for k, v in _CONTROL_ESCAPES.items()}}


def _unescape(literal: str) -> str:
    return re.sub(r"\\(.)", lambda m: _CONTROL_ESCAPES.get(m.group(1), m.group(1)),
                  literal[1:-1], flags=re.DOTALL)


def _quote(value: str) -> str:
    return "'" + "".join(_QUOTE_ESCAPES.get(c, c) for c in value) + "'"


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    line, line_start, depth, pos = 1, 0, 0, 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        column = pos - line_start + 1
        if match is None:
            raise QueryParseError(f"unexpected character {text[pos]!r}", text, pos, line, column)
        kind, value = match.lastgroup, match.group()
        if kind == "newline":
            # newlines separate statements only at top level
            if depth == 0:
                tokens.append(Token("newline", value, pos, line, column))
            line, line_start = line + 1, match.end()
        elif kind == "punct":
            depth += {"(": 1, ")": -1}.get(value, 0)
            tokens.append(Token(value, value, pos, line, column))
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, value, pos, line, column))
        pos = match.end()
    tokens.append(Token("eof", "", len(text), line, len(text) - line_start + 1))
    return tokens


# ---------------------------------------------------------------- parser

class Parser:
    """Recursive-descent parser with expected-token diagnostics."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, ahead: int = 1) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def error(self, expected: Sequence[str], token: Optional[Token] = None) -> QueryParseError:
        token = token or self.current
        found = _DESCRIBE.get(token.kind, repr(token.value)) if token.kind != "eof" else \
            "end of input"
        if token.kind in ("ident", "number", "string"):
            found = f"{_DESCRIBE[token.kind]} {token.value}"
        return QueryParseError(f"unexpected {found}", self.text, token.offset, token.line,
                               token.column, expected)

    def accept(self, kind: str, value: Optional[str] = None) -> Optional[Token]:
        tok = self.current
        if tok.kind == kind and (value is None or tok.value == value):
            self.pos += 1
            return tok
        return None

    def expect(self, kind: str, value: Optional[str] = None) -> Token:
        tok = self.accept(kind, value)
        if tok is None:
            raise self.error([repr(value) if value else _DESCRIBE.get(kind, repr(kind))])
        return tok

    def skip_separators(self) -> None:
        while self.accept("newline") or self.accept(";"):
            pass

    def parse(self) -> Node:
        bindings: List[Tuple[str, Node]] = []
        self.skip_separators()
        while self.current.kind == "ident" and self.peek().kind == "=":
            name = self.expect("ident").value
            self.expect("=")
            bindings.append((name, self.expr()))
            if not (self.current.kind in ("newline", ";")):
                raise self.error(["';'", "newline"])
            self.skip_separators()
        result = self.expr()
        self.skip_separators()
        if self.current.kind != "eof":
            raise self.error(["'|'", "'&'", "'.'", "'*'", "end of input"])
        if bindings:
            return Program(tuple(bindings), result, span=(0, len(self.text)))
        return result

    def expr(self) -> Node:
        node = self.and_expr()
        while self.accept("|"):
            right = self.and_expr()
            node = Union(node, right, span=(node.span[0], right.span[1]))
        return node

    def and_expr(self) -> Node:
        node = self.term()
        while self.accept("&"):
            right = self.term()
            node = Intersect(node, right, span=(node.span[0], right.span[1]))
        return node

    def term(self) -> Node:
        node = self.atom()
        while self.current.kind == ".":
            node = self.trailer(node)
        if self.accept("*"):
            tok = self.expect("number")
            node = Scale(node, float(tok.value), span=(node.span[0], tok.offset + len(tok.value)))
        return node

    def atom(self) -> Node:
        tok = self.current
        if self.accept("("):
            inner = self.expr()
            close = self.expect(")")
            return _respan(inner, (tok.offset, close.offset + 1))
        if tok.kind == "ident":
            if self.peek().kind != "(":
                self.pos += 1
                return Var(tok.value, span=(tok.offset, tok.offset + len(tok.value)))
            if tok.value not in ("one", "all", "none"):
                raise self.error(["'one('", "'all('", "'none('", "variable"])
            self.pos += 2
            if tok.value == "one":
                entity = _unescape(self.expect("string").value)
                self.expect(",")
                type_name = self.type_name()
                close = self.expect(")")
                return One(entity, type_name, span=(tok.offset, close.offset + 1))
            type_name = self.type_name()
            close = self.expect(")")
            cls = AllSet if tok.value == "all" else NoneSet
            return cls(type_name, span=(tok.offset, close.offset + 1))
        raise self.error(["'one('", "'all('", "'none('", "'('", "variable"])

    def type_name(self) -> str:
        tok = self.accept("ident") or self.accept("string")
        if tok is None:
            raise self.error(["type name"])
        return tok.value if tok.kind == "ident" else _unescape(tok.value)

    def inverse_flag(self) -> bool:
        tok = self.accept("number")
        if tok is None:
            return False
        if float(tok.value) != -1.0:
            raise self.error(["'-1'"], tok)
        return True

    def trailer(self, child: Node) -> Node:
        self.expect(".")
        name = self.expect("ident").value
        self.expect("(")
        if name == "follow":
            if self.current.kind == "string":
                target: AnyOf[str, Node] = _unescape(self.expect("string").value)
            else:
                target = self.expr()
            inverse = False
            if self.accept(","):
                inverse = self.inverse_flag()
                if not inverse:
                    raise self.error(["'-1'"])
            close = self.expect(")")
            return Follow(child, target, inverse, span=(child.span[0], close.offset + 1))
        if name == "if_any":
            cond = self.expr()
            close = self.expect(")")
            return IfAny(child, cond, span=(child.span[0], close.offset + 1))
        inverse = self.inverse_flag()
        close = self.expect(")")
        return RelCall(child, name, inverse, span=(child.span[0], close.offset + 1))


def _respan(node: Node, span: Tuple[int, int]) -> Node:
    return replace(node, span=span)


def parse(query_text: str) -> Node:
    return Parser(query_text).parse()


# ---------------------------------------------------------------- printer

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _level(node: Node) -> int:
    if isinstance(node, Union):
        return 1
    if isinstance(node, Intersect):
        return 2
    if isinstance(node, Scale):
        return 3
    return 4


def _wrap(node: Node, minimum: int) -> str:
    text = pretty(node)
    return text if _level(node) >= minimum else f"({text})"


def _type_text(type_name: str) -> str:
    return type_name if _IDENT_RE.match(type_name) else _quote(type_name)


def pretty(node: Node) -> str:
    """Canonical text for an AST; ``parse(pretty(a)) == a``."""
    if isinstance(node, Program):
        lines = [f"{name} = {pretty(value)}" for name, value in node.bindings]
        return "\n".join(lines + [pretty(node.result)])
    if isinstance(node, One):
        return f"one({_quote(node.entity)}, {_type_text(node.type_name)})"
    if isinstance(node, AllSet):
        return f"all({_type_text(node.type_name)})"
    if isinstance(node, NoneSet):
        return f"none({_type_text(node.type_name)})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, RelCall):
        return f"{_wrap(node.child, 4)}.{node.name}({'-1' if node.inverse else ''})"
    if isinstance(node, Follow):
        target = _quote(node.target) if isinstance(node.target, str) else pretty(node.target)
        return f"{_wrap(node.child, 4)}.follow({target}{', -1' if node.inverse else ''})"
    if isinstance(node, IfAny):
        return f"{_wrap(node.child, 4)}.if_any({pretty(node.cond)})"
    if isinstance(node, Scale):
        return f"{_wrap(node.child, 4)} * {node.factor!r}"
    if isinstance(node, Intersect):
        return f"{_wrap(node.left, 2)} & {_wrap(node.right, 3)}"
    if isinstance(node, Union):
        return f"{_wrap(node.left, 1)} | {_wrap(node.right, 2)}"
    raise TypeError(f"not a query node: {node!r}")


# ---------------------------------------------------------------- binder

def bind(ast: Node, target, text: Optional[str] = None,
         env: Optional[Dict[str, Expr]] = None) -> Expr:
    """Turn an AST into a graph expression over a KnowledgeBase or Context."""
    if isinstance(target, kb_core.KnowledgeBase):
        kb, context = target, None
    else:
        kb, context = target.kb, target
    env = dict(env or {})
    if isinstance(ast, Program):
        for name, value in ast.bindings:
            env[name] = _bind(value, kb, context, env, text)
        return _bind(ast.result, kb, context, env, text)
    return _bind(ast, kb, context, env, text)


def _bind(node: Node, kb, context, env: Dict[str, Expr], text: Optional[str]) -> Expr:
    try:
        return _bind_node(node, kb, context, env, text)
    except BindError:
        raise
    except NQLError as exc:
        raise BindError(str(exc), node.span, text) from exc


def _bind_node(node: Node, kb, context, env, text) -> Expr:
    strict = context.strict if context is not None else True
    if isinstance(node, One):
        return kb_core.one(kb, node.entity, node.type_name, strict=strict, context=context)
    if isinstance(node, AllSet):
        return kb_core.all(kb, node.type_name, context=context)
    if isinstance(node, NoneSet):
        return kb_core.none(kb, node.type_name, context=context)
    if isinstance(node, Var):
        if node.name not in env:
            raise UnknownNameError("variable", node.name)
        return env[node.name]
    if isinstance(node, RelCall):
        return rel_call(_bind(node.child, kb, context, env, text), node.name, node.inverse)
    if isinstance(node, Follow):
        child = _bind(node.child, kb, context, env, text)
        target = node.target if isinstance(node.target, str) else \
            _bind(node.target, kb, context, env, text)
        return follow(child, target, node.inverse)
    if isinstance(node, IfAny):
        return if_any(_bind(node.child, kb, context, env, text),
                      _bind(node.cond, kb, context, env, text))
    if isinstance(node, Scale):
        return gate(_bind(node.child, kb, context, env, text), node.factor)
    if isinstance(node, Union):
        return union(_bind(node.left, kb, context, env, text),
                     _bind(node.right, kb, context, env, text))
    if isinstance(node, Intersect):
        return intersect(_bind(node.left, kb, context, env, text),
                         _bind(node.right, kb, context, env, text))
    raise TypeError(f"not a query node: {node!r}")


def compile_query(query_text: str, target) -> Expr:
    """Parse and bind in one step."""
    return bind(parse(query_text), target, text=query_text)


# ---------------------------------------------------------------- generator

def random_query(rng: np.random.Generator, kb, depth: int,
                 type_name: Optional[str] = None) -> Node:
    """A random well-typed query of at most ``depth`` nested operators."""
    types = sorted(kb.types)
    if type_name is None:
        type_name = types[rng.integers(len(types))]
    return _random_node(rng, kb, depth, type_name)


def _random_leaf(rng, kb, type_name: str) -> Node:
    decl = kb.type(type_name)
    roll = rng.random()
    if roll < 0.1 or decl.cardinality == 0:
        return NoneSet(type_name) if roll < 0.05 else AllSet(type_name)
    return One(decl.names[rng.integers(decl.cardinality)], type_name)


def _random_node(rng, kb, depth: int, type_name: str) -> Node:
    if depth <= 0:
        return _random_leaf(rng, kb, type_name)
    into = [r for r in kb.relations.values() if r.range_type == type_name]
    out_of = [r for r in kb.relations.values() if r.domain_type == type_name]
    groups = [g for g in kb.groups.values() if g.range_type == type_name]
    choices = ["union", "intersect", "if_any", "scale"]
    if into or out_of:
        choices += ["rel", "rel", "follow_name"]
    if groups:
        choices += ["follow_group"]
    kind = choices[rng.integers(len(choices))]
    sub = depth - 1
    if kind == "union":
        return Union(_random_node(rng, kb, sub, type_name), _random_node(rng, kb, sub, type_name))
    if kind == "intersect":
        return Intersect(_random_node(rng, kb, sub, type_name),
                         _random_node(rng, kb, sub, type_name))
    if kind == "if_any":
        other = sorted(kb.types)[rng.integers(len(kb.types))]
        return IfAny(_random_node(rng, kb, sub, type_name), _random_node(rng, kb, sub, other))
    if kind == "scale":
        factor = float(np.round(rng.uniform(0.1, 2.0), 3))
        return Scale(_random_node(rng, kb, sub, type_name), factor)
    if kind == "follow_group":
        group = groups[rng.integers(len(groups))]
        picks = rng.choice(group.k, size=min(group.k, 1 + rng.integers(2)), replace=False)
        target: Node = One(group.members[picks[0]], group.name)
        for p in picks[1:]:
            target = Union(target, One(group.members[p], group.name))
        return Follow(_random_node(rng, kb, sub, group.domain_type), target)
    options = [(r, False) for r in into] + [(r, True) for r in out_of]
    rel, inverse = options[rng.integers(len(options))]
    source = rel.range_type if inverse else rel.domain_type
    child = _random_node(rng, kb, sub, source)
    if kind == "follow_name":
        return Follow(child, rel.name, inverse)
    return RelCall(child, rel.name, inverse)


def iter_queries(rng: np.random.Generator, kb, count: int, depth: int) -> Iterator[Node]:
    for _ in range(count):
        yield random_query(rng, kb, int(rng.integers(depth + 1)))
