import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import graph, kb_core, query
from .exceptions import UnknownNameError, ValidationError
from .graph import Expr, Parameter
from .kb_core import KnowledgeBase, RelationGroup

logger = logging.getLogger(__name__)

FOLLOW_STRATEGIES = ("sum", "stacked")


def _inverse_softplus(w: np.ndarray) -> np.ndarray:
    w = np.maximum(w, 1e-6)
    return w + np.log(-np.expm1(-w))


class Context:
    """Session object over a KnowledgeBase: set constructors, queries and config."""

    def __init__(
        self,
        kb: KnowledgeBase,
        follow_strategy: str = "sum",
        strict: bool = True,
        debug: bool = False,
        trainable_relations: Iterable[str] = ()
    ):
        if kb is None:
            raise ValueError("A knowledge base is required")
        if follow_strategy not in FOLLOW_STRATEGIES:
            raise ValidationError(f"follow_strategy must be one of {FOLLOW_STRATEGIES}, "
                                  f"got {follow_strategy!r}")

        self.kb = kb
        self.follow_strategy = follow_strategy
        self.strict = strict
        self.debug = debug
        self._relation_params: Dict[str, Parameter] = {}
        for name in trainable_relations:
            self.make_trainable(name)
        self._apply_debug()

    def _apply_debug(self) -> None:
        if self.debug:
            logging.getLogger("neuralquery").setLevel(logging.DEBUG)

    # -- set constructors --

    def one(self, entity_name: str, type_name: str) -> Expr:
        return kb_core.one(self.kb, entity_name, type_name, strict=self.strict, context=self)

    def one_hot_batch(self, entity_names: Sequence[str], type_name: str) -> Expr:
        return kb_core.one_hot_batch(self.kb, entity_names, type_name, strict=self.strict,
                                     context=self)

    def none(self, type_name: str) -> Expr:
        return kb_core.none(self.kb, type_name, context=self)

    def all(self, type_name: str) -> Expr:
        return kb_core.all(self.kb, type_name, context=self)

    def as_nql(self, raw, type_name: str) -> Expr:
        """Wrap a tensor (node, Parameter or array) as a multiset of ``type_name``."""
        return graph.as_expr(self.kb, raw, type_name, context=self)

    def target_mask(self, targets: Sequence[Iterable[str]], type_name: str) -> np.ndarray:
        return kb_core.target_mask(self.kb, targets, type_name, strict=self.strict)

    # -- relation groups --

    def make_group(self, group_name: str, member_relation_names: Sequence[str]) -> RelationGroup:
        group = kb_core.make_group(self.kb, group_name, member_relation_names)
        self.kb = self.kb.with_groups(group)
        logger.debug("registered group %s with %d members", group_name, group.k)
        return group

    def group(self, group_name: str) -> RelationGroup:
        try:
            return self.kb.groups[group_name]
        except KeyError:
            raise UnknownNameError("group", group_name) from None

    # -- queries --

    def query(self, text: str) -> Expr:
        return query.compile_query(text, self)

    def evaluate(self, expr: Expr) -> np.ndarray:
        return graph.forward(expr)

    def decode(self, batch, type_name: str, top_k: Optional[int] = None,
               min_weight: Optional[float] = None) -> List[List[Tuple[str, float]]]:
        return kb_core.decode(self.kb, batch, type_name, top_k=top_k, min_weight=min_weight)

    # -- trainable relations --

    def make_trainable(self, rel_name: str) -> Parameter:
        """Give ``rel_name`` a softplus weight per stored fact, starting at the KB weights."""
        if rel_name not in self._relation_params:
            rel = self.kb.relation(rel_name)
            self._relation_params[rel_name] = Parameter(
                f"relation/{rel_name}", _inverse_softplus(rel.matrix.data), "softplus")
            logger.debug("relation %s is trainable (%d weights)", rel_name, rel.matrix.nnz)
        return self._relation_params[rel_name]

    def relation_parameter(self, rel_name: str) -> Parameter:
        try:
            return self._relation_params[rel_name]
        except KeyError:
            raise UnknownNameError("trainable relation", rel_name) from None

    def relation_weights(self, rel_name: str) -> Optional[Expr]:
        param = self._relation_params.get(rel_name)
        return param.view() if param is not None else None

    def trainable_parameters(self) -> List[Parameter]:
        return list(self._relation_params.values())

    # -- config --

    def get_config(self) -> Dict[str, Any]:
        return {
            "follow_strategy": self.follow_strategy,
            "strict": self.strict,
            "debug": self.debug,
            "trainable_relations": sorted(self._relation_params),
            "types": len(self.kb.types),
            "relations": len(self.kb.relations),
            "groups": sorted(self.kb.groups),
        }

    def update_config(self, **kwargs):
        if "follow_strategy" in kwargs:
            if kwargs["follow_strategy"] not in FOLLOW_STRATEGIES:
                raise ValidationError(f"follow_strategy must be one of {FOLLOW_STRATEGIES}")
            self.follow_strategy = kwargs["follow_strategy"]
        if "strict" in kwargs: self.strict = bool(kwargs["strict"])  # noqa: E701
        if "debug" in kwargs: self.debug = bool(kwargs["debug"])  # noqa: E701
        for name in kwargs.get("trainable_relations", ()):
            self.make_trainable(name)
        self._apply_debug()

    def __repr__(self) -> str:
        return (f"Context({len(self.kb.types)} types, {len(self.kb.relations)} relations, "
                f"{self.kb.n_tuples} tuples)")
