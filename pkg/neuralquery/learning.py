"""
Trainable models over the query algebra.

``TemplateModel`` learns relation-group weights for a fixed two-branch
chain. ``QAModel`` and ``MultiHopModel`` read the relations (and hop
switches) off a question with a bag-of-words ``QueryEncoder``.
``RecurrentHopModel`` chains up to ``max_hops`` soft relation steps, each
fed the phrase of the question it answers, and mixes the hop results with
stop probabilities.

All models share ``parameters()``, ``predict(examples)`` and ``check(tape)``
so ``train`` and ``evaluate`` work on any of them.
"""

import logging
import re
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import graph
from .context import Context
from .exceptions import DivergenceError, HaltingError, NQLTypeError, ValidationError
from .graph import Expr, Parameter, Tape
from .models import EpochMetrics, Example, LossSpec, OptimizerSpec
from .optim import make_optimizer

logger = logging.getLogger(__name__)

UNK = "<unk>"
LOSS_KINDS = ("target_mass_nll", "binary_cross_entropy")
MODEL_KINDS = ("template", "qa", "multihop", "recurrent")

_WORD_RE = re.compile(r"[a-z0-9_']+")


def _words(question: str, seed: str) -> List[str]:
    text = question.lower()
    if seed:
        text = text.replace(seed.lower(), " ")
    return _WORD_RE.findall(text)


def tokenize(question: str, seed: str = "") -> List[str]:
    """Words of ``question`` with the seed name masked out, plus ``word@p`` tags.

    ``p`` counts from the end of the question, so the word naming the first
    hop keeps its tag however long the chain is.
    """
    words = _words(question, seed)
    n = len(words)
    return words + [f"{w}@{n - i}" for i, w in enumerate(words)]


def hop_tokens(question: str, seed: str, hop: int, phrase_length: int = 3) -> List[str]:
    """The ``word@p`` tags one hop reads: its own phrase and the phrase after it.

    Hop ``h`` skips the ``(h - 1) * phrase_length`` words nearest the end and
    re-counts from there, so every hop sees its relation word under the tag
    the first hop does, and a chain longer than any seen in training produces
    no new tokens.
    """
    words = _words(question, seed)
    n = len(words)
    offset = (hop - 1) * phrase_length
    tags = []
    for i, w in enumerate(words):
        p = n - i - offset
        if 1 <= p <= 2 * phrase_length:
            tags.append(f"{w}@{p}")
    return tags


def all_hop_tokens(question: str, seed: str, max_hops: int, phrase_length: int = 3) -> List[str]:
    return [tok for hop in range(1, max_hops + 1)
            for tok in hop_tokens(question, seed, hop, phrase_length)]


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: List[str] = [UNK]
        self.index: Dict[str, int] = {UNK: 0}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def from_examples(cls, examples: Iterable[Example],
                      tokenizer: Callable[[str, str], List[str]] = tokenize) -> "Vocabulary":
        vocab = cls()
        for ex in examples:
            for tok in tokenizer(ex.question, ex.seed):
                vocab.add(tok)
        return vocab

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def bag_of_words(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        """Row-normalized token counts; unknown tokens go to UNK, empty rows are UNK only."""
        bow = np.zeros((len(token_lists), len(self.tokens)))
        for row, tokens in enumerate(token_lists):
            if not tokens:
                bow[row, 0] = 1.0
                continue
            for tok in tokens:
                bow[row, self.index.get(tok, 0)] += 1.0
            bow[row] /= len(tokens)
        return bow


def _uniform(rng: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class QueryEncoder:
    """Mean-pooled token embeddings feeding named affine heads."""

    def __init__(self, vocab: Vocabulary, dim: int, heads: Mapping[str, int],
                 rng: np.random.Generator):
        if dim <= 0:
            raise ValidationError(f"embedding dimension must be positive, got {dim}")
        self.vocab = vocab
        self.dim = dim
        self.embedding = Parameter("encoder/embedding", _uniform(rng, (len(vocab), dim)))
        self.heads: Dict[str, Tuple[Parameter, Parameter]] = {}
        for name, width in heads.items():
            self.heads[name] = (Parameter(f"encoder/{name}/weight", _uniform(rng, (dim, width))),
                                Parameter(f"encoder/{name}/bias", np.zeros(width)))

    def parameters(self) -> List[Parameter]:
        params = [self.embedding]
        for weight, bias in self.heads.values():
            params += [weight, bias]
        return params

    def encode(self, examples: Sequence[Example]) -> Expr:
        return self.encode_tokens([tokenize(ex.question, ex.seed) for ex in examples])

    def encode_tokens(self, token_lists: Sequence[Sequence[str]]) -> Expr:
        bow = self.vocab.bag_of_words(token_lists)
        return graph.matmul(graph.constant(bow), self.embedding.view())

    def head(self, name: str, pooled: Expr) -> Expr:
        weight, bias = self.heads[name]
        return graph.affine(pooled, weight, bias)


class Model:
    """Shared plumbing: context, relation group and fixed head overrides."""

    kind = ""

    def __init__(self, context: Context, group_name: str):
        self.context = context
        self.group = context.group(group_name)
        self.overrides: Dict[str, np.ndarray] = {}

    @property
    def input_type(self) -> str:
        return self.group.domain_type

    @property
    def output_type(self) -> str:
        return self.group.range_type

    def override(self, name: str, value) -> None:
        """Pin a head's activated output (tests and ablations)."""
        self.overrides[name] = np.array(value, dtype=np.float64, ndmin=2)

    def _pinned(self, name: str) -> Optional[Expr]:
        if name in self.overrides:
            return graph.constant(self.overrides[name])
        return None

    def seeds(self, examples: Sequence[Example]) -> Expr:
        return self.context.one_hot_batch([ex.seed for ex in examples], self.input_type)

    def relation_set(self, values: Expr) -> Expr:
        return self.context.as_nql(values, self.group.name)

    def parameters(self) -> List[Parameter]:
        raise NotImplementedError

    def predict(self, examples: Sequence[Example]) -> Expr:
        raise NotImplementedError

    def check(self, tape: Tape) -> None:
        pass

    def metadata(self) -> Dict[str, object]:
        return {"model": self.kind, "group": self.group.name}


class TemplateModel(Model):
    """``x.follow(r1).follow(r2) | x.follow(r3).follow(r4)`` with learned r's."""

    kind = "template"

    def __init__(self, context: Context, group_name: str, constraint: str = "softplus"):
        super().__init__(context, group_name)
        if constraint not in ("softplus", "softmax"):
            raise ValidationError(f"relation variables use softplus or softmax, "
                                  f"got {constraint!r}")
        if self.group.domain_type != self.group.range_type:
            raise NQLTypeError(f"template chains need a group over one type, got "
                               f"{self.group.domain_type}->{self.group.range_type}")
        # constrained value starts at 1.0 for softplus, uniform for softmax
        start = np.log(np.expm1(1.0)) if constraint == "softplus" else 1.0
        self.relations = [Parameter(f"template/r{i}", np.full(self.group.k, start), constraint)
                          for i in range(1, 5)]

    def parameters(self) -> List[Parameter]:
        return list(self.relations)

    def relation_vars(self) -> List[Expr]:
        out = []
        for i, p in enumerate(self.relations, 1):
            pinned = self._pinned(f"r{i}")
            out.append(self.relation_set(p.view() if pinned is None else pinned))
        return out

    def predict(self, examples: Sequence[Example]) -> Expr:
        return template_forward(self, self.seeds(examples))

    def learned_relations(self) -> List[List[Tuple[str, float]]]:
        """Constrained weights of r1..r4 as ``[(relation, weight), ...]``, heaviest first."""
        out = []
        for p in self.relations:
            weights = p.constrained()[0]
            order = np.argsort(-weights, kind="stable")
            out.append([(self.group.members[i], float(weights[i])) for i in order])
        return out


def template_forward(model: TemplateModel, x: Expr) -> Expr:
    if x.type_name != model.input_type:
        raise NQLTypeError(f"template input must be {model.input_type!r}, got {x.type_name!r}",
                           expected=model.input_type, actual=x.type_name)
    r1, r2, r3, r4 = model.relation_vars()
    return x.follow(r1).follow(r2) | x.follow(r3).follow(r4)


class QAModel(Model):
    """``e.follow(c.as_nql(f(q)))`` with ``f`` a softmax head over the group."""

    kind = "qa"

    def __init__(self, context: Context, group_name: str, vocab: Vocabulary, dim: int = 32,
                 seed: int = 0):
        super().__init__(context, group_name)
        self.encoder = QueryEncoder(vocab, dim, {"relation": self.group.k},
                                    np.random.default_rng(seed))

    def parameters(self) -> List[Parameter]:
        return self.encoder.parameters()

    def relation_weights(self, pooled: Expr) -> Expr:
        pinned = self._pinned("relation")
        if pinned is not None:
            return pinned
        return graph.transform(self.encoder.head("relation", pooled), "softmax")

    def predict(self, examples: Sequence[Example]) -> Expr:
        return qa_forward(self, examples, self.seeds(examples))

    def metadata(self) -> Dict[str, object]:
        return {**super().metadata(), "vocabulary": self.encoder.vocab.tokens,
                "embedding_dim": self.encoder.dim}


def qa_forward(model: QAModel, questions: Sequence[Example], e: Expr) -> Expr:
    rel = model.relation_set(model.relation_weights(model.encoder.encode(questions)))
    return e.follow(rel)


class MultiHopModel(Model):
    """``e.follow(r1) * switch1 | e.follow(r1).follow(r2) * switch2``."""

    kind = "multihop"

    def __init__(self, context: Context, group_name: str, vocab: Vocabulary, dim: int = 32,
                 seed: int = 0):
        super().__init__(context, group_name)
        if self.group.domain_type != self.group.range_type:
            raise NQLTypeError("two-hop questions need a group over one type")
        k = self.group.k
        self.encoder = QueryEncoder(vocab, dim, {"r1": k, "r2": k, "switch1": 1, "switch2": 1},
                                    np.random.default_rng(seed))

    def parameters(self) -> List[Parameter]:
        return self.encoder.parameters()

    def head(self, name: str, pooled: Expr) -> Expr:
        pinned = self._pinned(name)
        if pinned is not None:
            return pinned
        kind = "sigmoid" if name.startswith("switch") else "softmax"
        return graph.transform(self.encoder.head(name, pooled), kind)

    def predict(self, examples: Sequence[Example]) -> Expr:
        return multihop_forward(self, examples, self.seeds(examples))

    def metadata(self) -> Dict[str, object]:
        return {**super().metadata(), "vocabulary": self.encoder.vocab.tokens,
                "embedding_dim": self.encoder.dim}


def multihop_forward(model: MultiHopModel, questions: Sequence[Example], e: Expr) -> Expr:
    pooled = model.encoder.encode(questions)
    r1 = model.relation_set(model.head("r1", pooled))
    r2 = model.relation_set(model.head("r2", pooled))
    switch1 = model.head("switch1", pooled)
    switch2 = model.head("switch2", pooled)
    return e.follow(r1) * switch1 | e.follow(r1).follow(r2) * switch2


class RecurrentHopModel(Model):
    """Soft chains of up to ``max_hops`` relations with per-step stop probabilities.

    Step ``h`` is fed the encoding of ``hop_tokens(question, seed, h)``.
    ``leftover`` decides what happens to the mass that never stops:
    ``"drop"`` discards it, ``"last"`` adds it to the final hop's set.
    """

    kind = "recurrent"

    def __init__(self, context: Context, group_name: str, vocab: Vocabulary, dim: int = 32,
                 max_hops: int = 5, leftover: str = "drop", seed: int = 0,
                 phrase_length: int = 3):
        super().__init__(context, group_name)
        if max_hops < 1:
            raise ValidationError(f"max_hops must be >= 1, got {max_hops}")
        if leftover not in ("drop", "last"):
            raise ValidationError(f"leftover must be 'drop' or 'last', got {leftover!r}")
        if phrase_length < 1:
            raise ValidationError(f"phrase_length must be >= 1, got {phrase_length}")
        self.phrase_length = phrase_length
        if self.group.domain_type != self.group.range_type:
            raise NQLTypeError("recurrent chains need a group over one type")
        rng = np.random.default_rng(seed)
        k = self.group.k
        self.encoder = QueryEncoder(vocab, dim, {}, rng)
        self.max_hops = max_hops
        self.leftover = leftover
        self.cell_state = Parameter("recurrent/cell/state", _uniform(rng, (dim, dim)))
        self.cell_input = Parameter("recurrent/cell/input", _uniform(rng, (dim, dim)))
        self.cell_bias = Parameter("recurrent/cell/bias", np.zeros(dim))
        self.relation_weight = Parameter("recurrent/relation/weight", _uniform(rng, (dim, k)))
        self.relation_bias = Parameter("recurrent/relation/bias", np.zeros(k))
        self.stop_weight = Parameter("recurrent/stop/weight", _uniform(rng, (dim, 1)))
        self.stop_bias = Parameter("recurrent/stop/bias", np.zeros(1))
        self.coefficients: List[Expr] = []
        self.relations: List[Expr] = []

    def parameters(self) -> List[Parameter]:
        return self.encoder.parameters() + [
            self.cell_state, self.cell_input, self.cell_bias, self.relation_weight,
            self.relation_bias, self.stop_weight, self.stop_bias]

    def step(self, s: Expr, q: Expr, hop: int) -> Tuple[Expr, Expr, Expr]:
        """One application of the cell: new state, relation weights, stop probability."""
        pre = graph.add(graph.add(graph.matmul(s, self.cell_state.view()),
                                  graph.matmul(q, self.cell_input.view())),
                        self.cell_bias.view())
        s = graph.transform(pre, "tanh")
        r = self._pinned(f"relation{hop}")
        if r is None:
            r = graph.transform(graph.affine(s, self.relation_weight, self.relation_bias),
                                "softmax")
        p_stop = self._pinned(f"stop{hop}")
        if p_stop is None:
            p_stop = graph.transform(graph.affine(s, self.stop_weight, self.stop_bias),
                                     "sigmoid")
        return s, r, p_stop

    def hop_inputs(self, examples: Sequence[Example]) -> List[Expr]:
        return [self.encoder.encode_tokens(
                    [hop_tokens(ex.question, ex.seed, hop, self.phrase_length) for ex in examples])
                for hop in range(1, self.max_hops + 1)]

    def predict(self, examples: Sequence[Example]) -> Expr:
        inputs = self.hop_inputs(examples)
        y = recurrent_forward(self, inputs[0], self.seeds(examples), inputs)
        return self.context.as_nql(y, self.output_type)

    def check(self, tape: Tape) -> None:
        values = [tape.value(c) for c in self.coefficients if c in tape]
        if not values:
            return
        for hop, v in enumerate(values, 1):
            if not np.all(np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
                raise HaltingError(f"halting coefficient of hop {hop} left [0, 1]")
        rows = max(v.shape[0] for v in values)
        total = sum(np.broadcast_to(v, (rows, 1)) for v in values)
        if np.any(total > 1.0 + 1e-9):
            raise HaltingError(f"halting mass sums to {float(np.max(total))} > 1")

    def metadata(self) -> Dict[str, object]:
        return {**super().metadata(), "vocabulary": self.encoder.vocab.tokens,
                "embedding_dim": self.encoder.dim, "max_hops": self.max_hops,
                "leftover": self.leftover, "phrase_length": self.phrase_length}


def recurrent_forward(model: RecurrentHopModel, s0: Expr, e: Expr,
                      hop_inputs: Optional[Sequence[Expr]] = None) -> Expr:
    """The halting loop; returns the untyped accumulator over the output type.

    p = 1; y = 0
    for each hop: s, r, p_stop = f(s); e = e.follow(r); y += p * p_stop * e; p *= 1 - p_stop

    Without ``hop_inputs`` every step is fed ``s0``.
    """
    if hop_inputs is not None and len(hop_inputs) < model.max_hops:
        raise ValidationError(f"need {model.max_hops} hop inputs, got {len(hop_inputs)}")
    model.coefficients, model.relations = [], []
    y = model.context.none(model.output_type).tf
    p = graph.constant(np.ones((1, 1)))
    s = s0
    for hop in range(1, model.max_hops + 1):
        q = s0 if hop_inputs is None else hop_inputs[hop - 1]
        s, r, p_stop = model.step(s, q, hop)
        e = e.follow(model.relation_set(r))
        coefficient = graph.hadamard(p, p_stop)
        y = y + e.tf * coefficient
        p = graph.hadamard(p, 1.0 - p_stop)
        model.coefficients.append(coefficient)
        model.relations.append(r)
    if model.leftover == "last":
        y = y + e.tf * p
    return y


# ---------------------------------------------------------------- losses and metrics

def _check_targets(mask: np.ndarray) -> None:
    empty = np.flatnonzero(mask.sum(axis=1) == 0)
    if empty.size:
        raise ValidationError(f"example rows {empty.tolist()} have an empty target set")


def compute_loss(spec: LossSpec, y, targets) -> Expr:
    """Loss node for prediction ``y``.

    ``targets`` is a 0/1 mask array shaped like ``y`` or one collection of
    target indices per row.
    """
    if not isinstance(y, Expr):
        y = graph.constant(y)
    if isinstance(targets, np.ndarray):
        mask = targets.astype(np.float64)
    else:
        mask = np.zeros(y.shape)
        for row, idx in enumerate(targets):
            mask[row, list(idx)] = 1.0
    _check_targets(mask)
    if spec.kind == "target_mass_nll":
        return graph.target_mass_nll(y, mask, spec.epsilon)
    if spec.kind == "binary_cross_entropy":
        return graph.binary_cross_entropy(y, mask, spec.epsilon)
    raise ValidationError(f"unknown loss {spec.kind!r}; expected one of {LOSS_KINDS}")


def hits_at_1(y: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of rows whose top-weighted entity is a target (ties go to the lower index)."""
    y = np.asarray(y)
    if y.shape[0] == 0:
        return 0.0
    top = np.argmax(y, axis=1)
    hit = mask[np.arange(y.shape[0]), top] > 0
    hit &= y.max(axis=1) > 0
    return float(hit.mean())


def random_baseline(examples: Sequence[Example], width: int) -> float:
    """Expected hits@1 of a uniformly random guess."""
    if not examples:
        return 0.0
    return float(np.mean([len(set(ex.targets)) / width for ex in examples]))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    history: List[EpochMetrics] = field(default_factory=list)
    parameters: List[Parameter] = field(default_factory=list)
    steps: int = 0

    @property
    def final(self) -> Optional[EpochMetrics]:
        return self.history[-1] if self.history else None


def _batches(examples: Sequence[Example], order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def _batch_loss(model: Model, batch: Sequence[Example], loss_spec: LossSpec):
    tape = Tape()
    y = model.predict(batch)
    mask = model.context.target_mask([ex.targets for ex in batch], y.type_name)
    loss = compute_loss(loss_spec, y, mask)
    value = float(tape.forward(loss)[0, 0])
    return tape, y, mask, loss, value


def evaluate(model: Model, dataset: Sequence[Example], loss_spec: Optional[LossSpec] = None,
             batch_size: int = 64) -> Tuple[float, float]:
    """Mean loss and hits@1 over ``dataset`` without touching the parameters."""
    if not dataset:
        raise ValidationError("cannot evaluate on an empty dataset")
    loss_spec = loss_spec or LossSpec()
    total_loss, total_hits = 0.0, 0.0
    for batch in _batches(dataset, np.arange(len(dataset)), batch_size):
        tape, y, mask, _, value = _batch_loss(model, batch, loss_spec)
        model.check(tape)
        total_loss += value * len(batch)
        total_hits += hits_at_1(tape.value(y), mask) * len(batch)
    return total_loss / len(dataset), total_hits / len(dataset)


def train(model: Model, dataset: Sequence[Example], optimizer: Optional[OptimizerSpec] = None,
          epochs: int = 50, batch_size: int = 32, seed: int = 0,
          loss_spec: Optional[LossSpec] = None,
          eval_dataset: Optional[Sequence[Example]] = None,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Minibatch training; deterministic for a given seed."""
    if not dataset:
        raise ValidationError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    optimizer = optimizer or OptimizerSpec()
    loss_spec = loss_spec or LossSpec()
    params = model.parameters() + model.context.trainable_parameters()
    opt = make_optimizer(optimizer, params)
    rng = np.random.default_rng(seed)
    result = TrainResult(parameters=params)

    for epoch in range(1, epochs + 1):
        total_loss, total_hits = 0.0, 0.0
        for batch in _batches(dataset, rng.permutation(len(dataset)), batch_size):
            opt.zero_grad()
            tape, y, mask, loss, value = _batch_loss(model, batch, loss_spec)
            result.steps += 1
            if not np.isfinite(value):
                raise DivergenceError(result.steps, value)
            model.check(tape)
            tape.backward(loss)
            opt.step()
            logger.debug("step %d: batch loss %.6f", result.steps, value)
            total_loss += value * len(batch)
            total_hits += hits_at_1(tape.value(y), mask) * len(batch)
        metrics = EpochMetrics(epoch, total_loss / len(dataset), total_hits / len(dataset))
        if eval_dataset:
            metrics.eval_loss, metrics.eval_hits_at_1 = evaluate(model, eval_dataset, loss_spec)
        result.history.append(metrics)
        logger.info("epoch %d: loss %.4f hits@1 %.3f", epoch, metrics.loss, metrics.hits_at_1)
        if on_epoch is not None:
            on_epoch(metrics)
    return result


def hits_by_hops(model: Model, datasets: Mapping[int, Sequence[Example]]) -> Dict[int, float]:
    """hits@1 per chain length; used to measure generalization to longer chains."""
    return {hops: evaluate(model, examples)[1] for hops, examples in sorted(datasets.items())
            if examples}


def build_model(kind: str, context: Context, group_name: str,
                dataset: Sequence[Example] = (), *, embedding_dim: int = 32, max_hops: int = 5,
                leftover: str = "drop", seed: int = 0, constraint: str = "softplus",
                vocabulary: Optional[Sequence[str]] = None, phrase_length: int = 3) -> Model:
    """Construct a model by name; question models build their vocabulary from ``dataset``."""
    if kind == "template":
        return TemplateModel(context, group_name, constraint)
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model {kind!r}; expected one of {MODEL_KINDS}")
    tokenizer = tokenize
    if kind == "recurrent":
        tokenizer = partial(all_hop_tokens, max_hops=max_hops, phrase_length=phrase_length)
    if vocabulary:
        vocab = Vocabulary(t for t in vocabulary if t != UNK)
    else:
        vocab = Vocabulary.from_examples(dataset, tokenizer)
    if kind == "qa":
        return QAModel(context, group_name, vocab, embedding_dim, seed)
    if kind == "multihop":
        return MultiHopModel(context, group_name, vocab, embedding_dim, seed)
    return RecurrentHopModel(context, group_name, vocab, embedding_dim, max_hops, leftover, seed,
                             phrase_length)
