"""
Tests for the trainable models, losses and the training loop
"""

import numpy as np
import pytest

from neuralquery import fixtures, graph, learning
from neuralquery.context import Context
from neuralquery.exceptions import DivergenceError, HaltingError, NQLTypeError, ValidationError
from neuralquery.fixtures import ROYAL_SEED, KinshipOracle
from neuralquery.graph import Tape
from neuralquery.kb_core import build_kb
from neuralquery.learning import (MultiHopModel, QAModel, RecurrentHopModel, TemplateModel,
                                  Vocabulary, all_hop_tokens, build_model, compute_loss, evaluate,
                                  hits_at_1, hop_tokens, random_baseline, tokenize, train)
from neuralquery.models import Example, LossSpec, OptimizerSpec
from neuralquery.optim import make_optimizer

from .conftest import assert_gradients_match

MARY_I = "Mary_I of house of Tudor"
ELIZABETH_I = "Elizabeth_I of house of Tudor"


@pytest.fixture
def oracle():
    return KinshipOracle(fixtures.royal_fixture()[1])


@pytest.fixture
def grandfather_examples(oracle):
    """Everyone whose maternal grandfather is in the royal tree."""
    out = []
    for person in oracle.persons:
        targets = oracle.chain(person, ["mother", "father"])
        if targets:
            out.append(Example(person, tuple(sorted(targets)),
                               fixtures.question_text(["mother", "father"], person)))
    return out


@pytest.fixture
def mixed_examples(oracle):
    """A few one- and two-hop questions about the royal family."""
    out = fixtures.relation_examples(oracle, "father")[:3]
    out += fixtures.relation_examples(oracle, "wife")[:2]
    return out + fixtures.chain_examples(oracle, 2, 3, np.random.default_rng(4))


def one_hot_relation(context, relation):
    group = context.group("rel_t")
    row = np.zeros((1, group.k))
    row[0, group.members.index(relation)] = 1.0
    return row


def example_loss(model, examples, loss_spec=None):
    y = model.predict(examples)
    mask = model.context.target_mask([ex.targets for ex in examples], y.type_name)
    return compute_loss(loss_spec or LossSpec(), y, mask)


class TestEncoding:
    """Question tokens and bag-of-words features"""

    def test_tokenize_masks_seed_and_tags_positions(self):
        """The seed name is removed and words are tagged by distance from the end"""
        tokens = tokenize("What is the father of Henry X", "Henry X")

        assert tokens[:5] == ["what", "is", "the", "father", "of"]
        assert tokens[5:] == ["what@5", "is@4", "the@3", "father@2", "of@1"]

    def test_vocabulary_indices(self):
        """Index 0 is reserved for unknown tokens; repeats are added once"""
        vocab = Vocabulary(["a", "b", "a"])

        assert vocab.tokens == ["<unk>", "a", "b"]
        assert len(vocab) == 3
        assert vocab.add("c") == 3

    def test_bag_of_words(self):
        """Rows are normalized counts; unknown words go to <unk>"""
        vocab = Vocabulary(["a", "b"])
        bow = vocab.bag_of_words([["a", "a", "c"], []])

        np.testing.assert_allclose(bow, [[1 / 3, 2 / 3, 0.0], [1.0, 0.0, 0.0]])

    def test_vocabulary_from_examples(self, mixed_examples):
        """Seeds never leak into the vocabulary"""
        vocab = Vocabulary.from_examples(mixed_examples)

        assert "father" in vocab.index
        assert "henry_viii" not in vocab.index
        assert not any("tudor" in tok for tok in vocab.tokens)

    def test_hop_tokens_realign_each_phrase(self):
        """Every hop sees its own relation word tagged @2"""
        question = fixtures.question_text(["father", "mother"], "Anne")

        assert hop_tokens(question, "Anne", 1) == ["the@6", "mother@5", "of@4", "the@3",
                                                   "father@2", "of@1"]
        assert hop_tokens(question, "Anne", 2) == ["what@5", "is@4", "the@3", "mother@2",
                                                   "of@1"]
        assert hop_tokens(question, "Anne", 3) == ["what@2", "is@1"]
        assert hop_tokens(question, "Anne", 4) == []

    def test_longer_chains_add_no_tokens(self):
        """A four-hop question reads only tokens that shorter chains already produce"""
        relations = ["father", "mother", "wife"]
        paths = [[a] for a in relations]
        paths += [[a, b] for a in relations for b in relations]
        paths += [[a, b, c] for a in relations for b in relations for c in relations]
        seen = Vocabulary.from_examples(
            [Example("X", (), fixtures.question_text(p, "X")) for p in paths],
            lambda q, s: all_hop_tokens(q, s, max_hops=5))
        four = fixtures.question_text(["wife", "father", "mother", "father"], "X")

        assert set(all_hop_tokens(four, "X", max_hops=5)) <= set(seen.tokens)
        assert "father@11" not in seen.index


class TestMetrics:
    """Losses, hits@1 and the random baseline"""

    def test_hits_at_1(self):
        """Only rows whose heaviest entity is a target count; all-zero rows miss"""
        y = np.array([[0.1, 0.5, 0.2], [0.0, 0.0, 0.0]])
        mask = np.array([[0, 1, 0], [1, 0, 0]], dtype=float)

        assert hits_at_1(y, mask) == 0.5
        assert hits_at_1(np.zeros((0, 3)), np.zeros((0, 3))) == 0.0

    @pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e4])
    def test_positive_scaling(self, factor):
        """Scaling predictions by a positive constant keeps hits@1 and the mass-ratio loss"""
        rng = np.random.default_rng(0)
        y = rng.random((20, 9))
        mask = (rng.random((20, 9)) < 0.3).astype(float)
        mask[:, 0] = 1.0

        assert hits_at_1(y * factor, mask) == hits_at_1(y, mask)
        base = float(Tape().forward(compute_loss(LossSpec(epsilon=1e-12), y, mask))[0, 0])
        scaled = float(Tape().forward(compute_loss(LossSpec(epsilon=1e-12), y * factor,
                                                   mask))[0, 0])
        assert scaled == pytest.approx(base, rel=1e-6)

    def test_random_baseline(self):
        """Expected accuracy of a uniform guess"""
        examples = [Example("a", ("x", "y")), Example("b", ("x",))]

        assert random_baseline(examples, 4) == pytest.approx(0.375)
        assert random_baseline([], 4) == 0.0

    def test_compute_loss_target_indices(self):
        """Targets may be index lists; the NLL of an exact answer is ~0"""
        y = np.array([[0.0, 1.0, 0.0]])
        loss = compute_loss(LossSpec(), y, [[1]])

        assert float(Tape().forward(loss)[0, 0]) == pytest.approx(0.0, abs=1e-6)

    def test_compute_loss_rejects_empty_targets(self):
        """Every example needs at least one target"""
        with pytest.raises(ValidationError):
            compute_loss(LossSpec(), np.ones((2, 3)), [[0], []])

    def test_unknown_loss(self):
        """Only the two documented losses exist"""
        with pytest.raises(ValidationError):
            compute_loss(LossSpec(kind="hinge"), np.ones((1, 3)), [[0]])


class TestModelGradients:
    """Tape gradients of every model against finite differences"""

    def test_template(self, royal, grandfather_examples):
        """r1..r4 of the two-branch template"""
        model = TemplateModel(royal, "rel_t")

        assert_gradients_match(lambda: example_loss(model, grandfather_examples),
                               model.parameters())

    def test_template_softmax(self, royal, grandfather_examples):
        """Softmax-constrained relation variables"""
        model = TemplateModel(royal, "rel_t", constraint="softmax")
        spec = LossSpec(kind="binary_cross_entropy")

        assert_gradients_match(lambda: example_loss(model, grandfather_examples, spec),
                               model.parameters())

    def test_qa(self, royal, mixed_examples):
        """Embedding and relation head of the question model"""
        model = build_model("qa", royal, "rel_t", mixed_examples, embedding_dim=4, seed=1)

        assert isinstance(model, QAModel)
        assert_gradients_match(lambda: example_loss(model, mixed_examples), model.parameters())

    def test_multihop(self, royal, mixed_examples):
        """Relation and switch heads of the two-hop model"""
        model = build_model("multihop", royal, "rel_t", mixed_examples, embedding_dim=3, seed=2)

        assert isinstance(model, MultiHopModel)
        assert_gradients_match(lambda: example_loss(model, mixed_examples), model.parameters())

    @pytest.mark.parametrize("leftover", ["drop", "last"])
    def test_recurrent(self, royal, mixed_examples, leftover):
        """Cell, relation and stop parameters through the halting loop"""
        model = build_model("recurrent", royal, "rel_t", mixed_examples, embedding_dim=3,
                            max_hops=3, leftover=leftover, seed=3)

        assert isinstance(model, RecurrentHopModel)
        assert_gradients_match(lambda: example_loss(model, mixed_examples), model.parameters())

    def test_trainable_relation_with_model(self, royal, grandfather_examples):
        """Relation weights and model parameters train together"""
        param = royal.make_trainable("father")
        model = TemplateModel(royal, "rel_t")

        tape = Tape()
        loss = example_loss(model, grandfather_examples)
        tape.forward(loss)
        assert np.any(tape.backward(loss)[param] != 0.0)
        assert_gradients_match(lambda: example_loss(model, grandfather_examples),
                               model.parameters() + [param])


class TestPinnedHeads:
    """Overriding head outputs turns the models into fixed queries"""

    def test_template_mother_husband_is_father(self, royal, oracle):
        """r1=r3={mother}, r2=r4={husband} answers every father question"""
        model = TemplateModel(royal, "rel_t")
        for name, relation in (("r1", "mother"), ("r2", "husband"), ("r3", "mother"),
                               ("r4", "husband")):
            model.override(name, one_hot_relation(royal, relation))
        examples = fixtures.relation_examples(oracle, "father")

        rows = model.predict(examples).eval()
        assert len(rows) == len(examples) > 0
        for ex, row in zip(examples, rows):
            assert {name for name, _ in row} == set(ex.targets), ex.seed
            assert all(weight == pytest.approx(2.0) for _, weight in row)

    def test_template_daughter_sister(self, royal, oracle):
        """r1={daughter}, r3={son}, r2=r4={sister} approximates daughter"""
        model = TemplateModel(royal, "rel_t")
        for name, relation in (("r1", "daughter"), ("r2", "sister"), ("r3", "son"),
                               ("r4", "sister")):
            model.override(name, one_hot_relation(royal, relation))

        def answer(person):
            return {name for name, _ in model.predict([Example(person, ())]).eval()[0]}

        for person in (ROYAL_SEED, "Henry_VII of house of Tudor"):
            assert answer(person) == oracle.chain(person, ["daughter"])
        # a half-sister through the other parent is not a daughter
        assert answer("Catherine of Aragon") == {ELIZABETH_I}
        assert oracle.chain("Catherine of Aragon", ["daughter"]) == {MARY_I}

    def test_qa_uniform_relations(self, royal, mixed_examples):
        """Uniform relation weights give the mean of the single-relation answers"""
        model = QAModel(royal, "rel_t", Vocabulary.from_examples(mixed_examples), dim=3)
        k = model.group.k
        model.override("relation", np.full((1, k), 1.0 / k))
        seeds = model.seeds(mixed_examples)

        got = graph.forward(model.predict(mixed_examples))
        singles = [graph.forward(seeds.rel(m)) for m in model.group.members]
        np.testing.assert_allclose(got, np.mean(singles, axis=0), rtol=1e-12, atol=1e-15)

    def test_multihop_two_hops(self, royal):
        """switch1=0, switch2=1 answers x.father().father()"""
        model = MultiHopModel(royal, "rel_t", Vocabulary(), dim=2)
        model.override("r1", one_hot_relation(royal, "father"))
        model.override("r2", one_hot_relation(royal, "father"))
        model.override("switch1", [[0.0]])
        model.override("switch2", [[1.0]])

        got = model.predict([Example(MARY_I, ())]).eval()[0]
        assert got == [("Henry_VII of house of Tudor", 1.0)]

    def test_recurrent_stops_after_two_hops(self, royal):
        """A certain stop at hop 2 returns the two-step chain"""
        model = RecurrentHopModel(royal, "rel_t", Vocabulary(), dim=2, max_hops=3)
        model.override("relation1", one_hot_relation(royal, "daughter"))
        model.override("relation2", one_hot_relation(royal, "mother"))
        model.override("stop1", [[0.0]])
        model.override("stop2", [[1.0]])

        tape = Tape()
        y = model.predict([Example(ROYAL_SEED, ())])
        tape.forward(y)
        model.check(tape)

        got = {name for name, _ in royal.decode(tape.value(y), "person_t")[0]}
        assert got == {"Catherine of Aragon", "Anne of house of Boleyn"}

    def test_recurrent_leftover_mass(self, royal):
        """With leftover='last' unstopped mass lands on the final hop"""
        model = RecurrentHopModel(royal, "rel_t", Vocabulary(), dim=2, max_hops=1,
                                  leftover="last")
        model.override("relation1", one_hot_relation(royal, "daughter"))
        model.override("stop1", [[0.25]])

        got = dict(model.predict([Example(ROYAL_SEED, ())]).eval()[0])
        assert got == {MARY_I: pytest.approx(1.0), ELIZABETH_I: pytest.approx(1.0)}

        model.leftover = "drop"
        got = dict(model.predict([Example(ROYAL_SEED, ())]).eval()[0])
        assert got == {MARY_I: pytest.approx(0.25), ELIZABETH_I: pytest.approx(0.25)}

    def test_halting_check(self, royal):
        """A stop probability above one breaks the halting distribution"""
        model = RecurrentHopModel(royal, "rel_t", Vocabulary(), dim=2, max_hops=2)
        model.override("stop1", [[1.5]])

        tape = Tape()
        tape.forward(model.predict([Example(ROYAL_SEED, ())]))
        with pytest.raises(HaltingError):
            model.check(tape)


class TestModelConstruction:
    """build_model and constructor validation"""

    def test_unknown_model(self, royal):
        with pytest.raises(ValidationError):
            build_model("transformer", royal, "rel_t")

    def test_bad_arguments(self, royal):
        """Hop counts, leftover modes and constraints are checked"""
        with pytest.raises(ValidationError):
            RecurrentHopModel(royal, "rel_t", Vocabulary(), max_hops=0)
        with pytest.raises(ValidationError):
            RecurrentHopModel(royal, "rel_t", Vocabulary(), leftover="keep")
        with pytest.raises(ValidationError):
            TemplateModel(royal, "rel_t", constraint="sigmoid")
        with pytest.raises(ValidationError):
            QAModel(royal, "rel_t", Vocabulary(), dim=0)

    def test_chains_need_single_type_group(self):
        """Template chains are only defined for groups over one type"""
        kb = build_kb(*fixtures.student_grade_fixture())
        ctx = Context(kb)
        ctx.make_group("column_t", ["grade_record_student_id"])

        with pytest.raises(NQLTypeError):
            TemplateModel(ctx, "column_t")

    def test_metadata_restores_vocabulary(self, royal, mixed_examples):
        """A model rebuilt from its metadata has the same vocabulary"""
        model = build_model("recurrent", royal, "rel_t", mixed_examples, embedding_dim=4,
                            max_hops=2)
        meta = model.metadata()
        again = build_model(meta["model"], royal, meta["group"],
                            embedding_dim=meta["embedding_dim"], max_hops=meta["max_hops"],
                            leftover=meta["leftover"], vocabulary=meta["vocabulary"])

        assert again.encoder.vocab.tokens == model.encoder.vocab.tokens
        assert [p.shape for p in again.parameters()] == [p.shape for p in model.parameters()]


class TestTraining:
    """The minibatch training loop"""

    def test_template_learns_grandfather(self, royal, grandfather_examples):
        """The template recovers mother->father and beats a random guess"""
        model = TemplateModel(royal, "rel_t")
        result = train(model, grandfather_examples, OptimizerSpec(kind="adam", lr=0.1),
                       epochs=40, batch_size=4)

        assert len(result.history) == 40
        assert result.final.loss < result.history[0].loss
        loss, hits = evaluate(model, grandfather_examples)
        baseline = random_baseline(grandfather_examples, royal.kb.n_entities)
        assert hits > baseline
        assert [len(r) for r in model.learned_relations()] == [12] * 4

    def test_qa_loss_decreases(self, royal, mixed_examples):
        """The question model fits a handful of questions"""
        model = build_model("qa", royal, "rel_t", mixed_examples, embedding_dim=8, seed=0)
        result = train(model, mixed_examples, OptimizerSpec(kind="adam", lr=0.05),
                       epochs=30, batch_size=8)

        assert result.final.loss < result.history[0].loss
        assert result.steps == 30 * ((len(mixed_examples) + 7) // 8)

    def test_deterministic_for_seed(self, royal, mixed_examples):
        """Two runs with the same seed produce identical histories and weights"""
        runs = []
        for _ in range(2):
            model = build_model("multihop", royal, "rel_t", mixed_examples, embedding_dim=4)
            result = train(model, mixed_examples, epochs=3, batch_size=2, seed=5)
            runs.append(([m.loss for m in result.history],
                         [p.values.copy() for p in model.parameters()]))

        assert runs[0][0] == runs[1][0]
        for a, b in zip(runs[0][1], runs[1][1]):
            np.testing.assert_array_equal(a, b)

    def test_eval_dataset_and_callback(self, royal, grandfather_examples):
        """Per-epoch metrics include held-out numbers and reach the callback"""
        seen = []
        model = TemplateModel(royal, "rel_t")
        train(model, grandfather_examples, epochs=2, eval_dataset=grandfather_examples[:2],
              on_epoch=seen.append)

        assert [m.epoch for m in seen] == [1, 2]
        assert seen[0].eval_loss is not None
        assert "eval_hits_at_1" in seen[0].to_record()

    def test_divergence(self, royal, grandfather_examples):
        """A non-finite loss stops training with the failing step"""
        model = TemplateModel(royal, "rel_t")
        model.relations[0].values[...] = np.nan

        with pytest.raises(DivergenceError) as excinfo:
            train(model, grandfather_examples, epochs=1)
        assert excinfo.value.step == 1

    def test_empty_dataset(self, royal):
        """Empty datasets and bad batch sizes are rejected"""
        model = TemplateModel(royal, "rel_t")

        with pytest.raises(ValidationError):
            train(model, [])
        with pytest.raises(ValidationError):
            evaluate(model, [])
        with pytest.raises(ValidationError):
            train(model, [Example(ROYAL_SEED, (MARY_I,))], batch_size=0)

    def test_hits_by_hops(self, royal, oracle):
        """hits@1 is reported per chain length"""
        model = TemplateModel(royal, "rel_t")
        rng = np.random.default_rng(0)
        datasets = {1: fixtures.chain_examples(oracle, 1, 4, rng),
                    2: fixtures.chain_examples(oracle, 2, 4, rng), 3: []}

        report = learning.hits_by_hops(model, datasets)
        assert sorted(report) == [1, 2]
        assert all(0.0 <= v <= 1.0 for v in report.values())

    def test_trainable_relation_is_updated(self, royal, grandfather_examples):
        """Training moves the stored weights of a trainable relation"""
        param = royal.make_trainable("father")
        before = param.values.copy()
        model = TemplateModel(royal, "rel_t")

        result = train(model, grandfather_examples, OptimizerSpec(kind="adam", lr=0.1),
                       epochs=3, batch_size=4)

        assert param in result.parameters
        assert not np.allclose(param.values, before)

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_zero_learning_rate(self, royal, mixed_examples, kind):
        """lr=0 leaves every parameter where it started"""
        model = build_model("multihop", royal, "rel_t", mixed_examples, embedding_dim=4)
        before = [p.values.copy() for p in model.parameters()]

        train(model, mixed_examples, OptimizerSpec(kind=kind, lr=0.0), epochs=2, batch_size=2)

        for p, kept in zip(model.parameters(), before):
            np.testing.assert_array_equal(p.values, kept)

    def test_single_example_loss_non_increasing(self, royal, grandfather_examples):
        """Ten small Adam steps on one example never raise its loss"""
        model = TemplateModel(royal, "rel_t")
        opt = make_optimizer(OptimizerSpec(kind="adam", lr=0.01), model.parameters())
        example = grandfather_examples[:1]
        losses = []
        for _ in range(10):
            opt.zero_grad()
            tape = Tape()
            loss = example_loss(model, example)
            losses.append(float(tape.forward(loss)[0, 0]))
            tape.backward(loss)
            opt.step()

        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:])), losses
        assert losses[-1] < losses[0]
