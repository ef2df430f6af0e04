"""
Tests for the compute graph, tape and gradients
"""

import numpy as np
import pytest

from neuralquery import graph
from neuralquery.context import Context
from neuralquery.exceptions import NQLTypeError, ShapeError, UsageError
from neuralquery.graph import Parameter, Tape

from .conftest import assert_gradients_match, random_kb


class TestTape:
    """Forward evaluation and bookkeeping"""

    def test_node_ids_are_topological(self):
        """Children are always created before their parents"""
        a = graph.constant([[1.0, 2.0]])
        b = graph.constant([[3.0, 4.0]])
        c = graph.add(a, b)

        assert a.id < c.id and b.id < c.id

    def test_shared_subexpression_evaluated_once(self):
        """A DAG node reused twice is memoized on the tape"""
        a = graph.constant([[1.0, 2.0]])
        doubled = graph.add(a, a)
        tape = Tape()

        np.testing.assert_array_equal(tape.forward(doubled), [[2.0, 4.0]])
        assert a in tape
        np.testing.assert_array_equal(tape.value(a), [[1.0, 2.0]])

    def test_value_before_forward(self):
        """Reading a node that was never evaluated is a usage error"""
        with pytest.raises(UsageError):
            Tape().value(graph.constant([[1.0]]))

    def test_backward_needs_scalar(self):
        """backward() takes a (1, 1) loss that was evaluated on the tape"""
        x = graph.constant([[1.0, 2.0]])
        tape = Tape()
        with pytest.raises(UsageError):
            tape.backward(graph.reduce_sum(x))
        tape.forward(x)
        with pytest.raises(UsageError):
            tape.backward(x)

    def test_batch_one_broadcasts(self):
        """A batch-1 operand broadcasts against a batch-B one"""
        a = graph.constant(np.ones((1, 3)))
        b = graph.constant(np.arange(6.0).reshape(2, 3))

        out = graph.forward(graph.hadamard(a, b))
        np.testing.assert_array_equal(out, np.arange(6.0).reshape(2, 3))

    def test_incompatible_batches(self):
        """Batches of 2 and 3 rows cannot be combined"""
        with pytest.raises(ShapeError):
            graph.add(graph.constant(np.ones((2, 3))), graph.constant(np.ones((3, 3))))

    def test_type_mismatch(self):
        """Operands of different entity types cannot be added"""
        a = graph.constant(np.ones((1, 2)), "a_t")
        b = graph.constant(np.ones((1, 2)), "b_t")

        with pytest.raises(NQLTypeError):
            graph.add(a, b)


class TestGradients:
    """Reverse-mode gradients against finite differences"""

    def test_elementwise_chain(self, rng):
        """transform, hadamard, gate, if_any, axpb and row_sum"""
        w = Parameter("w", rng.normal(size=(2, 4)))
        v = Parameter("v", rng.normal(size=(1, 4)), "sigmoid")
        g = Parameter("g", rng.normal(size=(2, 1)), "softplus")

        def loss():
            x = graph.transform(w.view(), "tanh")
            y = graph.hadamard(x, v.view())
            z = graph.if_any(graph.gate(y, g.view()), graph.transform(w.view(), "softmax"))
            return graph.reduce_sum(graph.row_sum(graph.axpb(z, 2.0, 0.5)))

        assert_gradients_match(loss, [w, v, g])

    def test_matmul_affine(self, rng):
        """Dense layers used by the question encoders"""
        x = graph.constant(rng.normal(size=(3, 4)))
        w = Parameter("w", rng.normal(size=(4, 2)))
        b = Parameter("b", rng.normal(size=2))

        def loss():
            y = graph.transform(graph.affine(x, w, b), "softmax")
            return graph.reduce_sum(graph.hadamard(y, graph.constant([[1.0, 3.0]])))

        assert_gradients_match(loss, [w, b])

    def test_gate_needs_scalar(self):
        """Multiplying by a wider tensor is a ShapeError; '&' is the set intersection"""
        x = graph.constant(np.ones((1, 2)))

        with pytest.raises(ShapeError):
            x * graph.constant([[1.0, 3.0]])

    @pytest.mark.parametrize("strategy", ["sum", "stacked"])
    def test_follow_gradients(self, strategy):
        """Gradients flow to both the seed set and the relation weights"""
        kb = random_kb(3, max_entities=8, max_relations=4, density=0.6, max_types=1)
        ctx = Context(kb, follow_strategy=strategy)
        group = kb.groups["g_t"]
        n = kb.type(group.domain_type).cardinality
        rng = np.random.default_rng(1)
        s = Parameter("s", rng.uniform(0.1, 1.0, size=(2, n)))
        r = Parameter("r", rng.normal(size=(2, group.k)), "softmax")

        def loss():
            x = ctx.as_nql(s, group.domain_type)
            out = x.follow(ctx.as_nql(r, "g_t"))
            back = out.follow(ctx.as_nql(r, "g_t"), inverse=True)
            return graph.reduce_sum(graph.transform(back.tf, "tanh"))

        assert_gradients_match(loss, [s, r])

    def test_strategies_agree(self, rng):
        """The sum and stacked follow strategies compute the same values"""
        kb = random_kb(5, max_entities=10, max_relations=5, density=0.5, max_types=1)
        group = kb.groups["g_t"]
        n = kb.type(group.domain_type).cardinality
        s = rng.random((3, n))
        r = rng.random((3, group.k))
        values = []
        for strategy in ("sum", "stacked"):
            ctx = Context(kb, follow_strategy=strategy)
            expr = ctx.as_nql(s, group.domain_type).follow(ctx.as_nql(r, "g_t"))
            values.append(graph.forward(expr))

        np.testing.assert_allclose(values[0], values[1])

    def test_trainable_relation_gradients(self, royal):
        """Entry weights of a trainable relation receive gradients in both directions"""
        param = royal.make_trainable("wife")
        seeds = graph.constant(np.random.default_rng(2).random((2, royal.kb.n_entities)))

        def loss():
            x = royal.as_nql(seeds, "person_t")
            return graph.reduce_sum(graph.transform((x.wife() | x.wife(-1)).tf, "tanh"))

        assert_gradients_match(loss, [param])

    @pytest.mark.parametrize("strategy", ["sum", "stacked"])
    def test_trainable_relation_through_follow(self, royal_kb, strategy):
        """follow reads a trainable member's weights and sends gradients back to them"""
        ctx = Context(royal_kb, follow_strategy=strategy)
        param = ctx.make_trainable("father")
        param.values[...] = np.log(np.expm1(0.25))
        group = ctx.group("rel_t")
        one_hot = np.zeros((1, group.k))
        one_hot[0, group.members.index("father")] = 1.0
        seeds = np.random.default_rng(3).random((2, royal_kb.type("person_t").cardinality))
        x = ctx.as_nql(seeds, "person_t")
        plain = Context(royal_kb).as_nql(seeds, "person_t")

        for inverse in (False, True):
            got = graph.forward(x.follow(ctx.as_nql(one_hot, "rel_t"), inverse))
            np.testing.assert_allclose(got, graph.forward(x.rel("father", inverse)))
            np.testing.assert_allclose(got, 0.25 * graph.forward(plain.rel("father", inverse)))

        mix = Parameter("mix", np.random.default_rng(4).normal(size=(1, group.k)), "softmax")

        def loss():
            s, r = ctx.as_nql(seeds, "person_t"), ctx.as_nql(mix.view(), "rel_t")
            return graph.reduce_sum(graph.transform((s.follow(r) | s.follow(r, True)).tf, "tanh"))

        tape = Tape()
        root = loss()
        tape.forward(root)
        assert np.any(tape.backward(root)[param] != 0.0)
        assert_gradients_match(loss, [param, mix])

    def test_losses(self, rng):
        """Target-mass NLL and binary cross-entropy values and gradients"""
        p = Parameter("p", rng.normal(size=(2, 5)), "softplus")
        mask = np.array([[1, 0, 0, 1, 0], [0, 1, 0, 0, 0]], dtype=float)

        y = p.constrained()
        expected = np.mean(np.log(y.sum(axis=1) + 5e-8) - np.log((y * mask).sum(axis=1) + 1e-8))
        value = graph.forward(graph.target_mass_nll(p.view(), mask))[0, 0]
        assert value == pytest.approx(expected)

        assert_gradients_match(lambda: graph.target_mass_nll(p.view(), mask), [p])
        q = Parameter("q", rng.normal(size=(2, 5)), "sigmoid")
        assert_gradients_match(lambda: graph.binary_cross_entropy(q.view(), mask), [q])

    def test_loss_mask_shape(self):
        """The target mask must match the prediction"""
        with pytest.raises(ShapeError):
            graph.target_mass_nll(graph.constant(np.ones((2, 3))), np.ones((2, 4)))

    def test_backward_helper_orders_gradients(self, rng):
        """graph.backward returns gradients in the order params are given"""
        a = Parameter("a", rng.normal(size=(1, 3)))
        b = Parameter("b", rng.normal(size=(1, 3)))
        unused = Parameter("unused", np.zeros(2))
        loss = graph.reduce_sum(graph.hadamard(a.view(), b.view()))
        tape = Tape()
        tape.forward(loss)

        ga, gb, gu = graph.backward(tape, loss, [a, b, unused])
        np.testing.assert_allclose(ga, b.values)
        np.testing.assert_allclose(gb, a.values)
        np.testing.assert_array_equal(gu, np.zeros(2))


class TestExprSugar:
    """Python operators and relation-name methods on expressions"""

    def test_relation_methods(self, royal):
        """x.wife() is x.rel('wife'); x.son(-1) follows the inverse"""
        henry = royal.one("Henry_VIII of house of Tudor", "person_t")

        wives = dict(henry.wife().eval()[0])
        assert len(wives) == 6
        parents = {name for name, _ in henry.son(-1).eval()[0]}
        assert parents == {"Henry_VII of house of Tudor", "Elizabeth of house of York"}

    def test_relation_method_flag(self, royal):
        """Only -1 is accepted as the inverse flag"""
        henry = royal.one("Henry_VIII of house of Tudor", "person_t")

        with pytest.raises(ValueError):
            henry.wife(2)

    def test_unknown_attribute(self, royal):
        """Names that are neither attributes nor relations raise AttributeError"""
        henry = royal.one("Henry_VIII of house of Tudor", "person_t")

        with pytest.raises(AttributeError):
            henry.cousin()

    def test_untyped_eval(self):
        """Untyped tensors cannot be decoded"""
        with pytest.raises(UsageError):
            graph.constant([[1.0]]).eval()

    def test_scalar_arithmetic(self):
        """x + c, c - x and -x are affine maps on tensors"""
        x = graph.constant([[1.0, 2.0]])

        np.testing.assert_array_equal(graph.forward(x + 1.0), [[2.0, 3.0]])
        np.testing.assert_array_equal(graph.forward(1.0 - x), [[0.0, -1.0]])
        np.testing.assert_array_equal(graph.forward(-x), [[-1.0, -2.0]])
