"""
pytest configuration for neuralquery tests
"""

import numpy as np
import pytest

from neuralquery import fixtures
from neuralquery.context import Context
from neuralquery.graph import Tape, numeric_gradient
from neuralquery.kb_core import build_kb
from neuralquery.models import KinshipSpec


@pytest.fixture(scope="session")
def royal_kb():
    """The royal-family miniature, built once per session (the KB is immutable)."""
    return build_kb(*fixtures.royal_fixture())


@pytest.fixture
def royal(royal_kb):
    """A fresh context over the royal KB."""
    return Context(royal_kb)


@pytest.fixture(scope="session")
def kinship():
    """A small seeded kinship KB: (schema, facts, oracle)."""
    return fixtures.generate_kinship(KinshipSpec(seed=1, generations=3,
                                                 persons_per_generation=16))


@pytest.fixture
def kinship_context(kinship):
    schema, facts, _ = kinship
    return Context(build_kb(schema, facts))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_kb(seed: int, **kwargs):
    """A small random typed KB with one relation group."""
    schema, facts = fixtures.random_schema_and_facts(np.random.default_rng(seed), **kwargs)
    return build_kb(schema, facts)


def assert_gradients_match(loss_fn, params, rtol=1e-4, atol=1e-6):
    """Compare tape gradients of ``loss_fn()`` (an Expr) with central differences."""
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn()
    tape.forward(loss)
    grads = tape.backward(loss)
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.values)).copy()
        numeric = numeric_gradient(lambda: float(Tape().forward(loss_fn())[0, 0]), p)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol,
                                   err_msg=f"gradient of {p.name}")
