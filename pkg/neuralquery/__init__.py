"""
neuralquery

Differentiable queries over a soft knowledge base: relations are sparse
matrices, entity sets are weighted vectors, and every query is a function
you can take gradients through.
"""

try:
    from ._version import version as __version__
except ImportError:  # running from a source tree without setuptools-scm
    __version__ = "0.1.0"

# Session
from .context import Context

# Knowledge base
from .kb_core import KnowledgeBase, RelationDecl, RelationGroup, TypeDecl, build_kb, make_group

# Expressions and autodiff
from .graph import Expr, Parameter, Tape, numeric_gradient
from .query import compile_query, parse, pretty

# Learning
from .learning import (MultiHopModel, QAModel, RecurrentHopModel, TemplateModel, build_model,
                       evaluate, train)

# Data models
from .models import (
    SCHEMA_VERSION,
    Example,
    FactTriple,
    GroupSpec,
    KinshipSpec,
    LossSpec,
    OptimizerSpec,
    RelationSpec,
    RunConfig,
    SchemaSpec,
    TypeSpec,
)

# Errors
from .exceptions import (
    BindError,
    CheckpointError,
    DivergenceError,
    EntityLookupError,
    FormatError,
    HaltingError,
    NQLError,
    NQLTypeError,
    QueryParseError,
    ShapeError,
    UnknownNameError,
    UsageError,
    ValidationError,
)

__all__ = [
    "__version__",

    # Classes
    "Context",
    "KnowledgeBase",
    "TypeDecl",
    "RelationDecl",
    "RelationGroup",
    "Expr",
    "Parameter",
    "Tape",
    "TemplateModel",
    "QAModel",
    "MultiHopModel",
    "RecurrentHopModel",

    # Functions
    "build_kb",
    "make_group",
    "compile_query",
    "parse",
    "pretty",
    "numeric_gradient",
    "build_model",
    "train",
    "evaluate",

    # Models
    "SCHEMA_VERSION",
    "TypeSpec",
    "RelationSpec",
    "GroupSpec",
    "SchemaSpec",
    "FactTriple",
    "Example",
    "KinshipSpec",
    "LossSpec",
    "OptimizerSpec",
    "RunConfig",

    # Errors
    "NQLError",
    "ShapeError",
    "NQLTypeError",
    "EntityLookupError",
    "UnknownNameError",
    "ValidationError",
    "FormatError",
    "QueryParseError",
    "BindError",
    "UsageError",
    "CheckpointError",
    "DivergenceError",
    "HaltingError",
]
