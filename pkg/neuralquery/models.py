from dataclasses import dataclass, field
from typing import Optional, List, Dict, Any, Tuple

SCHEMA_VERSION = "neuralquery/v1"


@dataclass
class TypeSpec:
    name: str
    entities: Optional[List[str]] = None
    oov: bool = False

    @property
    def closed(self) -> bool:
        return self.entities is not None


@dataclass
class RelationSpec:
    name: str
    domain_type: str
    range_type: str


@dataclass
class GroupSpec:
    name: str
    members: List[str]


@dataclass
class SchemaSpec:
    types: List[TypeSpec] = field(default_factory=list)
    relations: List[RelationSpec] = field(default_factory=list)
    groups: List[GroupSpec] = field(default_factory=list)

    def type_names(self) -> List[str]:
        return [t.name for t in self.types]

    def relation_names(self) -> List[str]:
        return [r.name for r in self.relations]


@dataclass(frozen=True)
class FactTriple:
    relation: str
    subject: str
    object: str
    weight: float = 1.0
    line: Optional[int] = field(default=None, compare=False)


@dataclass
class KinshipSpec:
    seed: int = 0
    generations: int = 4
    persons_per_generation: int = 40
    marriage_prob: float = 0.8
    min_children: int = 1
    max_children: int = 4
    remarriage_prob: float = 0.0


@dataclass(frozen=True)
class Example:
    seed: str
    targets: Tuple[str, ...]
    question: str = ""


@dataclass
class LossSpec:
    kind: str = "target_mass_nll"
    epsilon: float = 1e-8


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 0.1
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    hits_at_1: float
    eval_loss: Optional[float] = None
    eval_hits_at_1: Optional[float] = None

    def to_record(self) -> Dict[str, Any]:
        record = {"schema": SCHEMA_VERSION, "record": "epoch", "epoch": self.epoch,
                  "loss": self.loss, "hits_at_1": self.hits_at_1}
        if self.eval_loss is not None:
            record["eval_loss"] = self.eval_loss
            record["eval_hits_at_1"] = self.eval_hits_at_1
        return record


@dataclass
class RunConfig:
    subcommand: str
    seed: int = 0
    schema_path: Optional[str] = None
    facts_path: Optional[str] = None
    dataset_path: Optional[str] = None
    eval_dataset_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    output_path: Optional[str] = None
    fixture: Optional[str] = None
    model: str = "template"
    group: Optional[str] = None
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    epochs: int = 50
    batch_size: int = 32
    max_hops: int = 5
    embedding_dim: int = 32
    output_format: str = "text"
    top_k: Optional[int] = None
    min_weight: Optional[float] = None
    follow_strategy: str = "sum"
    threads: int = 1
    bench_entities: int = 100_000
    bench_tuples: int = 1_000_000
    bench_relations: int = 12
    bench_repeats: int = 20

    def to_record(self) -> Dict[str, Any]:
        return {"schema": SCHEMA_VERSION, "record": "run", "subcommand": self.subcommand,
                "seed": self.seed}


@dataclass
class LatencyStats:
    name: str
    batch_size: int
    median_ms: float
    p95_ms: float

    @property
    def per_row_ms(self) -> float:
        return self.median_ms / max(1, self.batch_size)


@dataclass
class BenchReport:
    entities: int
    tuples: int
    relations: int
    threads: int
    kb_bytes: int
    peak_rss_bytes: int
    latencies: List[LatencyStats] = field(default_factory=list)
    aborted: Optional[str] = None

    def to_records(self) -> List[Dict[str, Any]]:
        head = {"schema": SCHEMA_VERSION, "record": "bench", "entities": self.entities,
                "tuples": self.tuples, "relations": self.relations, "threads": self.threads,
                "kb_bytes": self.kb_bytes, "peak_rss_bytes": self.peak_rss_bytes}
        if self.aborted:
            head["aborted"] = self.aborted
        rows = [{"schema": SCHEMA_VERSION, "record": "latency", "name": s.name,
                 "batch_size": s.batch_size, "median_ms": s.median_ms, "p95_ms": s.p95_ms,
                 "per_row_ms": s.per_row_ms} for s in self.latencies]
        return [head] + rows
