"""koji: typed dataflow pipelines with causal-hash caching."""

from .cache import CacheStore
from .controller import Binding, Controller, RunConfig, RunReport, run
from .documents import load_document, parse_document, serialize_document
from .hashing import CausalHash, causal_hash_output, content_hash_path, hash_pipeline
from .model import (
    DependencyGraph,
    Edge,
    Pipeline,
    Resource,
    Step,
    build_graph,
    topo_order,
    validate_document,
)
from .typecheck import check_pipeline, fulfills

__all__ = [
    "Binding", "CacheStore", "CausalHash", "Controller", "DependencyGraph", "Edge",
    "Pipeline", "Resource", "RunConfig", "RunReport", "Step", "build_graph",
    "causal_hash_output", "check_pipeline", "content_hash_path", "fulfills",
    "hash_pipeline", "load_document", "parse_document", "run", "serialize_document",
    "topo_order", "validate_document",
]

__version__ = "0.1.0"
