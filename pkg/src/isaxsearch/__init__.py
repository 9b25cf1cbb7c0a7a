"""Parallel in-memory iSAX index with exact 1-NN query engines."""

from .core import (
    ABANDONED,
    BreakpointTable,
    IsaxWord,
    PaaSummary,
    build_breakpoints,
    euclidean_distance,
    isax_from_paa,
    lower_bound_distance,
    paa,
    promote_cardinality_check,
    znormalize,
)
from .errors import ConfigurationError, FormatError, IsaxError, UsageError
from .index import (
    IndexConfig,
    IndexNode,
    IsaxBufferSet,
    TreeIndex,
    build_index,
    build_stage,
    split_leaf,
    summarize_stage,
)
from .io import generate, random_walks, read_dataset, write_dataset
from .query import (
    BsfState,
    QueryStats,
    SearchCandidate,
    SearchResult,
    approximate_search,
    search_flat,
    search_scan,
    search_tree,
)

__version__ = "0.1.0"
