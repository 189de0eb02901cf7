"""modellab lib."""
from modellab.lib.deps import (
    dep_graph,
    mapping_graph,
    topological_sort,
)
