"""Build dependency graphs and order them topologically.

Two things in modellab are dependency graphs: the operations recorded while a
loss is computed (every op depends on the ops that produced its inputs) and
the ablation variant catalogue (every variant names the variant it builds
on). Both are resolved here.
"""
from typing import Callable, Hashable, Iterable, Mapping, TypeVar

Node = TypeVar("Node", bound=Hashable)

DepGraph = dict[Node, list[Node]]


def dep_graph(
    roots: Iterable[Node],
    edges: Callable[[Node], Iterable[Node]],
) -> DepGraph:
    """Build the dependency graph reachable from a set of root nodes.

    The search is an iterative dfs, graphs recorded during a forward pass are
    easily deeper than the interpreter's recursion limit.

    :param Iterable roots: the nodes to start the search from
    :param Callable edges: returns the direct dependencies of a node
    :return: an adjacency list, every reachable node maps to the list of
        nodes it depends on
    :rtype: DepGraph
    :raises ValueError: if the graph has a cycle
    """
    graph: DepGraph = {}
    # visited set ensures we dont expand the same node twice
    visited: set[Node] = set()

    for root in roots:
        if root in visited:
            continue

        # each stack frame is (node, its remaining deps); path mirrors the
        # frames so we can find cycles
        path: set[Node] = {root}
        graph[root] = graph.get(root, [])
        stack = [(root, iter(edges(root)))]

        while stack:
            node, pending = stack[-1]
            dep = next(pending, None)

            if dep is None:
                stack.pop()
                path.discard(node)
                visited.add(node)
                continue

            if dep in path:
                raise ValueError("There is a cycle!!")

            graph[node].append(dep)

            if dep in visited:
                continue

            graph[dep] = graph.get(dep, [])
            path.add(dep)
            stack.append((dep, iter(edges(dep))))

    return graph


def mapping_graph(
    nodes: Mapping[Node, Iterable[Node]],
) -> DepGraph:
    """Build a dependency graph from an explicit mapping.

    :param Mapping nodes: each node mapped to the nodes it depends on
    :return: the dependency graph
    :rtype: DepGraph
    :raises ValueError: if a node depends on something undefined or there
        is a cycle
    """
    def edges(node: Node) -> Iterable[Node]:
        for dep in nodes[node]:
            # dont silently fail if an undefined node is referenced
            if dep not in nodes:
                raise ValueError(f"Undefined node: {dep}")
            if dep == node:
                raise ValueError(f"{node} depends on itself")
            yield dep

    return dep_graph(nodes, edges)


def topological_sort(graph: DepGraph) -> list[Node]:
    """Return the topological ordering of a given graph.

    Dependencies always come before the nodes that depend on them.

    :param DepGraph graph: an adjacency list representation of a graph
    :return: the topological order
    :rtype: list
    :raises ValueError: if there is a cycle
    """
    # holds all explored nodes
    visited: set[Node] = set()
    # holds the final topological ordering
    order: list[Node] = []

    for start in graph:
        if start in visited:
            continue

        path: set[Node] = {start}
        stack = [(start, iter(graph[start]))]

        while stack:
            node, pending = stack[-1]
            dep = next(pending, None)

            if dep is None:
                stack.pop()
                path.discard(node)
                visited.add(node)
                order.append(node)
                continue

            if dep in path:
                raise ValueError("Cycle found")

            if dep in visited:
                continue

            path.add(dep)
            stack.append((dep, iter(graph.get(dep, []))))

    return order
