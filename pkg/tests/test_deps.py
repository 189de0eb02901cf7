import pytest
from ruamel.yaml import YAML

from modellab.lib import deps


def _catalogue():
    catalogue = {
        "baseline": [],
        "sep-qkv": ["baseline"],
        "sep-qkv+bidir": ["sep-qkv"],
        "llavit": ["sep-qkv+bidir"],
    }

    return catalogue


def test_mapping_graph__no_deps():
    actual = deps.mapping_graph({"a": [], "b": [], "c": []})

    expected = {
        "a": [],
        "b": [],
        "c": [],
    }

    assert actual == expected


def test_mapping_graph__simple_deps():
    actual = deps.mapping_graph(_catalogue())

    expected_graph = {
        "baseline": [],
        "sep-qkv": ["baseline"],
        "sep-qkv+bidir": ["sep-qkv"],
        "llavit": ["sep-qkv+bidir"],
    }

    assert actual == expected_graph


def test_mapping_graph__self_ref():
    graph = _catalogue()
    graph["baseline"] = ["baseline"]

    with pytest.raises(ValueError) as err:
        deps.mapping_graph(graph)

    assert str(err.value) == "baseline depends on itself"


def test_mapping_graph__ref_pointing_undefined_node():
    graph = _catalogue()
    graph["llavit"] = ["doesnotexist"]

    with pytest.raises(ValueError) as err:
        deps.mapping_graph(graph)

    assert str(err.value) == "Undefined node: doesnotexist"


def test_mapping_graph__has_cycle():
    graph = _catalogue()
    graph["baseline"] = ["llavit"]

    with pytest.raises(ValueError) as err:
        deps.mapping_graph(graph)

    assert str(err.value) == "There is a cycle!!"


def test_dep_graph__from_roots():
    """Only nodes reachable from the roots make it into the graph."""
    edges = {1: [2, 3], 2: [3], 3: [], 4: [1]}

    actual = deps.dep_graph([1], lambda node: edges[node])

    assert actual == {1: [2, 3], 2: [3], 3: []}


def test_dep_graph__deep_chain():
    """Tapes of long forward passes are far deeper than the recursion
    limit.
    """
    depth = 20_000

    actual = deps.dep_graph(
        [depth], lambda node: [node - 1] if node > 0 else [])

    assert len(actual) == depth + 1
    assert deps.topological_sort(actual)[:3] == [0, 1, 2]


def test_dep_graph__repeated_dep():
    # mul(x, x) style nodes list the same input twice
    actual = deps.dep_graph(["y"], lambda node: ["x", "x"] if node == "y"
                            else [])

    assert actual == {"y": ["x", "x"], "x": []}
    assert deps.topological_sort(actual) == ["x", "y"]


def test_top_sort__no_deps():
    graph = deps.mapping_graph({"a": [], "b": [], "c": []})

    t_sort = deps.topological_sort(graph)

    # order can be anything so does not matter here but we need to make sure
    # all nodes have been found
    assert sorted(t_sort) == ["a", "b", "c"]


def test_top_sort__simple_deps():
    graph = deps.mapping_graph(_catalogue())

    # llavit -> sep-qkv+bidir -> sep-qkv -> baseline, so the order is the
    # reverse of this
    expected = ["baseline", "sep-qkv", "sep-qkv+bidir", "llavit"]

    actual = deps.topological_sort(graph)

    assert actual == expected


def test_top_sort__diamond():
    graph = {
        "top": ["left", "right"],
        "left": ["bottom"],
        "right": ["bottom"],
        "bottom": [],
    }

    actual = deps.topological_sort(graph)

    assert actual.index("bottom") < actual.index("left")
    assert actual.index("bottom") < actual.index("right")
    assert actual[-1] == "top"


def test_top_sort__cycle():
    # "graph" with a cycle
    cycle = {
        "sep-qkv": ["baseline"],
        "baseline": ["sep-qkv"],
        "llavit": ["sep-qkv"],
    }

    with pytest.raises(ValueError) as err:
        deps.topological_sort(cycle)

    assert str(err.value) == "Cycle found"


def test_deps__end_to_end():
    """This test simulates input coming from actual yaml."""
    t = """
    variants:
      llavit: [sep-qkv+bidir]
      sep-qkv+bidir: [sep-qkv]
      baseline: []
      sep-qkv: [baseline]
    """
    yaml = YAML()
    block = yaml.load(t)

    actual = deps.mapping_graph(block["variants"])

    expected_graph = {
        "llavit": ["sep-qkv+bidir"],
        "sep-qkv+bidir": ["sep-qkv"],
        "baseline": [],
        "sep-qkv": ["baseline"],
    }

    assert actual == expected_graph

    # ensure sorting is correct
    assert deps.topological_sort(expected_graph) == \
        ["baseline", "sep-qkv", "sep-qkv+bidir", "llavit"]
