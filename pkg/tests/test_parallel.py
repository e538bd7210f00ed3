import pytest
from hypothesis import given
from hypothesis import strategies as st

from adjbackmap.parallel import parallel_map, tree_reduce


def test_parallel_map_keeps_order():
    def f(v):
        return v * v

    assert parallel_map(f, range(50), threads=4) == [v * v for v in range(50)]
    assert parallel_map(f, [], threads=4) == []


@given(st.lists(st.text(alphabet="abcxyz", max_size=3), min_size=1, max_size=40))
def test_tree_reduce_shape_is_fixed(parts):
    # a non-commutative merge exposes the pairing: neighbours, left to right
    assert tree_reduce(lambda a, b: a + b, parts) == "".join(parts)
    tagged = tree_reduce(lambda a, b: f"({a}{b})", parts)
    assert tagged.replace("(", "").replace(")", "") == "".join(parts)
    assert tagged == tree_reduce(lambda a, b: f"({a}{b})", list(parts))


def test_tree_reduce_pairs_neighbours():
    assert tree_reduce(lambda a, b: f"({a}{b})", list("abcde")) == "(((ab)(cd))e)"


def test_tree_reduce_rejects_empty():
    with pytest.raises(ValueError):
        tree_reduce(lambda a, b: a, [])
