import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqbalance.exceptions import ConfigError, ParseError
from seqbalance.topology import bag_of_rank, format_topology, parse_topology, replicate


def test_mixed_topology():
    t = parse_topology("g1n2+g2n1+g4n1")
    assert t.bag_sizes == [1, 1, 2, 4]
    assert t.unit_size == 8
    assert [b.bag_id for b in t.bags] == [0, 1, 2, 3]
    assert [b.gpu_ranks for b in t.bags] == [(0,), (1,), (2, 3), (4, 5, 6, 7)]


def test_intra_node():
    t = parse_topology("g8n4")
    assert t.bag_sizes == [8] * 4
    assert t.unit_size == 32


def test_single():
    t = parse_topology("g1n1")
    assert t.bag_sizes == [1] and t.unit_size == 1


@pytest.mark.parametrize(
    "spec, offset",
    [
        ("", 0),
        ("x1n1", 0),
        ("g", 1),
        ("g1", 2),
        ("g1n", 3),
        ("g0n1", 1),
        ("g1n0", 3),
        ("g1n1+", 5),
        ("g1n1 ", 4),
        ("g1n1+g2x1", 7),
        ("g01n1", 1),
        ("g99999999999n1", 1),
    ],
)
def test_parse_errors_carry_offset(spec, offset):
    with pytest.raises(ParseError) as err:
        parse_topology(spec)
    assert err.value.offset == offset


def test_replicate():
    assert len(replicate(parse_topology("g8n4"), 32).replicas) == 1
    layout = replicate(parse_topology("g1n2+g2n1+g4n1"), 32)
    assert [r.offset for r in layout.replicas] == [0, 8, 16, 24]
    with pytest.raises(ConfigError):
        replicate(parse_topology("g4n2"), 12)
    with pytest.raises(ConfigError):
        replicate(parse_topology("g4n2"), 4)


def test_bag_of_rank():
    assert bag_of_rank(replicate(parse_topology("g8n4"), 32), 0) == (0, 0, (1, 2, 3, 4, 5, 6, 7))
    assert bag_of_rank(replicate(parse_topology("g1n2+g2n1+g4n1"), 8), 2) == (0, 2, (3,))
    assert bag_of_rank(replicate(parse_topology("g1n1"), 1), 0) == (0, 0, ())
    layout = replicate(parse_topology("g1n2+g2n1+g4n1"), 16)
    assert bag_of_rank(layout, 11) == (1, 2, (10,))
    with pytest.raises(ConfigError):
        bag_of_rank(layout, 16)


def test_layout_json():
    data = json.loads(replicate(parse_topology("g2n2"), 8).to_json())
    assert [[b["ranks"] for b in r["bags"]] for r in data["replicas"]] == [[[0, 1], [2, 3]], [[4, 5], [6, 7]]]


terms = st.lists(st.tuples(st.sampled_from([1, 2, 4, 8]), st.integers(1, 4)), min_size=1, max_size=5)


@given(terms, st.integers(1, 4))
def test_partition_and_round_trip(ts, reps):
    spec = "+".join(f"g{g}n{n}" for g, n in ts)
    topo = parse_topology(spec)
    assert parse_topology(format_topology(topo)) == topo
    layout = replicate(topo, topo.unit_size * reps)
    ranks = [r for rep in layout.replicas for b in rep.bags for r in b.gpu_ranks]
    assert sorted(ranks) == list(range(layout.world_size))
    for rep in layout.replicas:
        for b in rep.bags:
            assert list(b.gpu_ranks) == list(range(b.gpu_ranks[0], b.gpu_ranks[0] + b.size))
