import numpy as np
import pytest
import torch

from flowcorrect.catalog import get_catalog
from flowcorrect.graph import FlowsheetGraph


@pytest.fixture(scope="session")
def catalog():
    return get_catalog()


@pytest.fixture(autouse=True, scope="session")
def _threads():
    # keep torch deterministic and fair on the small CI box
    torch.set_num_threads(2)


def permute_graph(g: FlowsheetGraph, rng: np.random.Generator) -> FlowsheetGraph:
    """A copy of `g` with node ids reassigned in random order and edges
    inserted in random order; must serialize identically."""
    out = FlowsheetGraph()
    old_ids = list(g.nodes)
    rng.shuffle(old_ids)
    mapping = {}
    for old in old_ids:
        node = g.nodes[old]
        mapping[old] = out.add_node(node.kind, node.function)
    edges = list(g.edges)
    rng.shuffle(edges)
    for e in edges:
        out.add_edge(mapping[e.src], mapping[e.dst], e.tag)
    return out
