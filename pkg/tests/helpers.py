"""Small graph builders and shared state for the test modules."""

import pathlib

import numpy as np

from levnet.graph import (AvgPoolNode, ConvNode, InputNode, LinearNode,
                          ModelGraph, OutputNode, PolyActNode)

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

# One line per end-to-end gate, filled by the acceptance tests and printed
# by a conftest hook so a plain pytest run shows every gate verdict.
ACCEPTANCE_LINES = []


def tiny_model(seed: int, classes: int = 3) -> ModelGraph:
    """Two convs with quadratic activations, global pool, dense head."""
    rng = np.random.default_rng(seed)
    g = ModelGraph()
    g.add(InputNode("in", 2, 6, 6))
    g.add(ConvNode("conv1", weight=rng.normal(0, 0.25, (3, 2, 3, 3)),
                   bias=rng.normal(0, 0.1, 3), stride=1, padding=1))
    g.add(PolyActNode("act1", coeffs=[np.array(0.05), np.array(0.4),
                                      np.array(1.0)]))
    g.add(ConvNode("conv2", weight=rng.normal(0, 0.25, (3, 3, 3, 3)),
                   bias=rng.normal(0, 0.1, 3), stride=2, padding=1))
    g.add(PolyActNode("act2", coeffs=[np.array(0.05), np.array(0.4),
                                      np.array(1.0)]))
    g.add(AvgPoolNode("pool", 9, np.array(1.0 / 9)))
    g.add(LinearNode("fc", weight=rng.normal(0, 0.3, (classes, 3)),
                     bias=rng.normal(0, 0.1, classes)))
    g.add(OutputNode("out"))
    order = ["in", "conv1", "act1", "conv2", "act2", "pool", "fc", "out"]
    for s, d in zip(order, order[1:]):
        g.connect(s, d)
    g.validate()
    return g
