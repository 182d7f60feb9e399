"""Graph isomorphism network encoder and classifier head.

Each message-passing layer updates node states as
MLP((1 + eps) * h_v + sum of neighbor states), with a learnable scalar eps
per layer and a two-layer MLP (ReLU between the two affine maps, linear
output). Graph representations are sums of final node states. Everything
runs on the reverse-mode tape from numcore, so one backward call yields
gradients for all layer parameters and the classifier.

Batches are encoded as one disjoint union: node features are stacked, edge
endpoints offset per graph, and per-graph sums taken over contiguous node
segments. This keeps the per-batch cost at O(total nodes + total edges)
matrix work instead of one tape per graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .graphdata import Graph


class DivergenceError(ArithmeticError):
    """Training produced non-finite values."""


@dataclass
class GINLayer:
    eps: nc.Tensor      # 1×1 learnable self-loop scale
    w1: nc.Tensor
    b1: nc.Tensor
    w2: nc.Tensor
    b2: nc.Tensor


@dataclass
class EncoderParams:
    input_dim: int
    hidden_dim: int
    layers: list


@dataclass
class ClassifierParams:
    w: nc.Tensor
    b: nc.Tensor


@dataclass
class Model:
    encoder: EncoderParams
    classifier: ClassifierParams


def init_encoder(input_dim: int, hidden_dim: int, num_layers: int,
                 rng: np.random.Generator) -> EncoderParams:
    """Glorot-uniform weights, zero biases, eps starting at zero."""
    if num_layers < 1:
        raise ValueError(f"need at least one layer, got {num_layers}")
    layers = []
    for i in range(num_layers):
        in_dim = input_dim if i == 0 else hidden_dim
        layers.append(GINLayer(
            eps=nc.zeros_param(1, 1),
            w1=nc.glorot_uniform(in_dim, hidden_dim, rng),
            b1=nc.zeros_param(1, hidden_dim),
            w2=nc.glorot_uniform(hidden_dim, hidden_dim, rng),
            b2=nc.zeros_param(1, hidden_dim),
        ))
    return EncoderParams(input_dim=input_dim, hidden_dim=hidden_dim, layers=layers)


def init_classifier(hidden_dim: int, num_classes: int,
                    rng: np.random.Generator) -> ClassifierParams:
    return ClassifierParams(
        w=nc.glorot_uniform(hidden_dim, num_classes, rng),
        b=nc.zeros_param(1, num_classes),
    )


def parameters(model: Model) -> list:
    """All trainable tensors, in a stable order."""
    return list(named_parameters(model).values())


def named_parameters(model: Model) -> dict:
    """Name -> tensor map; names double as checkpoint manifest keys."""
    out = {}
    for i, layer in enumerate(model.encoder.layers):
        prefix = f"encoder.layer{i}"
        out[f"{prefix}.eps"] = layer.eps
        out[f"{prefix}.w1"] = layer.w1
        out[f"{prefix}.b1"] = layer.b1
        out[f"{prefix}.w2"] = layer.w2
        out[f"{prefix}.b2"] = layer.b2
    out["classifier.w"] = model.classifier.w
    out["classifier.b"] = model.classifier.b
    return out


class _UnionIndex:
    """Precomputed gather/segment structure for one disjoint union of graphs.

    ``neighbor`` applies the union's symmetric adjacency to an [N × d] state
    matrix; since the adjacency is symmetric the same routine is its own
    transpose, so forward and backward share the structure. ``pool`` sums
    rows over the contiguous per-graph segments.
    """

    def __init__(self, graphs):
        sizes = [g.num_nodes for g in graphs]
        offsets = np.cumsum([0] + sizes)
        self.num_nodes = int(offsets[-1])
        self.sizes = np.asarray(sizes)
        self.seg_starts = offsets[:-1]

        directed = []
        for g, off in zip(graphs, offsets):
            for u, v in g.edges:
                directed.append((u + off, v + off))
                directed.append((v + off, u + off))
        if directed:
            pairs = np.asarray(directed)
            order = np.argsort(pairs[:, 1], kind="stable")
            dst_sorted = pairs[order, 1]
            self.gather = pairs[order, 0]
            # one reduceat segment per distinct destination node
            boundary = np.flatnonzero(np.diff(dst_sorted)) + 1
            self.starts = np.concatenate(([0], boundary))
            self.targets = dst_sorted[self.starts]
        else:
            self.gather = None

    def neighbor(self, h: np.ndarray) -> np.ndarray:
        out = np.zeros_like(h)
        if self.gather is not None:
            out[self.targets] = np.add.reduceat(h[self.gather], self.starts, axis=0)
        return out

    def pool(self, h: np.ndarray) -> np.ndarray:
        return np.add.reduceat(h, self.seg_starts, axis=0)

    def unpool(self, g: np.ndarray) -> np.ndarray:
        return np.repeat(g, self.sizes, axis=0)


def neighbor_sum(h: nc.Tensor, index: _UnionIndex) -> nc.Tensor:
    """Tape op: row v of the result is the sum of v's neighbor states."""
    if h.rows != index.num_nodes:
        raise nc.DimensionError(
            f"state rows {h.rows} != union nodes {index.num_nodes}")
    return nc.op_node(index.neighbor(h.value), [(h, index.neighbor)])


def segment_sum(h: nc.Tensor, index: _UnionIndex) -> nc.Tensor:
    """Tape op: per-graph sums of node states, one row per graph."""
    if h.rows != index.num_nodes:
        raise nc.DimensionError(
            f"state rows {h.rows} != union nodes {index.num_nodes}")
    return nc.op_node(index.pool(h.value), [(h, index.unpool)])


def gin_layer_forward(layer: GINLayer, h: nc.Tensor, index: _UnionIndex,
                      linear: bool = False) -> nc.Tensor:
    combined = nc.add(nc.add(h, nc.smul(layer.eps, h)), neighbor_sum(h, index))
    z = nc.add_bias(nc.matmul(combined, layer.w1), layer.b1)
    if not linear:
        z = nc.relu(z)
    return nc.add_bias(nc.matmul(z, layer.w2), layer.b2)


def encode_batch(enc: EncoderParams, graphs, linear: bool = False) -> nc.Tensor:
    """Representations for a batch of graphs, one row per graph, on the tape."""
    if not graphs:
        raise ValueError("cannot encode an empty batch")
    for g in graphs:
        if g.features.shape[1] != enc.input_dim:
            raise nc.DimensionError(
                f"feature width {g.features.shape[1]} != encoder input "
                f"{enc.input_dim}")
    index = _UnionIndex(graphs)
    h = nc.constant(np.concatenate([g.features for g in graphs], axis=0))
    for layer in enc.layers:
        h = gin_layer_forward(layer, h, index, linear=linear)
    return segment_sum(h, index)


def encode(enc: EncoderParams, graph: Graph, linear: bool = False) -> nc.Tensor:
    """Representation of a single graph as a 1×d tensor."""
    return encode_batch(enc, [graph], linear=linear)


def classify(clf: ClassifierParams, z: nc.Tensor) -> nc.Tensor:
    """Class logits for a batch of representations."""
    return nc.add_bias(nc.matmul(z, clf.w), clf.b)


def predict(model: Model, graphs, linear: bool = False) -> np.ndarray:
    """Predicted class index per graph. No gradients are kept."""
    logits = classify(model.classifier, encode_batch(model.encoder, graphs,
                                                     linear=linear))
    return np.argmax(logits.value, axis=1)


def weighted_prediction_step(model: Model, graphs, labels, weights,
                             optimizer: nc.Adam, linear: bool = False) -> float:
    """One optimizer step on the weighted cross-entropy of a batch.

    Runs its own forward pass; weights enter the loss as constants. Any
    non-finite intermediate is reported as divergence.
    """
    params = parameters(model)
    nc.zero_grad(params)
    try:
        z = encode_batch(model.encoder, graphs, linear=linear)
        loss = nc.softmax_cross_entropy(classify(model.classifier, z),
                                        labels, weights)
        nc.backward(loss)
        optimizer.step()
    except nc.NonFiniteError as err:
        raise DivergenceError(str(err)) from err
    return float(loss.value[0, 0])
