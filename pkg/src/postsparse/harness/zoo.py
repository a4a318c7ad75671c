"""Tiny fixture architectures, their training loop and task scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import io
from .. import tensor as T
from ..graph import LayerNode, ModelGraph, forward, predict
from ..metrics import HIGHER, LOWER, TaskScore
from ..tensor import Tensor
from .data import Dataset

FAMILIES = ("mlp", "plainconv", "rescnn")
SIZES = ("s", "m", "l")
WIDTHS = {
    "mlp": {"s": 16, "m": 32, "l": 64},
    "plainconv": {"s": 4, "m": 6, "l": 8},
    "rescnn": {"s": 4, "m": 6, "l": 8},
}
ORIENTATION = {"cls": HIGHER, "den": LOWER}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Fixture:
    name: str
    family: str
    size: str
    task: str
    model_path: Optional[Path] = None
    dataset: str = ""
    reference_score: Optional[float] = None


class _Builder:
    def __init__(self, rng: np.random.Generator, input_shape):
        self.rng = rng
        self.nodes: dict[str, LayerNode] = {}
        self.input_shape = tuple(input_shape)
        self.last: Optional[str] = None

    def _add(self, node: LayerNode) -> str:
        self.nodes[node.id] = node
        self.last = node.id
        return node.id

    def _src(self, src) -> list[str]:
        src = self.last if src is None else src
        return [] if src is None else [src]

    def conv(self, nid, cin, cout, k=3, stride=1, padding=1, src=None):
        fan_in = cin * k * k
        w = self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        return self._add(LayerNode(nid, "conv2d", self._src(src),
                                   {"weight": Tensor(w), "bias": Tensor(np.zeros(cout))},
                                   {"stride": stride, "padding": padding}))

    def dense(self, nid, n_in, n_out, src=None):
        w = self.rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
        return self._add(LayerNode(nid, "dense", self._src(src),
                                   {"weight": Tensor(w), "bias": Tensor(np.zeros(n_out))}))

    def bn(self, nid, c, src=None):
        params = {"gamma": Tensor(np.ones(c)), "beta": Tensor(np.zeros(c)),
                  "running_mean": Tensor(np.zeros(c)), "running_var": Tensor(np.ones(c))}
        return self._add(LayerNode(nid, "batchnorm2d", self._src(src), params,
                                   {"momentum": T.BN_MOMENTUM, "eps": T.BN_EPS}))

    def op(self, nid, kind, src=None, **attrs):
        return self._add(LayerNode(nid, kind, self._src(src), {}, attrs))

    def add(self, nid, a, b):
        return self._add(LayerNode(nid, "residual_add", [a, b]))

    def cbr(self, prefix, cin, cout, stride=1, relu=True, src=None):
        self.conv(f"{prefix}.conv", cin, cout, 3, stride, 1, src=src)
        self.bn(f"{prefix}.bn", cout)
        if relu:
            self.op(f"{prefix}.relu", "relu")
        return self.last

    def graph(self, name) -> ModelGraph:
        ids = list(self.nodes)
        g = ModelGraph(self.nodes, ids[0], ids[-1], self.input_shape, name)
        g.validate()
        return g


def build_model(family: str, size: str, task: str, input_shape, n_out: int,
                rng: np.random.Generator) -> ModelGraph:
    """Freshly initialized fixture graph.

    cls models end in logits of width ``n_out``; den models reproduce the
    input shape (flat for mlp).
    """
    if family not in FAMILIES or size not in SIZES:
        raise ValueError(f"unknown fixture {family}/{size}")
    c_in, h, w = input_shape
    width = WIDTHS[family][size]
    b = _Builder(rng, input_shape)
    name = f"{family}-{size}-{task}"
    pixels = c_in * h * w
    if family == "mlp":
        b.op("flat", "flatten")
        b.dense("fc1", pixels, width)
        b.op("fc1.relu", "relu")
        b.dense("fc2", width, width)
        b.op("fc2.relu", "relu")
        b.dense("head", width, n_out if task == "cls" else pixels)
        return b.graph(name)
    if family == "plainconv":
        if task == "cls":
            b.cbr("l1", c_in, width)
            b.cbr("l2", width, 2 * width, stride=2)
            b.cbr("l3", 2 * width, 2 * width)
            b.op("pool", "avgpool2d", kernel=h // 2)
            b.op("flat", "flatten")
            b.dense("head", 2 * width, n_out)
        else:
            b.cbr("l1", c_in, width)
            b.cbr("l2", width, width)
            b.conv("head", width, c_in, 3, 1, 1)
        return b.graph(name)
    # rescnn: stem then two identity residual blocks
    stride = 2 if task == "cls" else 1
    b.cbr("stem", c_in, width, stride=stride)
    for i in (1, 2):
        entry = b.last
        b.cbr(f"b{i}.1", width, width)
        b.cbr(f"b{i}.2", width, width, relu=False)
        b.add(f"b{i}.add", entry, b.last)
        b.op(f"b{i}.relu", "relu")
    if task == "cls":
        b.op("pool", "avgpool2d", kernel=h // stride)
        b.op("flat", "flatten")
        b.dense("head", width, n_out)
    else:
        b.conv("head", width, c_in, 3, 1, 1)
    return b.graph(name)


def _loss(graph: ModelGraph, task: str, out: Tensor, y: np.ndarray) -> Tensor:
    if task == "cls":
        return T.softmax_xent(out, y)
    return T.mse(out, Tensor(y.reshape(out.shape)))


def round_to_f32(graph: ModelGraph) -> ModelGraph:
    """Round every parameter to float32 precision (the on-disk precision)."""
    for node in graph.nodes.values():
        for p in node.params.values():
            p.data[...] = p.data.astype(np.float32).astype(np.float64)
    return graph


def train_model(graph: ModelGraph, ds: Dataset, epochs: int, seed: int, lr: float = 0.05,
                momentum: float = 0.9, batch_size: int = 64, weight_decay: float = 1e-4) -> list[float]:
    """Full-model SGD training in place; returns the per-epoch mean loss."""
    task = ds.spec.task
    rng = np.random.default_rng(seed)
    params = graph.trainable()
    opt = T.SGD(params, lr, momentum)
    n = len(ds.x_train)
    history = []
    for epoch in range(epochs):
        # cosine decay over epochs
        opt.lr = lr * 0.5 * (1 + math.cos(math.pi * epoch / max(epochs, 1)))
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            if len(idx) < 2:
                continue
            acts, tape = forward(graph, Tensor(ds.x_train[idx]), record=True, training=True)
            with tape:
                loss = _loss(graph, task, acts[graph.exit], ds.y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"{graph.name}: non-finite loss in epoch {epoch}")
            grads = tape.backward(loss)
            if weight_decay:
                for p in params:
                    if p.data.ndim > 1:
                        grads[p] = grads[p] + weight_decay * p.data
            opt.step(grads)
            total += value * len(idx)
        history.append(total / n)
    return history


def evaluate(graph: ModelGraph, ds: Dataset, split: str = "test") -> TaskScore:
    """Top-1 accuracy for cls (higher is better), mean squared error for den."""
    x, y = (ds.x_test, ds.y_test) if split == "test" else (ds.x_train, ds.y_train)
    out = predict(graph, x)
    if ds.spec.task == "cls":
        if out.ndim != 2:
            raise T.ShapeError(f"cls model must emit logits, got shape {out.shape}")
        return TaskScore(float(np.mean(out.argmax(axis=1) == y)), HIGHER)
    if out.size != y.size:
        raise T.ShapeError(f"den output {out.shape} does not match targets {y.shape}")
    err = float(np.mean((out.reshape(y.shape) - y) ** 2))
    if not err > 0:
        raise ValueError("den score must be strictly positive (lower-is-better score of 0)")
    return TaskScore(err, LOWER)


def train_fixture(family: str, size: str, ds: Dataset, epochs: int, seed: int,
                  out_path=None) -> tuple[ModelGraph, TaskScore]:
    """Build, train and (optionally) save a fixture; score it on the test split."""
    task = ds.spec.task
    rng = np.random.default_rng(seed)
    graph = build_model(family, size, task, ds.input_shape, ds.spec.classes, rng)
    lr = 0.05 if task == "cls" else 0.01
    train_model(graph, ds, epochs, seed + 1, lr=lr)
    round_to_f32(graph)
    score = evaluate(graph, ds)
    if out_path is not None:
        io.save_model(graph, out_path)
    return graph, score
