"""Calibration-driven recovery of a sparsified model.

For each reconstruction unit (in topological order) the sparse unit is
optionally error-corrected layer by layer, then its weights and biases are
tuned with masked momentum SGD so that its output matches the dense unit's
output on the calibration set.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .graph import (
    GRAPH_INPUT,
    GRANULARITIES,
    LayerNode,
    ModelGraph,
    ReconstructionUnit,
    forward,
    partition_units,
    run_unit,
    topo_order,
)
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

EC_EPS = 1e-12
INPUT_MODES = ("sparse", "dense")


class NumericalError(RuntimeError):
    pass


@dataclass
class ReconConfig:
    granularity: str = "block_wise"
    input_mode: str = "sparse"
    error_correction: bool = False
    lr: float = 1e-4
    momentum: float = 0.9
    iterations: int = 20000
    batch_size: int = 64
    seed: int = 0
    per_channel: bool = True
    workers: int = 1

    def __post_init__(self):
        self.granularity = {"layer": "layer_wise", "block": "block_wise"}.get(
            self.granularity, self.granularity)
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def tag(self) -> str:
        gran = self.granularity.replace("_wise", "")
        return f"{gran}-{self.input_mode}-{'ec' if self.error_correction else 'noec'}"


@dataclass
class UnitResult:
    unit: ReconstructionUnit
    initial_loss: float
    final_loss: float
    trace: list[float] = field(default_factory=list)
    aborted: bool = False
    diagnostic: str = ""


# ---------------------------------------------------------------------------
# Error correction
# ---------------------------------------------------------------------------


def _groups(w: np.ndarray, per_channel: bool) -> np.ndarray:
    return w.reshape(w.shape[0], -1) if per_channel else w.reshape(1, -1)


def correct_weights(w_dense: np.ndarray, w_sparse: np.ndarray, per_channel: bool = True,
                    eps: float = EC_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Affine moment matching of sparse weights onto dense ones.

    Returns ``(corrected, scale)`` where ``corrected`` is the pre-remask
    ``scale * w_s + mean(w_d) - mean(scale * w_s)`` and ``scale`` is
    ``std(w_d) / (std(w_s) + eps)``, one value per statistics group
    (output channel, or the whole tensor).
    """
    if w_dense.shape != w_sparse.shape:
        raise T.ShapeError(f"dense {w_dense.shape} vs sparse {w_sparse.shape}")
    gd, gs = _groups(w_dense, per_channel), _groups(w_sparse, per_channel)
    scale = gd.std(axis=1) / (gs.std(axis=1) + eps)
    scaled = gs * scale[:, None]
    out = scaled + (gd.mean(axis=1) - scaled.mean(axis=1))[:, None]
    return out.reshape(w_dense.shape), scale


def _linear_map(node: LayerNode, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """f(W, X) without bias, with channels on axis 1."""
    if node.kind == "dense":
        return x @ w.T
    a = node.attrs
    return T.conv2d(Tensor(x), Tensor(w), None, a.get("stride", 1), a.get("padding", 0)).data


def _channel_mean(y: np.ndarray) -> np.ndarray:
    return y.mean(axis=tuple(i for i in range(y.ndim) if i != 1))


def error_correct_layer(dense_layer: LayerNode, sparse_layer: LayerNode, mask: np.ndarray,
                        dense_inputs, per_channel: bool = True, eps: float = EC_EPS) -> LayerNode:
    """Return a corrected copy of ``sparse_layer``.

    Weights are moment-matched to the dense layer and re-masked; the bias is
    shifted so per-output-channel output means over ``dense_inputs`` match
    the dense layer's.
    """
    if dense_layer.kind != sparse_layer.kind or dense_layer.weight.shape != sparse_layer.weight.shape:
        raise T.ShapeError(f"{sparse_layer.id}: dense/sparse layers differ in kind or shape")
    x = dense_inputs.data if isinstance(dense_inputs, Tensor) else np.asarray(dense_inputs)
    if len(x) == 0:
        raise ValueError(f"{sparse_layer.id}: empty calibration batch")
    wd = dense_layer.weight.data
    corrected, _ = correct_weights(wd, sparse_layer.weight.data, per_channel, eps)
    corrected = corrected * mask
    shift = _channel_mean(_linear_map(dense_layer, wd, x)) - _channel_mean(
        _linear_map(dense_layer, corrected, x))
    out = LayerNode(sparse_layer.id, sparse_layer.kind, list(sparse_layer.inputs),
                    {"weight": Tensor(corrected),
                     "bias": Tensor(dense_layer.params["bias"].data + shift)},
                    dict(sparse_layer.attrs))
    return out


# ---------------------------------------------------------------------------
# Unit optimization
# ---------------------------------------------------------------------------


def _full_loss(graph: ModelGraph, unit: ReconstructionUnit, inputs: dict[str, np.ndarray],
               targets: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    n = len(targets)
    for i in range(0, n, chunk):
        feeds = {k: Tensor(v[i : i + chunk]) for k, v in inputs.items()}
        out = run_unit(graph, unit, feeds).data
        total += float(np.sum((out - targets[i : i + chunk]) ** 2))
    return total / n


def reconstruct_unit(graph: ModelGraph, unit: ReconstructionUnit, masks: dict[str, np.ndarray],
                     inputs: dict[str, np.ndarray], targets: np.ndarray, cfg: ReconConfig,
                     seed: Optional[int] = None) -> UnitResult:
    """Optimize the unit's prunable members of ``graph`` in place.

    ``inputs`` maps each unit input id to the calibration activations feeding
    it, ``targets`` holds the dense unit outputs. The loss is the per-sample
    squared error summed over output elements and averaged over the batch.
    Batch norm runs on frozen running statistics; only weights and biases of
    prunable members move, and masked weights stay exactly zero.
    """
    n = len(targets)
    if any(len(v) != n for v in inputs.values()):
        raise T.ShapeError("unit inputs and targets disagree on the number of samples")
    members = [graph.nodes[m] for m in unit.prunable(graph)]
    params, pmasks = [], {}
    for node in members:
        w, b = node.params["weight"], node.params["bias"]
        params += [w, b]
        if node.id in masks:
            pmasks[w] = masks[node.id]
    snapshot = [p.data.copy() for p in params]
    initial = _full_loss(graph, unit, inputs, targets)
    result = UnitResult(unit, initial, initial)
    if not math.isfinite(initial):
        result.aborted = True
        result.diagnostic = f"non-finite initial loss on unit {unit.output}"
        log.warning(result.diagnostic)
        return result
    if initial == 0.0:
        # already exact; minibatch round-off would only add noise
        return result
    opt = T.SGD(params, cfg.lr, cfg.momentum, pmasks)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    bs = min(cfg.batch_size, n)
    batches: list[np.ndarray] = []
    # divergence is detected and handled below, so numpy's overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.iterations):
            if not batches:
                perm = rng.permutation(n)
                batches = [perm[i : i + bs] for i in range(0, n, bs)][::-1]
            idx = batches.pop()
            feeds = {k: Tensor(v[idx]) for k, v in inputs.items()}
            with GradTape() as tape:
                tape.watch(*params)
                loss = T.mse(run_unit(graph, unit, feeds), Tensor(targets[idx]))
            value = loss.item()
            if not math.isfinite(value):
                for p, s in zip(params, snapshot):
                    p.data[...] = s
                result.aborted = True
                result.diagnostic = f"non-finite loss at iteration {it} on unit {unit.output}; weights restored"
                log.warning(result.diagnostic)
                return result
            result.trace.append(value)
            opt.step(tape.backward(loss))
        result.final_loss = _full_loss(graph, unit, inputs, targets)
    if not math.isfinite(result.final_loss):
        for p, s in zip(params, snapshot):
            p.data[...] = s
        result.final_loss = initial
        result.aborted = True
        result.diagnostic = f"non-finite final loss on unit {unit.output}; weights restored"
        log.warning(result.diagnostic)
    return result


# ---------------------------------------------------------------------------
# Whole-model driver
# ---------------------------------------------------------------------------


@dataclass
class ReconReport:
    units: list[UnitResult]
    unit_inputs: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def aborted(self) -> list[UnitResult]:
        return [u for u in self.units if u.aborted]


def _activations(graph: ModelGraph, x: np.ndarray, chunk: int = 256) -> dict[str, np.ndarray]:
    parts: dict[str, list[np.ndarray]] = {}
    for i in range(0, len(x), chunk):
        acts = forward(graph, Tensor(x[i : i + chunk]))
        for k, v in acts.items():
            parts.setdefault(k, []).append(v.data)
    out = {k: np.concatenate(v) for k, v in parts.items()}
    out[GRAPH_INPUT] = x
    return out


def run_reconstruction(dense: ModelGraph, sparse: ModelGraph, masks: dict[str, np.ndarray],
                       calib: np.ndarray, cfg: ReconConfig, keep_inputs: bool = False,
                       ) -> tuple[ModelGraph, ReconReport]:
    """Reconstruct ``sparse`` (modified in place and returned) against ``dense``."""
    if topo_order(dense) != topo_order(sparse):
        raise T.ShapeError("dense and sparse graphs are not structurally identical")
    calib = np.asarray(calib, dtype=np.float64)
    units = partition_units(sparse, cfg.granularity)
    dense_acts = _activations(dense, calib)
    sparse_acts = _activations(sparse, calib) if cfg.input_mode == "sparse" else None

    def prepare(unit: ReconstructionUnit) -> None:
        if not cfg.error_correction:
            return
        for lid in unit.prunable(sparse):
            src = sparse.nodes[lid].inputs or [GRAPH_INPUT]
            fixed = error_correct_layer(dense.nodes[lid], sparse.nodes[lid], masks[lid],
                                        dense_acts[src[0]], cfg.per_channel)
            sparse.nodes[lid].params.update(fixed.params)

    def solve(i: int, unit: ReconstructionUnit, source: dict[str, np.ndarray]) -> tuple[UnitResult, dict]:
        prepare(unit)
        ins = {k: source[k] for k in unit.inputs}
        res = reconstruct_unit(sparse, unit, masks, ins, dense_acts[unit.output], cfg,
                               seed=cfg.seed + 7919 * i)
        return res, ins

    results: list[tuple[UnitResult, dict]] = []
    if cfg.input_mode == "dense" and cfg.workers > 1:
        # units are independent given dense activations
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(lambda iu: solve(iu[0], iu[1], dense_acts), enumerate(units)))
    else:
        for i, unit in enumerate(units):
            source = dense_acts if cfg.input_mode == "dense" else sparse_acts
            results.append(solve(i, unit, source))
            if cfg.input_mode == "sparse" and i + 1 < len(units):
                sparse_acts = _activations(sparse, calib)
    report = ReconReport([r for r, _ in results], [ins for _, ins in results] if keep_inputs else [])
    return sparse, report
