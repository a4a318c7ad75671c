"""Per-layer sparsity allocation and magnitude-mask realization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import ModelGraph, clone

ALLOCATORS = ("uniform", "magnitude", "erk", "custom")


class AllocationError(ValueError):
    pass


@dataclass
class AllocationPlan:
    rates: dict[str, float]
    global_rate: float
    strategy: str
    exempt: tuple[str, ...] = ()
    # filled in by global magnitude, which fixes exact per-layer zero counts
    zero_counts: Optional[dict[str, int]] = field(default=None, repr=False)

    def budget_error(self, counts: dict[str, int]) -> float:
        """|planned zeros - round(global_rate * prunable total)| over non-exempt layers."""
        live = [lid for lid in self.rates if lid not in self.exempt]
        total = sum(counts[lid] for lid in live)
        planned = sum(self.rates[lid] * counts[lid] for lid in live)
        return abs(planned - round(self.global_rate * total))


def _check_rate(rate: float) -> None:
    if not (0.0 <= rate < 1.0) or math.isnan(rate):
        raise AllocationError(f"global rate must lie in [0, 1), got {rate}")


def layer_counts(graph: ModelGraph) -> dict[str, int]:
    return {lid: graph.nodes[lid].weight.size for lid in graph.prunable_ids()}


def exempt_layers(graph: ModelGraph, keep_last_dense: bool) -> tuple[str, ...]:
    ids = graph.prunable_ids()
    return (ids[-1],) if keep_last_dense and ids else ()


def allocate_uniform(graph: ModelGraph, global_rate: float, keep_last_dense: bool = False) -> AllocationPlan:
    _check_rate(global_rate)
    exempt = exempt_layers(graph, keep_last_dense)
    rates = {lid: (0.0 if lid in exempt else float(global_rate)) for lid in graph.prunable_ids()}
    return AllocationPlan(rates, global_rate, "uniform", exempt)


def _tie_order(graph: ModelGraph, lids: list[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenated scores and (layer rank, flat index) keys in tie-rule order."""
    lids = sorted(lids)
    scores, layer_key, flat = [], [], []
    for rank, lid in enumerate(lids):
        w = graph.nodes[lid].weight.data.ravel()
        scores.append(w * w)
        layer_key.append(np.full(w.size, rank))
        flat.append(np.arange(w.size))
    return np.concatenate(scores), np.concatenate(layer_key), np.concatenate(flat)


def allocate_global_magnitude(graph: ModelGraph, global_rate: float,
                              keep_last_dense: bool = False) -> AllocationPlan:
    """Zero the round(rate * total) globally smallest w^2 across non-exempt layers."""
    _check_rate(global_rate)
    exempt = exempt_layers(graph, keep_last_dense)
    live = sorted(lid for lid in graph.prunable_ids() if lid not in exempt)
    counts = layer_counts(graph)
    total = sum(counts[lid] for lid in live)
    k = int(round(global_rate * total))
    zeros = {lid: 0 for lid in graph.prunable_ids()}
    if k and live:
        scores, layer_key, flat = _tie_order(graph, live)
        # lexsort: last key is primary
        order = np.lexsort((flat, layer_key, scores))[:k]
        hit = np.bincount(layer_key[order], minlength=len(live))
        zeros.update({lid: int(hit[i]) for i, lid in enumerate(live)})
    rates = {lid: zeros[lid] / counts[lid] for lid in graph.prunable_ids()}
    return AllocationPlan(rates, global_rate, "magnitude", exempt, zero_counts=zeros)


def erk_score(graph: ModelGraph, lid: str) -> float:
    w = graph.nodes[lid].weight.shape
    if len(w) == 4:
        cout, cin, kh, kw = w
        return (cin + cout + kh + kw) / (cin * cout * kh * kw)
    n_out, n_in = w
    return (n_in + n_out) / (n_in * n_out)


def erk_densities(scores: dict[str, float], counts: dict[str, int], density: float) -> dict[str, float]:
    """Water-fill d_l = min(1, eps * s_l) so that sum d_l * n_l = density * sum n_l."""
    budget = density * sum(counts.values())
    clipped: set[str] = set()
    while True:
        free = [lid for lid in scores if lid not in clipped]
        if not free:
            return {lid: 1.0 for lid in scores}
        remaining = budget - sum(counts[lid] for lid in clipped)
        eps = remaining / sum(scores[lid] * counts[lid] for lid in free)
        over = {lid for lid in free if eps * scores[lid] > 1.0}
        if not over:
            break
        clipped |= over
    dens = {lid: (1.0 if lid in clipped else eps * scores[lid]) for lid in scores}
    return dens


def allocate_erk(graph: ModelGraph, global_rate: float, keep_last_dense: bool = False) -> AllocationPlan:
    _check_rate(global_rate)
    exempt = exempt_layers(graph, keep_last_dense)
    counts = layer_counts(graph)
    live = [lid for lid in graph.prunable_ids() if lid not in exempt]
    dens = erk_densities({lid: erk_score(graph, lid) for lid in live},
                         {lid: counts[lid] for lid in live}, 1.0 - global_rate)
    rates = {lid: (0.0 if lid in exempt else 1.0 - dens[lid]) for lid in graph.prunable_ids()}
    return AllocationPlan(rates, global_rate, "erk", exempt)


def allocate_custom(graph: ModelGraph, global_rate: float, rates: dict[str, float],
                    keep_last_dense: bool = False) -> AllocationPlan:
    """Adopt an externally learned plan after validating it."""
    _check_rate(global_rate)
    ids = graph.prunable_ids()
    missing = [lid for lid in ids if lid not in rates]
    if missing:
        raise AllocationError(f"plan is missing layer(s) {missing}")
    unknown = [lid for lid in rates if lid not in ids]
    if unknown:
        raise AllocationError(f"plan names unknown layer(s) {unknown}")
    for lid, r in rates.items():
        if not (0.0 <= r <= 1.0) or math.isnan(r):
            raise AllocationError(f"rate for {lid} out of range: {r}")
    exempt = exempt_layers(graph, keep_last_dense)
    if any(rates[lid] != 0.0 for lid in exempt):
        raise AllocationError(f"exempt layer(s) {list(exempt)} must have rate 0")
    plan = AllocationPlan({lid: float(rates[lid]) for lid in ids}, global_rate, "custom", exempt)
    err = plan.budget_error(layer_counts(graph))
    live = len(ids) - len(exempt)
    if err > live:
        raise AllocationError(f"plan misses the global budget by {err:.1f} elements (> {live})")
    return plan


def allocate(graph: ModelGraph, allocator: str, global_rate: float, keep_last_dense: bool = False,
             rates: Optional[dict[str, float]] = None) -> AllocationPlan:
    if allocator == "uniform":
        return allocate_uniform(graph, global_rate, keep_last_dense)
    if allocator in ("magnitude", "l2norm", "global_magnitude"):
        return allocate_global_magnitude(graph, global_rate, keep_last_dense)
    if allocator == "erk":
        return allocate_erk(graph, global_rate, keep_last_dense)
    if allocator == "custom":
        if rates is None:
            raise AllocationError("custom allocator needs a plan")
        return allocate_custom(graph, global_rate, rates, keep_last_dense)
    raise AllocationError(f"unknown allocator {allocator!r}")


def zero_count(rate: float, count: int) -> int:
    # guard against rate*count landing a hair under an integer
    return min(count, int(math.floor(rate * count + 1e-9)))


def layer_mask(w: np.ndarray, n_zero: int) -> np.ndarray:
    """Keep-mask zeroing the n_zero smallest w^2 (ties: lower flat index first)."""
    flat = w.ravel()
    mask = np.ones(flat.size, dtype=bool)
    if n_zero:
        order = np.lexsort((np.arange(flat.size), flat * flat))
        mask[order[:n_zero]] = False
    return mask.reshape(w.shape)


def apply_plan(graph: ModelGraph, plan: AllocationPlan) -> tuple[dict[str, np.ndarray], ModelGraph]:
    """Realize ``plan`` as magnitude masks; return (masks, sparsified clone)."""
    ids = graph.prunable_ids()
    if set(plan.rates) != set(ids):
        raise AllocationError(
            f"plan layers {sorted(plan.rates)} do not match prunable layers {sorted(ids)}"
        )
    sparse = clone(graph)
    masks = {}
    for lid in ids:
        w = sparse.nodes[lid].weight.data
        if plan.zero_counts is not None:
            nz = plan.zero_counts[lid]
        else:
            nz = zero_count(plan.rates[lid], w.size)
        m = layer_mask(w, nz)
        w *= m
        masks[lid] = m
    return masks, sparse


def achieved_sparsity(masks: dict[str, np.ndarray]) -> float:
    total = sum(m.size for m in masks.values())
    return sum(int((~m).sum()) for m in masks.values()) / total if total else 0.0


def layer_sparsity(graph: ModelGraph) -> dict[str, float]:
    """Fraction of exactly-zero weights per prunable layer."""
    return {
        lid: float(np.count_nonzero(graph.nodes[lid].weight.data == 0) / graph.nodes[lid].weight.size)
        for lid in graph.prunable_ids()
    }
