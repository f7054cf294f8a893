"""Attention permission matrices, search-token relevance scores and pruning.

A flow variant names which query-group/key-group interactions are blocked.
Early layers distinguish groups [template z, dynamic target dt, background
ring db, search x]; once the search tokens are partitioned into target (xt)
and non-target (xb) subsets, deep layers apply a finer scheme. Masks are
boolean [n x n] matrices over the unreordered token order; True = the key
may flow into the query.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FlowPolicyError

VARIANTS = ("baseline", "A", "B", "C", "D", "E", "full")

# Group codes used to index the blocked tables.
_Z, _DT, _DB, _X, _XB = 0, 1, 2, 3, 4
_XT = _X   # deep stage reuses the x code for target search tokens

# Blocked (query_group, key_group) pairs per variant. "k blocked for q"
# means information from key-group k may not flow into query-group q.
_EARLY_FULL = ((_Z, _X), (_DT, _X), (_DB, _X), (_Z, _DB))
_EARLY_BLOCKED = {
    "baseline": (),
    "A": ((_Z, _X),),
    "B": ((_Z, _X), (_DT, _X)),
    "C": _EARLY_FULL,
    "D": _EARLY_FULL,
    "E": _EARLY_FULL,
    "full": _EARLY_FULL,
}
_DEEP_BLOCKED = {
    "D": ((_Z, _XB), (_DT, _XB), (_DB, _XB), (_Z, _DB), (_DB, _XT)),
    "full": ((_Z, _XB), (_DT, _XB), (_DB, _XB), (_Z, _DB), (_DB, _XT)),
    "E": ((_Z, _XB), (_DT, _XB), (_Z, _DB), (_DB, _XT)),
}
_PARTITION_VARIANTS = frozenset(_DEEP_BLOCKED)


@dataclass(frozen=True)
class FlowPolicy:
    """Which flows are blocked, when to partition, how much to prune."""

    variant: str = "full"
    partition_layer: int = 10
    k_top: int = 64
    elimination: tuple = ((7, 64),)
    n_layers: int = 12
    partition_mode: str = "per_layer"   # or "once"
    omega_reduce: str = "mean"          # or "max"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise FlowPolicyError(f"unknown variant: {self.variant!r}")
        if not 1 <= self.partition_layer <= self.n_layers:
            raise FlowPolicyError(
                f"partition layer {self.partition_layer} outside [1, {self.n_layers}]")
        if self.k_top < 1:
            raise FlowPolicyError(f"k_top must be >= 1, got {self.k_top}")
        if self.partition_mode not in ("per_layer", "once"):
            raise FlowPolicyError(f"bad partition mode: {self.partition_mode!r}")
        if self.omega_reduce not in ("mean", "max"):
            raise FlowPolicyError(f"bad omega reduce: {self.omega_reduce!r}")
        seen = set()
        for entry in self.elimination:
            layer, count = entry
            if not 1 <= layer <= self.n_layers:
                raise FlowPolicyError(f"elimination layer {layer} out of range")
            if count < 0:
                raise FlowPolicyError(f"negative elimination count at layer {layer}")
            if layer in seen:
                raise FlowPolicyError(f"duplicate elimination layer {layer}")
            seen.add(layer)
        object.__setattr__(self, "elimination",
                           tuple(sorted(tuple(e) for e in self.elimination)))

    @property
    def uses_partition(self):
        return self.variant in _PARTITION_VARIANTS

    def total_eliminated(self):
        return sum(c for _, c in self.elimination)


@dataclass(frozen=True)
class PartitionResult:
    """Search tokens split into target (xt) and non-target (xb) subsets.

    Indices are local to the current search-token sequence. ``xt`` is ranked
    by descending relevance, ``xb`` ascends by index.
    """

    xt: np.ndarray
    xb: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        merged = np.sort(np.concatenate([self.xt, self.xb]))
        if not np.array_equal(merged, np.arange(len(self.omega))):
            raise FlowPolicyError("xt/xb do not partition the search tokens")


def _group_codes(layout, partition):
    """Per-token group code arrays for the current layout.

    With a partition, search tokens split into xt (code _XT) and xb (_XB).
    """
    codes = np.empty(layout.total, dtype=np.int8)
    s = layout.group_slices()
    codes[s["z"]] = _Z
    codes[s["dt"]] = _DT
    codes[s["db"]] = _DB
    codes[s["x"]] = _X
    if partition is not None:
        codes[layout.x_start + partition.xb] = _XB
    return codes


def _allowed_from_pairs(codes, blocked_pairs):
    table = np.ones((5, 5), dtype=bool)
    for q, k in blocked_pairs:
        table[q, k] = False
    return table[codes[:, None], codes[None, :]]


def build_mask(policy, layout, layer, partition=None):
    """Boolean permission matrix for one encoder layer.

    Partition rules: variants without token partitioning never accept one.
    Partitioning variants require it strictly after the partition layer,
    reject it before, and accept either at the partition layer itself (the
    layer runs early-masked while the partition is being computed, but the
    deep mask is already well-defined once it exists).
    """
    if not 1 <= layer <= policy.n_layers:
        raise FlowPolicyError(f"layer {layer} outside [1, {policy.n_layers}]")
    if not policy.uses_partition:
        if partition is not None:
            raise FlowPolicyError(
                f"variant {policy.variant} does not use a partition")
        deep = False
    else:
        if layer < policy.partition_layer:
            if partition is not None:
                raise FlowPolicyError(
                    f"partition supplied before layer {policy.partition_layer}")
            deep = False
        elif layer == policy.partition_layer:
            deep = partition is not None
        else:
            if partition is None:
                raise FlowPolicyError(
                    f"partition required at layer {layer} "
                    f"(>{policy.partition_layer})")
            deep = True
    if partition is not None and len(partition.omega) != layout.n_x:
        raise FlowPolicyError("partition does not match current search count")

    codes = _group_codes(layout, partition if deep else None)
    pairs = (_DEEP_BLOCKED[policy.variant] if deep
             else _EARLY_BLOCKED[policy.variant])
    allowed = _allowed_from_pairs(codes, pairs)
    if not np.all(allowed.diagonal()):
        raise FlowPolicyError("self-attention blocked: malformed rule table")
    if not np.all(allowed.any(axis=1)):
        raise FlowPolicyError("mask has a fully blocked query row")
    return allowed


def partition_weights(attn_rows, layout, reduce="mean"):
    """Aggregate center-query attention into one relevance score per search key.

    ``attn_rows`` is [heads, n_center, n_x_current]: the post-softmax
    attention of the template center queries followed by the dynamic-target
    center queries, restricted to current search keys. Each group's rows are
    reduced over heads and queries, then the two group scores are summed.
    """
    attn_rows = np.asarray(attn_rows, dtype=np.float64)
    if attn_rows.ndim != 3:
        raise FlowPolicyError("attention rows must be [h, n_center, n_x]")
    n_cz = len(layout.center_z())
    n_cdt = len(layout.center_dt())
    if n_cz == 0:
        raise FlowPolicyError("empty template center set")
    if attn_rows.shape[1] != n_cz + n_cdt:
        raise FlowPolicyError(
            f"expected {n_cz}+{n_cdt} center rows, got {attn_rows.shape[1]}")
    if attn_rows.shape[2] != layout.n_x:
        raise FlowPolicyError("attention keys do not match current search count")

    z_rows = attn_rows[:, :n_cz, :]
    dt_rows = attn_rows[:, n_cz:, :]
    if reduce == "mean":
        omega = z_rows.mean(axis=(0, 1))
        if n_cdt:
            omega = omega + dt_rows.mean(axis=(0, 1))
    elif reduce == "max":
        omega = z_rows.max(axis=(0, 1))
        if n_cdt:
            omega = omega + dt_rows.max(axis=(0, 1))
    else:
        raise FlowPolicyError(f"bad omega reduce: {reduce!r}")
    return omega


def topk_partition(omega, k):
    """Split search tokens into the k most relevant and the rest.

    Ties keep the lower index. xt is ordered by descending score (stable),
    xb by ascending index.
    """
    omega = np.asarray(omega, dtype=np.float64)
    n = len(omega)
    if not 1 <= k <= n:
        raise FlowPolicyError(f"top-k of {k} outside [1, {n}]")
    order = np.argsort(-omega, kind="stable")
    xt = order[:k].copy()
    mask = np.ones(n, dtype=bool)
    mask[xt] = False
    xb = np.flatnonzero(mask)
    return PartitionResult(xt=xt, xb=xb, omega=omega.copy())


def select_elimination(omega, p_elim, protect=None):
    """Indices of the ``p_elim`` least relevant tokens, ascending.

    Ties drop the higher index first (the mirror of topk_partition's rule,
    so the two selections never disagree on equal scores). Indices listed in
    ``protect`` are never dropped.
    """
    omega = np.asarray(omega, dtype=np.float64)
    n = len(omega)
    if not 0 <= p_elim < n:
        raise FlowPolicyError(f"elimination count {p_elim} outside [0, {n})")
    if p_elim == 0:
        return np.zeros(0, dtype=np.intp)
    candidates = np.arange(n)
    if protect is not None and len(protect):
        keep = np.ones(n, dtype=bool)
        keep[np.asarray(protect, dtype=np.intp)] = False
        candidates = candidates[keep]
    if p_elim > len(candidates):
        raise FlowPolicyError(
            f"cannot eliminate {p_elim} of {len(candidates)} candidates")
    # primary: ascending score; secondary: descending index
    order = candidates[np.lexsort((-candidates, omega[candidates]))]
    return np.sort(order[:p_elim])


def format_mask(mask):
    """Render a boolean mask as lines of 0/1 characters."""
    mask = np.asarray(mask, dtype=bool)
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask)


def dump_mask(mask, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_mask(mask) + "\n")
