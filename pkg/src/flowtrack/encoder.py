"""Masked transformer encoder over the grouped token sequence.

Each layer is pre-norm residual attention + FFN. The flow policy decides the
permission mask per layer; at the partition layer the search tokens are
split into target/non-target subsets from center-query attention, and
scheduled eliminations permanently drop the least relevant search tokens.

Relevance scores are computed from the layer's pre-softmax attention scores
with a dedicated softmax restricted to the permitted search keys; this keeps
them meaningful even under masks that block search keys for template queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import FlowPolicyError, ShapeError
from .flow_mask import (FlowPolicy, build_mask, partition_weights,
                        select_elimination, topk_partition)
from .tokenization import assemble


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder width/depth and the attached flow policy."""

    n_layers: int = 12
    d: int = 768
    h: int = 12
    ffn_dim: int = 0          # 0 means the conventional 4*d
    policy: FlowPolicy = field(default_factory=FlowPolicy)

    def __post_init__(self):
        if self.d % self.h:
            raise ShapeError(f"token dim {self.d} not divisible by {self.h} heads")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d)
        if self.ffn_dim < 1:
            raise ShapeError("ffn dim must be positive")
        if self.policy.n_layers != self.n_layers:
            raise FlowPolicyError(
                f"policy covers {self.policy.n_layers} layers, encoder has "
                f"{self.n_layers}")


class EncoderParams(list):
    """Per-layer parameter dicts, indexable like a list, plus the final
    normalization pair applied after the last layer."""

    def __init__(self, layers, final):
        super().__init__(layers)
        self.final = final


def init_encoder_params(store, cfg, rng, prefix="enc."):
    """Register per-layer attention/FFN parameters plus the final norm."""
    d, f = cfg.d, cfg.ffn_dim
    w_scale = 1.0 / np.sqrt(d)
    layers = []
    for i in range(cfg.n_layers):
        pre = f"{prefix}{i}."
        lp = {
            "ln1_g": store.add(pre + "ln1.gamma", np.ones(d)),
            "ln1_b": store.add(pre + "ln1.beta", np.zeros(d)),
            "wq": store.add(pre + "wq", rng.normal(scale=w_scale, size=(d, d))),
            "bq": store.add(pre + "bq", np.zeros(d)),
            "wk": store.add(pre + "wk", rng.normal(scale=w_scale, size=(d, d))),
            "bk": store.add(pre + "bk", np.zeros(d)),
            "wv": store.add(pre + "wv", rng.normal(scale=w_scale, size=(d, d))),
            "bv": store.add(pre + "bv", np.zeros(d)),
            "wo": store.add(pre + "wo", rng.normal(scale=w_scale, size=(d, d))),
            "bo": store.add(pre + "bo", np.zeros(d)),
            "ln2_g": store.add(pre + "ln2.gamma", np.ones(d)),
            "ln2_b": store.add(pre + "ln2.beta", np.zeros(d)),
            "w1": store.add(pre + "ffn.w1", rng.normal(scale=w_scale, size=(d, f))),
            "b1": store.add(pre + "ffn.b1", np.zeros(f)),
            "w2": store.add(pre + "ffn.w2",
                            rng.normal(scale=1.0 / np.sqrt(f), size=(f, d))),
            "b2": store.add(pre + "ffn.b2", np.zeros(d)),
        }
        layers.append(lp)
    final = (store.add(prefix + "final.gamma", np.ones(d)),
             store.add(prefix + "final.beta", np.zeros(d)))
    return EncoderParams(layers, final)


def _split_heads(t, h):
    n, d = t.data.shape
    dk = d // h
    return nx.transpose(nx.reshape(t, (n, h, dk)), (1, 0, 2))


def _merge_heads(t):
    h, n, dk = t.data.shape
    return nx.reshape(nx.transpose(t, (1, 0, 2)), (n, h * dk))


def _mha(tokens, mask, lp, h):
    """Masked multi-head attention; returns (output, scaled score array)."""
    n, d = tokens.data.shape
    if mask.shape != (n, n):
        raise ShapeError(f"mask {mask.shape} does not fit {n} tokens")
    dk = d // h
    q = _split_heads(nx.add(nx.matmul(tokens, lp["wq"]), lp["bq"]), h)
    k = _split_heads(nx.add(nx.matmul(tokens, lp["wk"]), lp["bk"]), h)
    v = _split_heads(nx.add(nx.matmul(tokens, lp["wv"]), lp["bv"]), h)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
    probs = nx.masked_softmax(scores, mask[None, :, :])
    ctx = _merge_heads(nx.matmul(probs, v))
    out = nx.add(nx.matmul(ctx, lp["wo"]), lp["bo"])
    return out, scores.data, probs.data


def mha_masked(tokens, mask, lp, h):
    """Multi-head attention restricted by the boolean permission mask."""
    return _mha(tokens, mask, lp, h)[0]


def encoder_layer(tokens, mask, lp, h, with_internals=False):
    """One pre-norm residual block: attention then FFN."""
    attn_in = nx.layer_norm(tokens, lp["ln1_g"], lp["ln1_b"])
    attn_out, scores, probs = _mha(attn_in, mask, lp, h)
    mid = nx.add(tokens, attn_out)
    ffn_in = nx.layer_norm(mid, lp["ln2_g"], lp["ln2_b"])
    hidden = nx.gelu(nx.add(nx.matmul(ffn_in, lp["w1"]), lp["b1"]))
    out = nx.add(mid, nx.add(nx.matmul(hidden, lp["w2"]), lp["b2"]))
    if with_internals:
        return out, scores, probs
    return out


@dataclass
class LayerRecord:
    """Post-layer bookkeeping: counts always, policy actions when they happened."""

    layer: int
    counts: tuple
    omega: np.ndarray = None
    xt_global: np.ndarray = None
    eliminated_global: np.ndarray = None
    attn: np.ndarray = None
    tokens: np.ndarray = None


@dataclass
class EncoderTrace:
    records: list = field(default_factory=list)

    def partition_records(self):
        return [r for r in self.records if r.xt_global is not None]

    def elimination_records(self):
        return [r for r in self.records if r.eliminated_global is not None]

    def format(self):
        """Structured text rendering, one record per line."""
        lines = []
        for r in self.records:
            parts = [f"layer={r.layer}",
                     "counts=" + ",".join(str(c) for c in r.counts)]
            if r.xt_global is not None:
                parts.append("xt=" + ",".join(str(i) for i in r.xt_global))
            if r.eliminated_global is not None:
                parts.append("dropped="
                             + ",".join(str(i) for i in r.eliminated_global))
            if r.omega is not None:
                parts.append("omega=" + ",".join(repr(v) for v in r.omega))
            lines.append(" ".join(parts))
        return "\n".join(lines)


def _restricted_omega(scores, layout, allowed_local, reduce):
    """Relevance scores from raw attention scores.

    Softmax runs over the permitted search keys only; other search keys get
    exactly zero. Rows are the center queries of the template and dynamic
    target groups.
    """
    rows = np.concatenate([layout.center_z(), layout.center_dt()]).astype(np.intp)
    allowed_local = np.asarray(allowed_local, dtype=np.intp)
    cols = layout.x_start + allowed_local
    block = scores[:, rows[:, None], cols[None, :]]
    e = np.exp(block - block.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    attn_rows = np.zeros((scores.shape[0], len(rows), layout.n_x))
    attn_rows[:, :, allowed_local] = p
    return partition_weights(attn_rows, layout, reduce=reduce)


def _remap_partition(part, drop):
    """Shift partition indices after dropping ``drop`` (sorted, not in xt)."""
    shift = lambda idx: idx - np.searchsorted(drop, idx)
    xb_kept = part.xb[~np.isin(part.xb, drop)]
    from .flow_mask import PartitionResult
    return PartitionResult(xt=shift(part.xt), xb=shift(xb_kept),
                           omega=np.delete(part.omega, drop))


def encode(z, dt, db, x, layout, enc_params, cfg,
           record_attn=False, record_tokens=False):
    """Run all layers with flow masking, partitioning and elimination.

    Returns (search_features, kept_search_indices, trace). kept indices are
    positions in the original search grid, ascending, matching the feature
    rows. A final normalization is applied after the last layer; per-layer
    trace records hold the raw residual-stream tokens.
    """
    policy = cfg.policy
    tokens = assemble(z, dt, db, x)
    if tokens.data.shape[0] != layout.total:
        raise ShapeError(
            f"{tokens.data.shape[0]} tokens but layout expects {layout.total}")
    if tokens.data.shape[1] != cfg.d:
        raise ShapeError("token dim does not match encoder config")
    if policy.total_eliminated() >= layout.n_x:
        raise FlowPolicyError("elimination schedule would drop every search token")

    elim_at = dict(policy.elimination)
    kept = np.arange(layout.n_x)
    partition = None
    trace = EncoderTrace()

    for layer in range(1, cfg.n_layers + 1):
        mask = build_mask(policy, layout, layer, partition=partition)
        tokens, scores, probs = encoder_layer(
            tokens, mask, enc_params[layer - 1], cfg.h, with_internals=True)

        rec = LayerRecord(layer=layer, counts=())
        omega = None

        if policy.uses_partition and layer >= policy.partition_layer:
            recompute = (partition is None
                         or policy.partition_mode == "per_layer")
            if recompute:
                allowed = (np.arange(layout.n_x) if partition is None
                           else partition.xt)
                omega = _restricted_omega(scores, layout, allowed,
                                          policy.omega_reduce)
                partition = topk_partition(omega, policy.k_top)
            else:
                omega = partition.omega
            rec.omega = omega
            rec.xt_global = np.sort(kept[partition.xt])

        p_elim = elim_at.get(layer, 0)
        if p_elim:
            if omega is None:
                omega = _restricted_omega(scores, layout,
                                          np.arange(layout.n_x),
                                          policy.omega_reduce)
                rec.omega = omega
            protect = partition.xt if partition is not None else None
            drop = select_elimination(omega, p_elim, protect=protect)
            rec.eliminated_global = kept[drop].copy()
            keep_rows = np.delete(np.arange(layout.total), layout.x_start + drop)
            tokens = nx.gather_rows(tokens, keep_rows)
            kept = np.delete(kept, drop)
            layout = layout.with_search_count(layout.n_x - p_elim)
            if partition is not None:
                partition = _remap_partition(partition, drop)

        rec.counts = (layout.n_z, layout.n_dt, layout.n_db, layout.n_x)
        if record_attn:
            rec.attn = probs
        if record_tokens:
            rec.tokens = tokens.data.copy()
        trace.records.append(rec)

    tokens = nx.layer_norm(tokens, enc_params.final[0], enc_params.final[1])
    search = tokens[layout.x_start:]
    return search, kept, trace
