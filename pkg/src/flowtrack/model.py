"""Full tracker model: geometry, parameters, and the tokens-to-maps forward.

Which token groups exist depends on the flow variant: the reduced ablation
variants drop the dynamic target and/or background ring entirely, matching
the interaction schemes they implement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import head as hd
from . import numerics as nx
from . import tokenization as tok
from .errors import GeometryError


@dataclass(frozen=True)
class ModelGeometry:
    """Crop sizes and patch size; the dynamic crop's central block must
    coincide with the template grid so both share one positional table."""

    template_size: int = 128
    search_size: int = 256
    dynamic_size: int = 192
    patch: int = 16

    def __post_init__(self):
        for name in ("template_size", "search_size", "dynamic_size"):
            v = getattr(self, name)
            if v < self.patch or v % self.patch:
                raise GeometryError(f"{name}={v} not divisible by patch "
                                    f"{self.patch}")
        if self.dynamic_size < self.template_size:
            raise GeometryError("dynamic region smaller than template")
        margin = self.dynamic_size - self.template_size
        if margin % 2 or (margin // 2) % self.patch:
            raise GeometryError(
                "template block not patch-aligned inside the dynamic region")

    @property
    def z_grid(self):
        s = self.template_size // self.patch
        return (s, s)

    @property
    def x_grid(self):
        s = self.search_size // self.patch
        return (s, s)

    @property
    def g(self):
        return self.search_size // self.patch

    @property
    def dyn_grid(self):
        s = self.dynamic_size // self.patch
        return (s, s)

    def dyn_split(self):
        return tok.split_dynamic_region(
            (self.dynamic_size, self.dynamic_size),
            (self.template_size, self.template_size), self.patch)

    @property
    def n_db(self):
        central, ring = self.dyn_split()
        return len(ring)


def variant_groups(variant):
    """(uses_dt, uses_db) for a flow variant's canonical token set."""
    if variant in ("baseline", "A"):
        return False, False
    if variant == "B":
        return True, False
    return True, True


class TrackerModel:
    """Owns the parameter store and runs tokens through encoder and head."""

    def __init__(self, geometry, enc_cfg, seed=0):
        if enc_cfg.d % 16:
            raise GeometryError("token dim must be divisible by 16 for the head")
        self.geometry = geometry
        self.enc_cfg = enc_cfg
        self.uses_dt, self.uses_db = variant_groups(enc_cfg.policy.variant)
        rng = np.random.default_rng(seed)
        self.store = nx.ParamStore()
        n_db = geometry.n_db if self.uses_db else 0
        self.embed_params = tok.EmbeddingParams(
            self.store, enc_cfg.d, geometry.patch,
            geometry.z_grid, geometry.x_grid, n_db, rng)
        self.enc_params = enc.init_encoder_params(self.store, enc_cfg, rng)
        self.head_params = hd.init_head_params(self.store, enc_cfg.d, rng)

    def layout(self):
        g = self.geometry
        dt_grid = g.z_grid if self.uses_dt else (0, 0)
        n_db = g.n_db if self.uses_db else 0
        return tok.make_layout(g.z_grid, dt_grid, n_db, g.x_grid)

    # -- tokenizers ------------------------------------------------------

    def tokenize_template(self, crop):
        patches = tok.patchify(crop, self.geometry.patch)
        return tok.embed(patches, self.embed_params, "template")

    def tokenize_search(self, crop):
        patches = tok.patchify(crop, self.geometry.patch)
        return tok.embed(patches, self.embed_params, "search")

    def tokenize_dynamic(self, crop):
        """Dynamic-region crop to (dt, db) token tensors per the variant."""
        if not self.uses_dt:
            return None, None
        central, ring = self.geometry.dyn_split()
        if not self.uses_db:
            # only the central block carries tokens; crop it out and embed
            # with the template tables
            pad = (self.geometry.dynamic_size - self.geometry.template_size) // 2
            inner = crop[pad:pad + self.geometry.template_size,
                         pad:pad + self.geometry.template_size]
            return self.tokenize_template(inner), None
        patches = tok.patchify(crop, self.geometry.patch)
        embedded = tok.embed(patches, self.embed_params, "dynamic",
                             dyn_split=(central, ring))
        return nx.gather_rows(embedded, central), nx.gather_rows(embedded, ring)

    # -- forward ---------------------------------------------------------

    def forward_tokens(self, z, dt, db, x, record_attn=False,
                       record_tokens=False):
        """Encode the grouped tokens and produce score maps.

        Returns (maps, kept_indices, trace).
        """
        search, kept, trace = enc.encode(
            z, dt, db, x, self.layout(), self.enc_params, self.enc_cfg,
            record_attn=record_attn, record_tokens=record_tokens)
        feature_map = hd.reassemble_map(search, kept, self.geometry.g)
        maps = hd.predict(feature_map, self.head_params)
        return maps, kept, trace

    def forward_crops(self, template_crop, dynamic_crop, search_crop,
                      record_attn=False):
        z = self.tokenize_template(template_crop)
        dt, db = (self.tokenize_dynamic(dynamic_crop)
                  if self.uses_dt else (None, None))
        x = self.tokenize_search(search_crop)
        return self.forward_tokens(z, dt, db, x, record_attn=record_attn)
