"""Prediction head: score maps over the search grid, box decoding, losses.

The encoder's surviving search features are scattered back onto the g x g
grid (eliminated cells zero), three small conv stacks produce classification
/ offset / size maps, and the best cell decodes to a normalized box. The
training loss combines a penalty-reduced focal term on the classification
map with generalized-IoU and L1 terms on the box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import InputError, NumericsError, ShapeError

LAMBDA_IOU = 2.0
LAMBDA_L1 = 5.0

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
_FOCAL_EPS = 1e-12

# Number of classification values clamped away from {0,1} across all
# focal_loss calls; exposed so long runs can report saturation.
focal_clamp_events = 0


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized crop coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0.0 and self.h > 0.0):
            raise InputError(f"box sides must be positive: {self}")
        if (self.cx + self.w / 2 <= 0.0 or self.cx - self.w / 2 >= 1.0
                or self.cy + self.h / 2 <= 0.0 or self.cy - self.h / 2 >= 1.0):
            raise InputError(f"box does not intersect the unit square: {self}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class ScoreMaps:
    """Sigmoid-bounded output maps; cls [g,g], offset and size [2,g,g]."""

    cls: nx.Tensor
    offset: nx.Tensor
    size: nx.Tensor

    def __post_init__(self):
        g = self.cls.data.shape[0]
        if self.cls.data.shape != (g, g):
            raise ShapeError("classification map must be square")
        if self.offset.data.shape != (2, g, g) or self.size.data.shape != (2, g, g):
            raise ShapeError("offset/size maps must be [2, g, g]")
        for arr in (self.cls.data, self.offset.data, self.size.data):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise NumericsError("score maps must lie in [0, 1]")

    @property
    def g(self):
        return self.cls.data.shape[0]


def reassemble_map(search_features, kept_indices, g):
    """Scatter kept search features back to [d, g, g]; dropped cells are zero."""
    kept_indices = np.asarray(kept_indices, dtype=np.intp)
    if kept_indices.size and kept_indices.max() >= g * g:
        raise ShapeError("kept index outside the search grid")
    grid = nx.scatter_rows(search_features, kept_indices, g * g)
    return nx.reshape(nx.transpose(grid, (1, 0)),
                      (search_features.data.shape[1], g, g))


def init_head_params(store, d, rng, prefix="head."):
    """Register the three conv stacks. d must be divisible by 16.

    Each branch: four 3x3 conv / channel-norm / relu layers halving channels,
    then a 1x1 projection. Normalising each channel over its spatial extent
    keeps the stack trainable: without it the focal term's background
    pressure can push every relu unit negative and freeze the map. The
    classification projection bias starts negative so early maps are
    low-confidence rather than saturated.
    """
    if d % 16:
        raise ShapeError(f"head needs d divisible by 16, got {d}")
    params = {}
    for branch, out_ch in (("cls", 1), ("offset", 2), ("size", 2)):
        layers = []
        cin = d
        for i in range(4):
            cout = cin // 2
            scale = np.sqrt(2.0 / (cin * 9))
            w = store.add(f"{prefix}{branch}.conv{i}.w",
                          rng.normal(scale=scale, size=(cout, cin, 3, 3)))
            b = store.add(f"{prefix}{branch}.conv{i}.b", np.zeros(cout))
            gamma = store.add(f"{prefix}{branch}.norm{i}.gamma", np.ones(cout))
            beta = store.add(f"{prefix}{branch}.norm{i}.beta", np.zeros(cout))
            layers.append((w, b, gamma, beta))
            cin = cout
        scale = np.sqrt(1.0 / cin)
        w = store.add(f"{prefix}{branch}.proj.w",
                      rng.normal(scale=scale, size=(out_ch, cin, 1, 1)))
        bias0 = -2.0 if branch == "cls" else 0.0
        b = store.add(f"{prefix}{branch}.proj.b", np.full(out_ch, bias0))
        layers.append((w, b))
        params[branch] = layers
    return params


def _branch(feat, layers):
    x = feat
    for w, b, gamma, beta in layers[:-1]:
        x = nx.relu(nx.instance_norm(nx.conv2d(x, w, b, padding=1),
                                     gamma, beta))
    w, b = layers[-1]
    return nx.sigmoid(nx.conv2d(x, w, b, padding=0))


def predict(feature_map, head_params):
    """Run the three conv branches over a [d, g, g] feature map."""
    cls = _branch(feature_map, head_params["cls"])
    g = cls.data.shape[-1]
    return ScoreMaps(cls=nx.reshape(cls, (g, g)),
                     offset=_branch(feature_map, head_params["offset"]),
                     size=_branch(feature_map, head_params["size"]))


def decode_box(maps):
    """Highest-confidence cell plus its offset/size, as a normalized box.

    Ties at the maximum pick the smallest row-major cell. Offset channel 0
    is x, channel 1 is y; size channel 0 is width, 1 height.
    """
    cls = maps.cls.data
    g = maps.g
    flat = int(np.argmax(cls))
    i, j = divmod(flat, g)
    off = maps.offset.data[:, i, j]
    size = maps.size.data[:, i, j]
    box = Box(cx=(j + off[0]) / g, cy=(i + off[1]) / g,
              w=float(size[0]), h=float(size[1]))
    return box, float(cls[i, j])


def gaussian_target(g, box, sigma_gain=1.0):
    """Classification target: gaussian bump, peak cell exactly 1.

    sigma = max(1, g * min(w, h) / 4) cells, optionally scaled.
    """
    j0 = min(g - 1, max(0, int(box.cx * g)))
    i0 = min(g - 1, max(0, int(box.cy * g)))
    sigma = max(1.0, g * min(box.w, box.h) / 4.0) * sigma_gain
    ii, jj = np.mgrid[0:g, 0:g]
    gt = np.exp(-((ii - i0) ** 2 + (jj - j0) ** 2) / (2.0 * sigma * sigma))
    gt[i0, j0] = 1.0
    return gt


def focal_loss(cls_map, gt):
    """Penalty-reduced pixelwise focal loss against a gaussian target.

    Peak cells (gt == 1) contribute -(1-p)^2 log p; all others
    -(1-gt)^4 p^2 log(1-p). Normalized by the number of peak cells.
    Classification values outside (0,1) are clamped at 1e-12 and counted
    in ``focal_clamp_events``.
    """
    global focal_clamp_events
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != cls_map.data.shape:
        raise ShapeError("target shape does not match classification map")
    if gt.min() < 0.0 or gt.max() > 1.0:
        raise InputError("target values must lie in [0, 1]")
    peaks = gt == 1.0
    n_peaks = int(peaks.sum())
    if n_peaks != 1:
        raise InputError(f"target must have exactly one peak cell, has {n_peaks}")

    clipped = int(np.sum((cls_map.data < _FOCAL_EPS)
                         | (cls_map.data > 1.0 - _FOCAL_EPS)))
    if clipped:
        focal_clamp_events += clipped
    p = nx.clamp(cls_map, _FOCAL_EPS, 1.0 - _FOCAL_EPS)

    pos = peaks.astype(np.float64)
    neg_w = ((1.0 - gt) ** FOCAL_BETA) * (1.0 - pos)
    one_minus_p = nx.add(nx.mul(p, -1.0), 1.0)
    pos_term = nx.mul(nx.mul(nx.mul(one_minus_p, one_minus_p), nx.log(p)),
                      nx.Tensor(-pos))
    neg_term = nx.mul(nx.mul(nx.mul(p, p), nx.log(one_minus_p)),
                      nx.Tensor(-neg_w))
    return nx.mul(nx.reduce_sum(nx.add(pos_term, neg_term)), 1.0 / n_peaks)


def _as_box_tensor(box):
    if isinstance(box, nx.Tensor):
        if box.data.shape != (4,):
            raise ShapeError("box tensor must have shape [4]")
        return box
    return nx.Tensor(box.as_array())


def giou_loss(pred, gt):
    """1 - GIoU between a predicted box and a ground-truth Box.

    ``pred`` may be a Box or a [cx, cy, w, h] tensor (gradients flow
    through the tensor path). Degenerate ground truth is an error.
    """
    if not isinstance(gt, Box):
        raise InputError("ground-truth must be a Box")
    if gt.w * gt.h <= 0.0:
        raise InputError("degenerate ground-truth box")
    p = _as_box_tensor(pred)
    px0 = nx.add(p[0], nx.mul(p[2], -0.5))
    px1 = nx.add(p[0], nx.mul(p[2], 0.5))
    py0 = nx.add(p[1], nx.mul(p[3], -0.5))
    py1 = nx.add(p[1], nx.mul(p[3], 0.5))
    gx0, gy0 = gt.cx - gt.w / 2, gt.cy - gt.h / 2
    gx1, gy1 = gt.cx + gt.w / 2, gt.cy + gt.h / 2

    iw = nx.maximum(nx.add(nx.minimum(px1, gx1), nx.mul(nx.maximum(px0, gx0), -1.0)), 0.0)
    ih = nx.maximum(nx.add(nx.minimum(py1, gy1), nx.mul(nx.maximum(py0, gy0), -1.0)), 0.0)
    inter = nx.mul(iw, ih)
    area_p = nx.mul(nx.add(px1, nx.mul(px0, -1.0)), nx.add(py1, nx.mul(py0, -1.0)))
    # measure both areas through corner differences; this makes the identity
    # case cancel exactly (giou_loss(a, a) == 0.0, not just close)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    union = nx.add(nx.add(area_p, area_g), nx.mul(inter, -1.0))
    iou = nx.div(inter, union)

    cw = nx.add(nx.maximum(px1, gx1), nx.mul(nx.minimum(px0, gx0), -1.0))
    ch = nx.add(nx.maximum(py1, gy1), nx.mul(nx.minimum(py0, gy0), -1.0))
    c_area = nx.mul(cw, ch)
    giou = nx.add(iou, nx.mul(nx.div(nx.add(c_area, nx.mul(union, -1.0)),
                                     c_area), -1.0))
    return nx.add(nx.mul(giou, -1.0), 1.0)


def l1_loss(pred, gt):
    """Mean absolute difference over (cx, cy, w, h) in normalized coords."""
    p = _as_box_tensor(pred)
    g = gt.as_array() if isinstance(gt, Box) else np.asarray(gt)
    return nx.reduce_mean(nx.abs_(nx.add(p, nx.Tensor(-g))))


def total_loss(cls_loss, giou, l1, lambda_iou=LAMBDA_IOU, lambda_l1=LAMBDA_L1):
    """Weighted sum: cls + 2 * giou + 5 * l1 (weights configurable)."""
    parts = []
    for v in (cls_loss, giou, l1):
        t = v if isinstance(v, nx.Tensor) else nx.Tensor(np.asarray(v, dtype=np.float64))
        if t.data.size != 1:
            raise ShapeError("loss components must be scalar")
        parts.append(t)
    return nx.add(parts[0],
                  nx.add(nx.mul(parts[1], lambda_iou),
                         nx.mul(parts[2], lambda_l1)))


def training_loss(maps, gt_box, sigma_gain=1.0,
                  lambda_iou=LAMBDA_IOU, lambda_l1=LAMBDA_L1):
    """Complete training loss for one sample.

    Focal term over the whole classification map; box terms teacher-forced
    at the cell containing the ground-truth center.
    """
    g = maps.g
    gt_map = gaussian_target(g, gt_box, sigma_gain)
    j0 = min(g - 1, max(0, int(gt_box.cx * g)))
    i0 = min(g - 1, max(0, int(gt_box.cy * g)))
    pred = nx.concat([
        nx.mul(nx.add(maps.offset[0, i0, j0], float(j0)), 1.0 / g).reshape(1),
        nx.mul(nx.add(maps.offset[1, i0, j0], float(i0)), 1.0 / g).reshape(1),
        maps.size[0, i0, j0].reshape(1),
        maps.size[1, i0, j0].reshape(1),
    ])
    return total_loss(focal_loss(maps.cls, gt_map),
                      giou_loss(pred, gt_box),
                      l1_loss(pred, gt_box),
                      lambda_iou=lambda_iou, lambda_l1=lambda_l1)


def csv_grid(arr):
    """Render a 2-D array as CSV text with full float precision."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ShapeError("csv_grid expects a 2-D array")
    return "\n".join(",".join(repr(float(v)) for v in row) for row in arr)
