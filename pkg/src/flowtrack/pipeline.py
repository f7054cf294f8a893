"""Stateful per-sequence tracking: crops, coordinate mapping, dynamic updates.

Boxes at the io boundary follow the x,y,w,h top-left convention, one
comma-separated line per frame. Internally boxes are kept center-based in
frame pixels. The template tokens are frozen at initialization; the dynamic
target/background tokens refresh every fixed interval from the
highest-confidence frame of that window, gated by a confidence threshold.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import head as hd
from . import images
from .errors import InputError, TrackingError
from .model import ModelGeometry


@dataclass(frozen=True)
class RunConfig:
    """Crop scale factors and dynamic-update behavior."""

    geometry: ModelGeometry = field(default_factory=ModelGeometry)
    search_factor: float = 4.0
    template_factor: float = 2.0
    update_interval: int = 25
    update_threshold: float = 0.7

    def __post_init__(self):
        if self.search_factor <= 0 or self.template_factor <= 0:
            raise InputError("crop factors must be positive")
        if self.update_interval < 1:
            raise InputError("update interval must be >= 1")

    @property
    def dynamic_factor(self):
        g = self.geometry
        return self.template_factor * g.dynamic_size / g.template_size


@dataclass
class TrackerState:
    """Per-sequence mutable state; template tokens never change after init."""

    z_tokens: object
    dt_tokens: object
    db_tokens: object
    last_box: tuple            # (cx, cy, w, h) frame pixels
    last_confidence: float
    frame_index: int
    best_confidence: float = -1.0
    best_dynamic_crop: np.ndarray = None
    window_len: int = 0


def _crop_side(box_wh, factor):
    w, h = box_wh
    side = factor * float(np.sqrt(w * h))
    if not np.isfinite(side) or side <= 0.0:
        raise TrackingError(f"degenerate crop side {side} from box size {box_wh}")
    return side


def map_box_to_frame(box, crop_center, side):
    """Normalized crop box -> (cx, cy, w, h) in frame pixels."""
    x0 = crop_center[0] - side / 2.0
    y0 = crop_center[1] - side / 2.0
    return (x0 + box.cx * side, y0 + box.cy * side, box.w * side, box.h * side)


def map_box_to_crop(frame_box, crop_center, side):
    """(cx, cy, w, h) frame pixels -> normalized crop coordinates."""
    x0 = crop_center[0] - side / 2.0
    y0 = crop_center[1] - side / 2.0
    cx, cy, w, h = frame_box
    return ((cx - x0) / side, (cy - y0) / side, w / side, h / side)


def _center_box_from_xywh(xywh):
    x, y, w, h = xywh
    return (x + w / 2.0, y + h / 2.0, w, h)


def _xywh_from_center_box(box):
    cx, cy, w, h = box
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def _dynamic_crop(frame, box, cfg):
    side = _crop_side(box[2:], cfg.dynamic_factor)
    return images.crop_and_resize(frame, box[:2], side,
                                  cfg.geometry.dynamic_size)


def search_crop(frame, box, cfg):
    """Search-region crop centered on a (cx, cy, w, h) box; returns
    (crop, side) so predicted boxes can be mapped back to the frame."""
    side = _crop_side(box[2:], cfg.search_factor)
    crop = images.crop_and_resize(np.asarray(frame, dtype=np.float64),
                                  box[:2], side, cfg.geometry.search_size)
    return crop, side


def init(frame, gt_xywh, model, cfg):
    """Build tracker state from the first frame and its ground-truth box."""
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape[:2]
    x, y, w, h = gt_xywh
    if w <= 0 or h <= 0:
        raise InputError(f"initial box has non-positive size: {gt_xywh}")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise InputError(f"initial box {gt_xywh} outside {W}x{H} frame")

    box = _center_box_from_xywh(gt_xywh)
    t_side = _crop_side(box[2:], cfg.template_factor)
    template = images.crop_and_resize(frame, box[:2], t_side,
                                      cfg.geometry.template_size)
    z = model.tokenize_template(template)
    dt, db = model.tokenize_dynamic(_dynamic_crop(frame, box, cfg))
    return TrackerState(z_tokens=z, dt_tokens=dt, db_tokens=db,
                        last_box=box, last_confidence=1.0, frame_index=1)


def _clamp_box(box, frame_hw):
    """Bound a degenerate prediction so the crop loop stays near the frame.

    Inactive for any box whose center lies inside the frame and whose sides
    are under twice the frame extent; without it a bad size estimate can
    compound through the crop factor until the crops dwarf the frame.
    """
    H, W = frame_hw
    cx, cy, w, h = box
    return (min(max(cx, 0.0), float(W)), min(max(cy, 0.0), float(H)),
            min(max(w, 2.0), 2.0 * W), min(max(h, 2.0), 2.0 * H))


def track(state, frame, model, cfg):
    """Locate the target in one new frame; updates state in place.

    Returns ((x, y, w, h), confidence) in frame pixels. On failure the
    state is left untouched.
    """
    frame = np.asarray(frame, dtype=np.float64)
    center = state.last_box[:2]
    crop, side = search_crop(frame, state.last_box, cfg)
    x_tokens = model.tokenize_search(crop)
    maps, kept, trace = model.forward_tokens(
        state.z_tokens, state.dt_tokens, state.db_tokens, x_tokens)
    box_n, conf = hd.decode_box(maps)
    new_box = _clamp_box(map_box_to_frame(box_n, center, side),
                         frame.shape[:2])

    state.last_box = new_box
    state.last_confidence = conf
    state.frame_index += 1
    return _xywh_from_center_box(new_box), conf


def maybe_update_dynamic(state, frame, model, cfg):
    """Window bookkeeping for the dynamic-token refresh.

    Called once per tracked frame. Keeps the highest-confidence frame's
    dynamic crop; at the end of each update window, refreshes the dynamic
    tokens from it if its confidence clears the threshold.
    """
    if state.dt_tokens is None and not model.uses_dt:
        return state
    frame = np.asarray(frame, dtype=np.float64)
    if state.last_confidence > state.best_confidence:
        state.best_confidence = state.last_confidence
        state.best_dynamic_crop = _dynamic_crop(frame, state.last_box, cfg)
    state.window_len += 1
    if state.window_len >= cfg.update_interval:
        if state.best_confidence >= cfg.update_threshold:
            dt, db = model.tokenize_dynamic(state.best_dynamic_crop)
            state.dt_tokens = dt
            state.db_tokens = db
        state.window_len = 0
        state.best_confidence = -1.0
        state.best_dynamic_crop = None
    return state


def track_sequence(model, cfg, frames, init_xywh):
    """Run a full sequence; returns (boxes, confidences).

    The first frame echoes the ground truth with confidence 1, matching the
    one-shot evaluation protocol.
    """
    state = init(frames[0], init_xywh, model, cfg)
    boxes = [tuple(float(v) for v in init_xywh)]
    confs = [1.0]
    for frame in frames[1:]:
        xywh, conf = track(state, frame, model, cfg)
        maybe_update_dynamic(state, frame, model, cfg)
        boxes.append(xywh)
        confs.append(conf)
    return boxes, confs


# -- sequence files ------------------------------------------------------


def parse_box_line(line):
    parts = line.strip().split(",")
    if len(parts) < 4:
        raise InputError(f"box line needs 4 comma-separated values: {line!r}")
    try:
        return tuple(float(p) for p in parts[:4])
    except ValueError:
        raise InputError(f"malformed box line: {line!r}") from None


def read_boxes(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise InputError(f"no boxes in {path}")
    return [parse_box_line(ln) for ln in lines]


def write_predictions(path, boxes, confs):
    """One x,y,w,h,confidence line per frame."""
    if len(boxes) != len(confs):
        raise InputError("box/confidence length mismatch")
    with open(path, "w", encoding="ascii") as fh:
        for box, conf in zip(boxes, confs):
            vals = [repr(float(v)) for v in box] + [repr(float(conf))]
            fh.write(",".join(vals) + "\n")


def load_sequence_dir(path):
    """Read a sequence directory: ordered frame images + groundtruth.txt."""
    try:
        entries = os.listdir(path)
    except OSError as exc:
        raise InputError(f"cannot read sequence directory {path}") from exc
    names = sorted(n for n in entries if n.endswith((".ppm", ".pgm")))
    if not names:
        raise InputError(f"no frame files in {path}")
    frames = [images.read_image(os.path.join(path, n)) for n in names]
    gt_path = os.path.join(path, "groundtruth.txt")
    if not os.path.exists(gt_path):
        raise InputError(f"missing groundtruth.txt in {path}")
    return frames, read_boxes(gt_path)
