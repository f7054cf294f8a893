"""Portable-anymap image io and bilinear crop sampling.

Frames come in as 8-bit PPM/PGM files (binary or ASCII) and are held as
float64 arrays in [0,1]. Heatmaps go out as binary PGM. Crop extraction
resamples an axis-aligned square window with bilinear interpolation and
mean-padding outside the frame.
"""
from __future__ import annotations

import numpy as np

from .errors import InputError


def _parse_header(data, n_tokens):
    """Return (tokens, payload_offset) for a PNM header.

    Tokens are whitespace-separated; '#' starts a comment running to end of
    line. The payload begins one whitespace character after the last token.
    """
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < n_tokens:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise InputError("truncated image header")
        tokens.append(data[start:i])
    if i >= n or not data[i:i + 1].isspace():
        raise InputError("missing whitespace after image header")
    return tokens, i + 1


def _ascii_values(data, offset, count):
    parts = data[offset:].split()
    if len(parts) < count:
        raise InputError("truncated ASCII pixel data")
    try:
        return np.array([int(p) for p in parts[:count]], dtype=np.float64)
    except ValueError as e:
        raise InputError(f"bad ASCII pixel value: {e}") from None


def read_image(path):
    """Read a PPM/PGM file into an [H, W, 3] float array in [0, 1].

    Grayscale inputs are replicated across the three channels.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise InputError(f"not a PNM file: {path}")
    magic = data[:2]
    if magic not in (b"P6", b"P3", b"P5", b"P2"):
        raise InputError(f"unsupported PNM magic {magic!r} in {path}")
    color = magic in (b"P6", b"P3")
    tokens, offset = _parse_header(data, 4)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise InputError(f"malformed PNM header in {path}") from None
    if w < 1 or h < 1 or not (1 <= maxval <= 255):
        raise InputError(f"unsupported PNM geometry/maxval in {path}")
    count = w * h * (3 if color else 1)
    if magic in (b"P6", b"P5"):
        raw = data[offset:offset + count]
        if len(raw) < count:
            raise InputError(f"truncated pixel data in {path}")
        vals = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    else:
        vals = _ascii_values(data, offset, count)
    if vals.max(initial=0.0) > maxval:
        raise InputError(f"pixel value exceeds maxval in {path}")
    vals /= float(maxval)
    if color:
        return vals.reshape(h, w, 3)
    gray = vals.reshape(h, w)
    return np.repeat(gray[:, :, None], 3, axis=2)


def read_pgm(path):
    """Read a grayscale PGM into an [H, W] float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P2"):
        raise InputError(f"not a PGM file: {path}")
    img = read_image(path)
    return img[:, :, 0]


def _to_bytes(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise InputError("image values must lie in [0, 1]")
    # deterministic half-up quantization
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img):
    """Write an [H, W, 3] float image in [0, 1] as binary 8-bit PPM."""
    arr = _to_bytes(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError("write_ppm expects an [H, W, 3] array")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_pgm(path, img):
    """Write an [H, W] float image in [0, 1] as binary 8-bit PGM."""
    arr = _to_bytes(img)
    if arr.ndim != 2:
        raise InputError("write_pgm expects an [H, W] array")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def crop_and_resize(frame, center, side, out_size, pad_value=None):
    """Resample a square window of ``frame`` to ``out_size`` pixels.

    The window is centered at ``center`` (x, y in pixel coordinates) with
    physical side length ``side``. Samples falling outside the frame read
    ``pad_value`` per channel (frame channel means when None). Bilinear
    interpolation, pixel centers at integer coordinates.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InputError("crop_and_resize expects an [H, W, 3] frame")
    if side <= 0.0 or out_size < 1:
        raise InputError("crop side and output size must be positive")
    H, W = frame.shape[:2]
    if pad_value is None:
        pad_value = frame.mean(axis=(0, 1))
    pad_value = np.broadcast_to(np.asarray(pad_value, dtype=np.float64), (3,))

    cx, cy = float(center[0]), float(center[1])
    x0, y0 = cx - side / 2.0, cy - side / 2.0
    scale = side / float(out_size)
    # sample points at output-pixel centers mapped into frame coordinates
    us = x0 + (np.arange(out_size) + 0.5) * scale - 0.5
    vs = y0 + (np.arange(out_size) + 0.5) * scale - 0.5

    margin = int(np.ceil(max(1.0, -us.min(), -vs.min(),
                             us.max() - (W - 1), vs.max() - (H - 1)))) + 1
    padded = np.empty((H + 2 * margin, W + 2 * margin, 3), dtype=np.float64)
    padded[:] = pad_value
    padded[margin:margin + H, margin:margin + W] = frame

    uu = us + margin
    vv = vs + margin
    ju = np.floor(uu).astype(np.intp)
    iv = np.floor(vv).astype(np.intp)
    fu = uu - ju
    fv = vv - iv

    iv = iv[:, None]
    fv = fv[:, None]
    ju = ju[None, :]
    fu = fu[None, :]
    tl = padded[iv, ju]
    tr = padded[iv, ju + 1]
    bl = padded[iv + 1, ju]
    br = padded[iv + 1, ju + 1]
    fu3 = fu[:, :, None]
    fv3 = fv[:, :, None]
    top = tl * (1.0 - fu3) + tr * fu3
    bot = bl * (1.0 - fu3) + br * fu3
    return top * (1.0 - fv3) + bot * fv3
