"""Binary/text formats: FGRID tensors, PGM/PPM images, SVG line plots."""

from __future__ import annotations

import struct
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import FormatError

FGRID_MAGIC = b"FGRD"
FGRID_VERSION = 1
_FGRID_HEADER = struct.Struct("<4sHIII")


def fgrid_bytes(values) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FormatError(f"FGRID holds 2-D or 3-D arrays, got ndim={arr.ndim}")
    c, h, w = arr.shape
    header = _FGRID_HEADER.pack(FGRID_MAGIC, FGRID_VERSION, c, h, w)
    return header + arr.astype("<f4").tobytes(order="C")


def parse_fgrid(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one FGRID record starting at ``offset``; returns (array, next offset)."""
    if len(data) - offset < _FGRID_HEADER.size:
        raise FormatError("truncated FGRID header")
    magic, version, c, h, w = _FGRID_HEADER.unpack_from(data, offset)
    if magic != FGRID_MAGIC:
        raise FormatError(f"bad FGRID magic {magic!r}")
    if version != FGRID_VERSION:
        raise FormatError(f"unsupported FGRID version {version}")
    start = offset + _FGRID_HEADER.size
    n = c * h * w
    end = start + 4 * n
    if end > len(data):
        raise FormatError("truncated FGRID payload")
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).astype(np.float64)
    return arr.reshape(c, h, w), end


def write_fgrid(path, values) -> None:
    Path(path).write_bytes(fgrid_bytes(values))


def read_fgrid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = parse_fgrid(data)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes after FGRID record")
    return arr


def write_fgrid_stack(path, arrays) -> None:
    Path(path).write_bytes(b"".join(fgrid_bytes(a) for a in arrays))


def read_fgrid_stack(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out = []
    offset = 0
    while offset < len(data):
        arr, offset = parse_fgrid(data, offset)
        out.append(arr)
    return out


def to_bytes_image(values, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Map values to uint8. With ``lo``/``hi`` unset the array's own range is
    stretched onto [0, 255] (a constant array renders mid-grey)."""
    arr = np.asarray(values, dtype=np.float64)
    lo = arr.min() if lo is None else lo
    hi = arr.max() if hi is None else hi
    if hi - lo <= 0:
        return np.full(arr.shape, 128, dtype=np.uint8)
    scaled = (np.clip(arr, lo, hi) - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, gray) -> None:
    g = np.asarray(gray)
    if g.dtype != np.uint8:
        g = to_bytes_image(g, 0.0, 1.0)
    if g.ndim != 2:
        raise FormatError("PGM needs a 2-D array")
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes())


def write_ppm(path, rgb) -> None:
    """``rgb`` is (3, H, W); floats are clipped to [0, 1]."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[0] != 3:
        raise FormatError("PPM needs a (3, H, W) array")
    if a.dtype != np.uint8:
        a = to_bytes_image(a, 0.0, 1.0)
    _, h, w = a.shape
    body = np.transpose(a, (1, 2, 0)).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PNM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255; returns floats in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), start = _pnm_tokens(data, 4)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    raster = data[start : start + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def render_latent(path, latent, lo: float = 0.0, hi: float = 1.0) -> Path:
    """Write a (C, H, W) array as PGM (C=1) or PPM (C=3); other channel counts
    render channel 0.  Returns the path actually written."""
    z = np.asarray(latent, dtype=np.float64)
    path = Path(path)
    if z.ndim == 3 and z.shape[0] == 3:
        path = path.with_suffix(".ppm")
        write_ppm(path, to_bytes_image(z, lo, hi))
    else:
        g = z[0] if z.ndim == 3 else z
        path = path.with_suffix(".pgm")
        write_pgm(path, to_bytes_image(g, lo, hi))
    return path


def svg_line_plot(
    path,
    series: dict[str, tuple[list[float], list[float]]],
    title: str = "",
    xlabel: str = "",
    width: int = 480,
    height: int = 320,
) -> None:
    """Minimal multi-series polyline plot. Each series is (xs, ys); every
    series is scaled to its own y range so curves with different units share
    the canvas."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    pad = 40
    all_x = [x for xs, _ in series.values() for x in xs]
    x_lo, x_hi = (min(all_x), max(all_x)) if all_x else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for k, (name, (xs, ys)) in enumerate(series.items()):
        if not xs:
            continue
        y_lo, y_hi = min(ys), max(ys)
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        pts = []
        for x, y in zip(xs, ys):
            px = pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)
            py = height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)
            pts.append(f"{px:.2f},{py:.2f}")
        color = colors[k % len(colors)]
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(pts)}"/>'
        )
        parts.append(
            f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" font-size="11" '
            f'fill="{color}">{escape(name)} [{min(ys):.3g}, {max(ys):.3g}]</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
