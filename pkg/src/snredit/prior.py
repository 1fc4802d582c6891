"""Structure-aware prior: region decomposition, rotary geometric descriptors,
a frozen random projection to scalar intensities, and assembly of the
normalized, channel-broadcast latent prior."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidArgument, InvalidInput
from .grid import (
    DEFAULT_EPSILON,
    RngStream,
    as_grid,
    as_latent,
    broadcast_channels,
    minmax_normalize,
    resize_area,
)

DEFAULT_C_DESC = 32
DEFAULT_ROPE_BASE = 10000.0
DEFAULT_MIN_AREA = 0.001
DEFAULT_STABILITY_THRESHOLD = 0.85
DEFAULT_QUANTIZE_LEVELS = 4

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


@dataclass
class Region:
    mask: np.ndarray
    stability: float
    id: int
    area_fraction: float = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise InvalidInput(f"region {self.id}: mask must be 2-D")
        self.mask = m.astype(bool)
        n = int(self.mask.sum())
        if n == 0:
            raise InvalidInput(f"region {self.id}: empty mask")
        if not 0.0 <= self.stability <= 1.0:
            raise InvalidInput(f"region {self.id}: stability {self.stability} outside [0, 1]")
        self.area_fraction = n / self.mask.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class ProjectionWeights:
    weights: np.ndarray
    seed: int

    def __post_init__(self):
        self.weights.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class StructuralPrior:
    map: np.ndarray     # raw pixel-resolution intensities
    latent: np.ndarray  # (C, h, w), normalized to [-1, 1]


# --- segmentation -----------------------------------------------------------


def _channel_codes(levels: np.ndarray, radix: int) -> np.ndarray:
    # fold per-channel level indices into one integer label per pixel
    code = np.zeros(levels.shape[1:], dtype=np.int64)
    for c in range(levels.shape[0]):
        code = code * radix + levels[c]
    return code


def _components(codes: np.ndarray) -> np.ndarray:
    """Label 4-connected components of equal code; ids start at 1."""
    out = np.zeros(codes.shape, dtype=np.int64)
    next_id = 1
    for value in np.unique(codes):
        lab, n = ndimage.label(codes == value, structure=_FOUR_CONN)
        sel = lab > 0
        out[sel] = lab[sel] + (next_id - 1)
        next_id += n
    return out


def _best_overlap(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    ids, counts = np.unique(labels[mask], return_counts=True)
    return labels == ids[np.argmax(counts)]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def segment_synthetic(
    image,
    quantize_levels: int = DEFAULT_QUANTIZE_LEVELS,
    min_area: float = DEFAULT_MIN_AREA,
    stability_threshold: float = DEFAULT_STABILITY_THRESHOLD,
) -> list[Region]:
    """Connected components of the quantized colour label of a (C, H, W)
    image with values in [0, 1].

    Stability of a component is the smaller of its IoUs with the
    best-overlapping component when the quantization grid is shifted by +half
    and by -half a level.
    Components below ``stability_threshold`` or ``min_area`` (fraction of
    pixels) are dropped.  Result is sorted by descending stability, then
    descending area; ids follow that order.
    """
    x = as_latent(image, "image")
    if quantize_levels < 1:
        raise InvalidArgument("quantize_levels must be >= 1")
    if not 0.0 < min_area < 1.0:
        raise InvalidArgument("min_area must lie in (0, 1)")
    if not 0.0 <= stability_threshold <= 1.0:
        raise InvalidArgument("stability_threshold must lie in [0, 1]")
    x = np.clip(x, 0.0, 1.0)
    scaled = x * quantize_levels
    base = np.clip(np.floor(scaled), 0, quantize_levels - 1).astype(np.int64)
    radix = quantize_levels + 2
    plus = np.floor(scaled + 0.5).astype(np.int64) + 1
    minus = np.floor(scaled - 0.5).astype(np.int64) + 1

    base_cc = _components(_channel_codes(base, radix))
    plus_cc = _components(_channel_codes(plus, radix))
    minus_cc = _components(_channel_codes(minus, radix))

    total = base_cc.size
    found = []
    for cid in range(1, base_cc.max() + 1):
        mask = base_cc == cid
        area = mask.sum() / total
        if area < min_area:
            continue
        stability = min(_iou(mask, _best_overlap(plus_cc, mask)), _iou(mask, _best_overlap(minus_cc, mask)))
        if stability < stability_threshold:
            continue
        found.append((stability, area, cid, mask))
    found.sort(key=lambda r: (-r[0], -r[1], r[2]))
    return [Region(mask, stab, i) for i, (stab, _, _, mask) in enumerate(found)]


# --- mask-set files ---------------------------------------------------------


def rle_encode_row(row) -> list[int]:
    """Run lengths of a boolean row, starting with a (possibly empty) False run."""
    runs = []
    current = False
    count = 0
    for v in np.asarray(row, dtype=bool):
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = v
            count = 1
    runs.append(count)
    return runs


def rle_decode_row(runs, width: int) -> np.ndarray:
    if any((not isinstance(r, int)) or r < 0 for r in runs):
        raise FormatError("run lengths must be non-negative integers")
    if sum(runs) != width:
        raise FormatError(f"row runs sum to {sum(runs)}, expected width {width}")
    row = np.zeros(width, dtype=bool)
    pos = 0
    for k, r in enumerate(runs):
        if k % 2 == 1:
            row[pos : pos + r] = True
        pos += r
    return row


def masks_to_json(regions: list[Region]) -> dict:
    if not regions:
        raise InvalidArgument("no regions to serialize")
    h, w = regions[0].shape
    return {
        "height": h,
        "width": w,
        "masks": [
            {
                "id": r.id,
                "stability": r.stability,
                "rle": [rle_encode_row(row) for row in r.mask],
            }
            for r in regions
        ],
    }


def save_masks(path, regions: list[Region]) -> None:
    Path(path).write_text(json.dumps(masks_to_json(regions)), encoding="utf-8")


def load_masks(path) -> list[Region]:
    """Read a mask-set JSON file. Overlaps are kept as-is."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        h, w = int(doc["height"]), int(doc["width"])
        entries = doc["masks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed header field ({exc})") from exc
    if h < 1 or w < 1:
        raise FormatError(f"{path}: non-positive dimensions {h}x{w}")
    regions = []
    for k, entry in enumerate(entries):
        try:
            rows = entry["rle"]
            rid = int(entry["id"])
            stability = float(entry["stability"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: mask #{k} malformed ({exc})") from exc
        if len(rows) != h:
            raise FormatError(f"{path}: mask {rid} has {len(rows)} rows, header says {h}")
        try:
            mask = np.stack([rle_decode_row(r, w) for r in rows])
        except FormatError as exc:
            raise FormatError(f"{path}: mask {rid}: {exc}") from exc
        if not mask.any():
            raise FormatError(f"{path}: mask {rid} is empty")
        try:
            regions.append(Region(mask, stability, rid))
        except InvalidInput as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return regions


# --- geometric encoding -----------------------------------------------------


def rope_frequencies(c_desc: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    if c_desc % 2:
        raise InvalidArgument(f"descriptor dimension must be even, got {c_desc}")
    if c_desc < 4 or c_desc % 4:
        raise InvalidArgument(f"descriptor dimension must be a multiple of 4 and >= 4, got {c_desc}")
    if not base > 1:
        raise InvalidArgument("RoPE base must exceed 1")
    per_axis = c_desc // 2
    i = np.arange(per_axis // 2, dtype=np.float64)
    return 2.0 * np.pi * base ** (-2.0 * i / per_axis)


def rope_encode_many(points, c_desc: int = DEFAULT_C_DESC, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Encode an (N, 2) array of (x, y) coordinates; returns (N, c_desc).

    Layout: [cos(f0 x), sin(f0 x), cos(f1 x), ..., cos(f0 y), sin(f0 y), ...].
    """
    theta = rope_frequencies(c_desc, base)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty((p.shape[0], c_desc))
    half = c_desc // 2
    for axis in range(2):
        ang = p[:, axis, None] * theta[None, :]
        block = out[:, axis * half : (axis + 1) * half]
        block[:, 0::2] = np.cos(ang)
        block[:, 1::2] = np.sin(ang)
    return out


def rope_encode(p, c_desc: int = DEFAULT_C_DESC, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    return rope_encode_many(np.asarray(p, dtype=np.float64)[None, :], c_desc, base)[0]


def pixel_coordinates(h: int, w: int) -> np.ndarray:
    """Normalized (x, y) = (col/(W-1), row/(H-1)) for every pixel, row-major;
    a single-row or single-column axis maps to 0."""
    xs = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    ys = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def region_descriptor(region: Region, c_desc: int = DEFAULT_C_DESC, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    mask = np.asarray(region.mask, dtype=bool)
    if not mask.any():
        raise InvalidArgument("cannot describe an empty region")
    coords = pixel_coordinates(*mask.shape)[mask.ravel()]
    return rope_encode_many(coords, c_desc, base).mean(axis=0)


# --- projection and maps ----------------------------------------------------


def init_projection(seed: int, c_desc: int = DEFAULT_C_DESC) -> ProjectionWeights:
    """Frozen weights drawn from U(-1/sqrt(C), 1/sqrt(C)), open at both ends."""
    if c_desc < 1:
        raise InvalidArgument("descriptor dimension must be >= 1")
    bound = 1.0 / np.sqrt(c_desc)
    w = RngStream(seed).uniform(np.nextafter(-bound, 0.0), bound, c_desc)
    return ProjectionWeights(np.ascontiguousarray(w), int(seed))


def project(weights: ProjectionWeights, descriptor) -> float:
    s = np.asarray(descriptor, dtype=np.float64)
    if s.shape != (weights.dim,):
        raise InvalidArgument(f"descriptor has shape {s.shape}, weights expect ({weights.dim},)")
    return float(weights.weights @ s)


def assign_regions(regions: list[Region]) -> np.ndarray:
    """Per-pixel index into ``regions`` of the winning region (highest
    stability, then lowest id); -1 where no region covers the pixel."""
    if not regions:
        raise InvalidArgument("at least one region is required")
    shape = regions[0].shape
    for r in regions:
        if r.shape != shape:
            raise InvalidArgument(f"mask shape {r.shape} differs from {shape}")
    order = sorted(range(len(regions)), key=lambda k: (-regions[k].stability, regions[k].id))
    owner = np.full(shape, -1, dtype=np.int64)
    # paint from weakest to strongest so the strongest ends on top
    for k in reversed(order):
        owner[regions[k].mask] = k
    return owner


def paint_regions(regions: list[Region], intensities) -> np.ndarray:
    """Paint each region's scalar intensity (aligned with ``regions``);
    overlaps go to the winner of :func:`assign_regions`, uncovered pixels
    stay 0."""
    vals = np.asarray(intensities, dtype=np.float64)
    if vals.shape != (len(regions),):
        raise InvalidArgument("need exactly one intensity per region")
    owner = assign_regions(regions)
    out = np.zeros(owner.shape)
    covered = owner >= 0
    out[covered] = vals[owner[covered]]
    return out


def region_intensities(descriptors, weights: ProjectionWeights) -> np.ndarray:
    return np.array([project(weights, s) for s in descriptors])


def build_structural_map(regions: list[Region], descriptors, weights: ProjectionWeights) -> np.ndarray:
    if len(descriptors) != len(regions):
        raise InvalidArgument("descriptors must be aligned with regions")
    return paint_regions(regions, region_intensities(descriptors, weights))


def build_latent_prior(phi_map, latent_shape, epsilon: float = DEFAULT_EPSILON) -> StructuralPrior:
    """resize -> min-max normalize -> broadcast, in that order."""
    c, h, w = (int(v) for v in latent_shape)
    if c < 1:
        raise InvalidArgument("latent channel count must be >= 1")
    m = as_grid(phi_map, "structural map")
    latent = broadcast_channels(minmax_normalize(resize_area(m, h, w), epsilon), c)
    return StructuralPrior(m, latent)


@dataclass(frozen=True)
class PriorConfig:
    c_desc: int = DEFAULT_C_DESC
    rope_base: float = DEFAULT_ROPE_BASE
    projection_seed: int = 0
    quantize_levels: int = DEFAULT_QUANTIZE_LEVELS
    min_area: float = DEFAULT_MIN_AREA
    stability_threshold: float = DEFAULT_STABILITY_THRESHOLD
    epsilon: float = DEFAULT_EPSILON


def prior_from_regions(regions: list[Region], latent_shape, cfg: PriorConfig = PriorConfig()) -> StructuralPrior:
    weights = init_projection(cfg.projection_seed, cfg.c_desc)
    descs = [region_descriptor(r, cfg.c_desc, cfg.rope_base) for r in regions]
    phi_map = build_structural_map(regions, descs, weights)
    return build_latent_prior(phi_map, latent_shape, cfg.epsilon)


def prior_from_image(image, latent_shape, cfg: PriorConfig = PriorConfig()) -> StructuralPrior:
    """Segment ``image`` and build its latent prior. If no region survives the
    filters the map is all zero and so is the prior."""
    x = as_latent(image, "image")
    regions = segment_synthetic(x, cfg.quantize_levels, cfg.min_area, cfg.stability_threshold)
    if not regions:
        return build_latent_prior(np.zeros(x.shape[1:]), latent_shape, cfg.epsilon)
    return prior_from_regions(regions, latent_shape, cfg)
