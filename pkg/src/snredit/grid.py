"""Grid primitives: validation, min-max normalization, area resize, channel
broadcast, seeded Gaussian draws, and the latent codec.

A ``Grid2D`` is a 2-D float64 ``ndarray`` of shape ``(H, W)``; a
``LatentTensor`` is a 3-D float64 ``ndarray`` of shape ``(C, H, W)``.  Both are
plain numpy arrays; the helpers here only check and coerce them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidInput

DEFAULT_EPSILON = 1e-8
DEFAULT_LATENT_CHANNELS = 4

_U64 = (1 << 64) - 1


def as_grid(values, name: str = "grid") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


def as_latent(values, name: str = "latent") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InvalidInput(f"{name} must be a non-empty (C, H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


def minmax_normalize(grid, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Affinely map ``grid`` onto [-1, 1] (min -> -1, max -> +1).

    When ``max - min <= epsilon`` the range is treated as negligible and the
    all-zero grid is returned.
    """
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    g = as_grid(grid)
    lo = g.min()
    hi = g.max()
    span = hi - lo
    if span <= epsilon:
        return np.zeros_like(g)
    out = (g - lo) / span * 2.0 - 1.0
    # guard the endpoints against rounding so they are attained exactly
    out[g == lo] = -1.0
    out[g == hi] = 1.0
    return np.clip(out, -1.0, 1.0)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i averages input cells over the interval [i, i+1) * n_in / n_out
    edges_out = np.arange(n_out + 1, dtype=np.float64) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges_out[i], edges_out[i + 1]
        j0 = int(np.floor(a))
        j1 = min(int(np.ceil(b)), n_in)
        for j in range(j0, j1):
            overlap = min(b, j + 1) - max(a, j)
            if overlap > 0:
                m[i, j] = overlap
        m[i] /= m[i].sum()
    return m


def resize_area(grid, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted resize: each output cell is the overlap-weighted mean of
    the input cells it covers."""
    if out_h < 1 or out_w < 1:
        raise InvalidArgument(f"target size must be positive, got {out_h}x{out_w}")
    g = as_grid(grid)
    h, w = g.shape
    if (h, w) == (out_h, out_w):
        return g.copy()
    return _area_matrix(h, out_h) @ g @ _area_matrix(w, out_w).T


def broadcast_channels(grid, channels: int) -> np.ndarray:
    if channels < 1:
        raise InvalidArgument("channels must be >= 1")
    g = as_grid(grid)
    return np.repeat(g[None, :, :], channels, axis=0)


class RngStream:
    """Counter-based Gaussian/uniform source built on Philox-4x64.

    Every draw call ``k`` reads from a fresh Philox block sequence keyed by
    ``seed`` and offset by ``k`` in the third counter word, so the numbers a
    call yields depend only on ``(seed, counter)`` and not on the sizes of
    earlier draws.  ``counter`` increments once per draw call.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _U64
        self.counter = int(counter) & _U64

    def _next_generator(self) -> np.random.Generator:
        ctr = np.array([0, 0, self.counter, 0], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=ctr))
        self.counter = (self.counter + 1) & _U64
        return gen

    def normal(self, shape) -> np.ndarray:
        return self._next_generator().standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._next_generator().uniform(low, high, shape)

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent child stream; deterministic in (seed, stream_id)."""
        ss = np.random.SeedSequence([self.seed, int(stream_id) & _U64])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def sample_gaussian(rng: RngStream, shape) -> np.ndarray:
    """Draw an i.i.d. standard normal tensor of ``shape``, advancing ``rng``."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s < 1 for s in shape):
        raise InvalidArgument(f"invalid shape {shape}")
    return rng.normal(shape)


@dataclass(frozen=True)
class Codec:
    """Stand-in for the autoencoder: identity, or a fixed linear map.

    In linear mode ``matrix`` has shape ``(latent_dim, pixel_dim)`` and
    ``pinv`` is its recorded pseudo-inverse.
    """

    mode: str = "identity"
    matrix: np.ndarray | None = field(default=None, repr=False)
    pinv: np.ndarray | None = field(default=None, repr=False)
    pixel_shape: tuple[int, ...] | None = None
    latent_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "linear"):
            raise InvalidArgument(f"unknown codec mode {self.mode!r}")
        if self.mode == "linear":
            if self.matrix is None or self.pixel_shape is None or self.latent_shape is None:
                raise InvalidArgument("linear codec needs matrix, pixel_shape and latent_shape")
            expected = (int(np.prod(self.latent_shape)), int(np.prod(self.pixel_shape)))
            if self.matrix.shape != expected:
                raise InvalidArgument(f"matrix shape {self.matrix.shape} != {expected}")
            if self.pinv is None:
                object.__setattr__(self, "pinv", np.linalg.pinv(self.matrix))

    @classmethod
    def identity(cls) -> "Codec":
        return cls()

    @classmethod
    def random_orthonormal(cls, pixel_shape, seed: int, latent_shape=None) -> "Codec":
        """Linear codec whose matrix has orthonormal rows (a rotation when
        ``latent_shape`` has as many elements as ``pixel_shape``)."""
        pixel_shape = tuple(pixel_shape)
        latent_shape = tuple(latent_shape) if latent_shape is not None else pixel_shape
        n_pix = int(np.prod(pixel_shape))
        n_lat = int(np.prod(latent_shape))
        if n_lat > n_pix:
            raise InvalidArgument("latent_dim cannot exceed pixel_dim for orthonormal rows")
        a = RngStream(seed).normal((n_pix, n_lat))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        m = q.T
        return cls("linear", m, m.T.copy(), pixel_shape, latent_shape)

    def encode(self, image) -> np.ndarray:
        x = as_latent(image, "image")
        if self.mode == "identity":
            return x.copy()
        if x.shape != self.pixel_shape:
            raise InvalidArgument(f"image shape {x.shape} != codec pixel shape {self.pixel_shape}")
        return (self.matrix @ x.ravel()).reshape(self.latent_shape)

    def decode(self, latent) -> np.ndarray:
        z = as_latent(latent, "latent")
        if self.mode == "identity":
            return z.copy()
        if z.shape != self.latent_shape:
            raise InvalidArgument(f"latent shape {z.shape} != codec latent shape {self.latent_shape}")
        return (self.pinv @ z.ravel()).reshape(self.pixel_shape)


def encode(codec: Codec, image) -> np.ndarray:
    return codec.encode(image)


def decode(codec: Codec, latent) -> np.ndarray:
    return codec.decode(latent)
