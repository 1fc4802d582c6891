"""Bundled synthetic scenarios.

``blobs2``   two isotropic Gaussian classes on a 1x4x4 latent; the analytic
             oracle field is exact for it.
``blobs2h``  the same means with per-class spreads (0.5, 2.0); the two flows
             then differ in Lipschitz profile, which makes trajectory bounds
             non-trivial.
``shapes16`` 16x16 grey images: a noisy background, a randomly placed
             context rectangle, and a centred subject whose shape encodes the
             class (0 = filled square, 1 = diamond).  Editing 0 -> 1 should
             change only the subject box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .flow import Dataset, GaussianOracleField
from .grid import RngStream


@dataclass(frozen=True)
class Scenario:
    name: str
    latent_shape: tuple[int, int, int]
    num_classes: int
    c_src: int = 0
    c_tar: int = 1
    params: dict = field(default_factory=dict)

    def generate(self, seed: int, n: int | None = None) -> Dataset:
        return _GENERATORS[self.name](self, RngStream(seed), n or self.params["n"])

    def source(self, seed: int) -> np.ndarray:
        """A single class-``c_src`` source sample, deterministic per seed."""
        rng = RngStream(seed).spawn(0x5EED)
        return _SAMPLERS[self.name](self, rng, self.c_src)

    def edit_mask(self) -> np.ndarray:
        """Boolean (H, W) mask of the pixels an edit is allowed to change."""
        h, w = self.latent_shape[1:]
        m = np.zeros((h, w), dtype=bool)
        if self.name == "shapes16":
            r0, c0, s = self.params["subject"]
            m[r0 : r0 + s, c0 : c0 + s] = True
        else:
            m[:] = True
        return m

    def oracle(self) -> GaussianOracleField:
        if not self.name.startswith("blobs2"):
            raise InvalidArgument(f"no analytic oracle for scenario {self.name!r}")
        return GaussianOracleField(blobs2_means(self.latent_shape), _sigmas(self).copy())


def blobs2_means(shape) -> np.ndarray:
    c, h, w = shape
    left = np.zeros(shape)
    left[:, :, : w // 2] = 0.75
    left[:, :, w // 2 :] = -0.75
    return np.stack([left, -left])


def _sigmas(sc: Scenario) -> np.ndarray:
    return np.broadcast_to(np.asarray(sc.params["sigma"], dtype=np.float64), (sc.num_classes,))


def _blobs_sample(sc: Scenario, rng: RngStream, label: int) -> np.ndarray:
    mu = blobs2_means(sc.latent_shape)[label]
    return mu + _sigmas(sc)[label] * rng.normal(sc.latent_shape)


def _gen_blobs(sc: Scenario, rng: RngStream, n: int) -> Dataset:
    labels = np.arange(n) % sc.num_classes
    mus = blobs2_means(sc.latent_shape)[labels]
    scale = _sigmas(sc)[labels][:, None, None, None]
    samples = mus + scale * rng.normal((n, *sc.latent_shape))
    return Dataset(samples, labels, sc.num_classes, {"scenario": sc.name})


def subject_shape(label: int, size: int) -> np.ndarray:
    if label == 0:
        return np.ones((size, size), dtype=bool)
    r = np.arange(size) - (size - 1) / 2
    return (np.abs(r)[:, None] + np.abs(r)[None, :]) <= (size - 1) / 2


def _shapes_sample(sc: Scenario, rng: RngStream, label: int) -> np.ndarray:
    p = sc.params
    h, w = sc.latent_shape[1:]
    # intensity bands sit between the boundaries of the 4-level quantizer and
    # its half-level shifts (multiples of 1/8), so regions segment stably
    u = rng.uniform(0.0, 1.0, 8)
    img = np.full((h, w), 0.03 + 0.06 * u[0])
    # context rectangle, placed clear of the subject box (1-pixel margin)
    r0, c0, s = p["subject"]
    rh = 2 + int(u[1] * 3)
    rw = 3 + int(u[2] * 4)
    above_left = []
    below_right = []
    for i in range(h - rh + 1):
        for j in range(w - rw + 1):
            if i + rh <= r0 - 1 or j + rw <= c0 - 1:
                above_left.append((i, j))
            elif i >= r0 + s + 1 or j >= c0 + s + 1:
                below_right.append((i, j))
    # backgrounds correlate with the subject class: each class favours one side
    favour_first = (u[6] < p["context_bias"]) == (label == 0)
    slots = above_left if favour_first else below_right
    i, j = slots[min(int(u[3] * len(slots)), len(slots) - 1)]
    img[i : i + rh, j : j + rw] = 0.41 + 0.06 * u[4]
    sub = subject_shape(label, s)
    img[r0 : r0 + s, c0 : c0 + s][sub] = 0.78 + 0.06 * u[5]
    img = img + p["pixel_noise"] * rng.normal((h, w))
    return np.clip(img, 0.0, 1.0)[None]


def _gen_shapes(sc: Scenario, rng: RngStream, n: int) -> Dataset:
    labels = np.arange(n) % sc.num_classes
    samples = np.stack([_shapes_sample(sc, rng, int(k)) for k in labels])
    return Dataset(samples, labels, sc.num_classes, {"scenario": sc.name})


_GENERATORS = {"blobs2": _gen_blobs, "blobs2h": _gen_blobs, "shapes16": _gen_shapes}
_SAMPLERS = {"blobs2": _blobs_sample, "blobs2h": _blobs_sample, "shapes16": _shapes_sample}

SCENARIOS = {
    "blobs2": Scenario("blobs2", (1, 4, 4), 2, params={"n": 2000, "sigma": 0.3}),
    "blobs2h": Scenario("blobs2h", (1, 4, 4), 2, params={"n": 2000, "sigma": (0.5, 2.0)}),
    "shapes16": Scenario(
        "shapes16", (1, 16, 16), 2, params={"n": 2000, "subject": (5, 5, 6), "pixel_noise": 0.01, "context_bias": 0.8}
    ),
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise InvalidArgument(f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}") from None
