"""Class-conditioned velocity fields v(z, t, c).

Time convention: t = 0 is data, t = 1 is noise, z_t = (1 - t) z0 + t eps and
the regression target is eps - z0.

Two field types share one batched call signature ``field(z, t, labels)`` with
``z`` of shape (B, D), ``t`` and ``labels`` of shape (B,):

* :class:`MlpFlowModel` -- small numpy MLP trained by conditional flow
  matching with hand-written backprop.
* :class:`GaussianOracleField` -- exact marginal velocity when each class is
  an isotropic Gaussian, with closed-form Lipschitz constant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import FormatError, InvalidArgument, TrainingFailed
from .formats import read_fgrid_stack, write_fgrid_stack
from .grid import RngStream, as_latent

LIPSCHITZ_SAFETY = 1.2


def flow_interpolate(z0, eps, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t={t} outside [0, 1]")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise InvalidArgument(f"shape mismatch {z0.shape} vs {eps.shape}")
    return (1.0 - t) * z0 + t * eps


# --- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    samples: np.ndarray  # (N, C, H, W)
    labels: np.ndarray   # (N,)
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise InvalidArgument("samples must be (N, C, H, W)")
        if len(self.samples) != len(self.labels):
            raise InvalidArgument("samples and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgument("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    def class_means(self) -> np.ndarray:
        """(K, C, H, W) per-class sample means."""
        return np.stack([self.samples[self.labels == k].mean(axis=0) for k in range(self.num_classes)])

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.fgrid`` (concatenated records) and ``<stem>.json``."""
        stem = Path(stem)
        data_path = stem.with_suffix(".fgrid")
        side_path = stem.with_suffix(".json")
        write_fgrid_stack(data_path, self.samples)
        side = {"labels": self.labels.tolist(), "num_classes": self.num_classes, "meta": self.meta}
        side_path.write_text(json.dumps(side, indent=1, sort_keys=True), encoding="utf-8")
        return data_path, side_path

    @classmethod
    def load(cls, stem) -> "Dataset":
        stem = Path(stem)
        samples = read_fgrid_stack(stem.with_suffix(".fgrid"))
        side = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
        return cls(np.stack(samples), np.array(side["labels"]), int(side["num_classes"]), side.get("meta", {}))


# --- shared helpers ---------------------------------------------------------


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgument(f"unknown class in {np.unique(labels).tolist()} (have {num_classes})")


def _batch_args(z, t, labels):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    b = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (b,))
    return z, t, labels


def eval_velocity(fld, z, t: float, c: int) -> np.ndarray:
    """Velocity of a single (C, H, W) latent at time ``t`` under class ``c``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t={t} outside [0, 1]")
    z = as_latent(z)
    return fld(z.reshape(1, -1), t, c).reshape(z.shape)


# --- analytic oracle --------------------------------------------------------


def gaussian_velocity_slope(sigma, t):
    """Slope k of the marginal velocity v = k (z - (1-t) mu) - mu.

    With z0 ~ N(mu, sigma^2), eps ~ N(0, 1) independent and
    z = (1-t) z0 + t eps: Var z = (1-t)^2 sigma^2 + t^2,
    Cov(eps, z) = t, Cov(z0, z) = (1-t) sigma^2, so
    E[eps - z0 | z] = (t - (1-t) sigma^2) / Var z * (z - (1-t) mu) - mu.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    s2 = sigma**2
    return (t - (1.0 - t) * s2) / ((1.0 - t) ** 2 * s2 + t**2)


def gaussian_oracle_velocity(mu, sigma: float, z, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t={t} outside [0, 1]")
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    mu = np.asarray(mu, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return gaussian_velocity_slope(sigma, t) * (z - (1.0 - t) * mu) - mu


class GaussianOracleField:
    """Exact velocity for class-conditional data z0 | c ~ N(mu_c, sigma_c^2 I).

    ``sigma`` may be one shared value or one value per class.
    """

    def __init__(self, means, sigma=1.0):
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.ndim < 2:
            raise InvalidArgument("means must be (num_classes, ...)")
        self.latent_shape = self.means.shape[1:]
        self.num_classes = self.means.shape[0]
        self._mu = self.means.reshape(self.num_classes, -1)
        sig = np.asarray(sigma, dtype=np.float64)
        self.sigmas = np.broadcast_to(sig, (self.num_classes,)).copy()
        if not np.all(self.sigmas > 0):
            raise InvalidArgument("sigma must be positive")

    def slope(self, t, c):
        return gaussian_velocity_slope(self.sigmas[c], t)

    def __call__(self, z, t, labels) -> np.ndarray:
        z, t, labels = _batch_args(z, t, labels)
        _check_labels(labels, self.num_classes)
        k = gaussian_velocity_slope(self.sigmas[labels], t)[:, None]
        mu = self._mu[labels]
        return k * (z - (1.0 - t)[:, None] * mu) - mu

    def lipschitz(self, t: float, c: int | None = None) -> float:
        classes = range(self.num_classes) if c is None else [c]
        return max(float(abs(self.slope(t, k))) for k in classes)

    def lipschitz_sup(self, t_lo: float, t_hi: float, c: int | None = None, grid: int = 4001) -> float:
        """sup of the Lipschitz constant over [t_lo, t_hi], refined around the
        grid maximum with a bounded scalar search."""
        classes = range(self.num_classes) if c is None else [c]
        ts = np.linspace(t_lo, t_hi, grid)
        best = 0.0
        step = (t_hi - t_lo) / (grid - 1) if grid > 1 else 0.0
        for k in classes:
            vals = np.abs(gaussian_velocity_slope(self.sigmas[k], ts))
            i = int(np.argmax(vals))
            best = max(best, float(vals[i]))
            if step > 0:
                lo, hi = max(t_lo, ts[i] - step), min(t_hi, ts[i] + step)
                res = minimize_scalar(
                    lambda s: -abs(float(gaussian_velocity_slope(self.sigmas[k], s))),
                    bounds=(lo, hi),
                    method="bounded",
                    options={"xatol": 1e-12},
                )
                best = max(best, -float(res.fun))
        return best


def lipschitz_constant(fld, t: float, c: int | None = None, rng: RngStream | None = None, n_pairs: int = 256) -> float:
    """Exact Lipschitz constant for the oracle; for other fields a sampled
    lower bound (max ||dv|| / ||dz||) inflated by ``LIPSCHITZ_SAFETY``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t={t} outside [0, 1]")
    if isinstance(fld, GaussianOracleField):
        return fld.lipschitz(t, c)
    return LIPSCHITZ_SAFETY * estimate_lipschitz(fld, t, c, rng or RngStream(0), n_pairs)


def estimate_lipschitz(fld, t: float, c: int | None, rng: RngStream, n_pairs: int = 256, scale: float = 1.0) -> float:
    dim = int(np.prod(fld.latent_shape))
    classes = range(fld.num_classes) if c is None else [c]
    best = 0.0
    for k in classes:
        a = rng.normal((n_pairs, dim)) * scale
        b = a + 0.1 * scale * rng.normal((n_pairs, dim))
        dv = fld(a, t, k) - fld(b, t, k)
        ratio = np.linalg.norm(dv, axis=1) / np.linalg.norm(a - b, axis=1)
        best = max(best, float(ratio.max()))
    return best


# --- MLP --------------------------------------------------------------------

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _gelu(x):
    u = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), th


def _gelu_grad(x, th):
    du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du


_ACTIVATIONS = ("gelu", "tanh")


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding (B,) -> (B, dim): [sin(f_k t) ..., cos(f_k t) ...]
    with f_k geometrically spaced in [1, 100]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if dim == 0:
        return np.zeros((t.shape[0], 0))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(100.0), half)) if half > 1 else np.ones(half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, t[:, None]], axis=1)
    return emb


class MlpFlowModel:
    """v_theta(z, t, c) = MLP([z, time_emb(t), cond_table[c]]).

    Parameters live in ``self.params`` in declaration order: ``cond_table``
    then ``W0, b0, W1, b1, ...``.
    """

    def __init__(
        self,
        latent_shape,
        num_classes: int,
        hidden=(256, 256, 256),
        time_dim: int = 32,
        cond_dim: int = 16,
        activation: str = "gelu",
        seed: int | None = 0,
    ):
        if activation not in _ACTIVATIONS:
            raise InvalidArgument(f"activation must be one of {_ACTIVATIONS}")
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.num_classes = int(num_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        self.activation = activation
        self.latent_dim = int(np.prod(self.latent_shape))
        self.params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes():
            self.params[name] = np.zeros(shape)
        if seed is not None:
            self._init(RngStream(seed))

    @property
    def input_dim(self) -> int:
        return self.latent_dim + self.time_dim + self.cond_dim

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.latent_dim)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [("cond_table", (self.num_classes, self.cond_dim))]
        sizes = self.layer_sizes
        for i in range(len(sizes) - 1):
            shapes.append((f"W{i}", (sizes[i], sizes[i + 1])))
            shapes.append((f"b{i}", (sizes[i + 1],)))
        return shapes

    def _init(self, rng: RngStream) -> None:
        self.params["cond_table"] = rng.normal(self.params["cond_table"].shape)
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.params[f"W{i}"].shape
            gain = 0.1 if i == n_layers - 1 else 1.0
            self.params[f"W{i}"] = rng.normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)
        _round_f32(self.params)

    def copy(self) -> "MlpFlowModel":
        m = MlpFlowModel(self.latent_shape, self.num_classes, self.hidden, self.time_dim,
                         self.cond_dim, self.activation, seed=None)
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def _act(self, x):
        if self.activation == "gelu":
            return _gelu(x)
        y = np.tanh(x)
        return y, y

    def _act_grad(self, x, aux):
        if self.activation == "gelu":
            return _gelu_grad(x, aux)
        return 1.0 - aux**2

    def forward(self, z, t, labels):
        z, t, labels = _batch_args(z, t, labels)
        if z.shape[1] != self.latent_dim:
            raise InvalidArgument(f"latent dim {z.shape[1]} != model latent dim {self.latent_dim}")
        _check_labels(labels, self.num_classes)
        h = np.concatenate([z, time_embedding(t, self.time_dim), self.params["cond_table"][labels]], axis=1)
        cache = {"labels": labels, "inputs": [], "pre": [], "aux": []}
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            cache["inputs"].append(h)
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i == n_layers - 1:
                h = a
            else:
                h, aux = self._act(a)
                cache["pre"].append(a)
                cache["aux"].append(aux)
        return h, cache

    def backward(self, cache, grad_out) -> dict[str, np.ndarray]:
        grads = {}
        n_layers = len(self.layer_sizes) - 1
        g = grad_out
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                g = g * self._act_grad(cache["pre"][i], cache["aux"][i])
            x = cache["inputs"][i]
            grads[f"W{i}"] = x.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        g_cond = g[:, self.latent_dim + self.time_dim :]
        table = np.zeros_like(self.params["cond_table"])
        np.add.at(table, cache["labels"], g_cond)
        grads["cond_table"] = table
        return grads

    def __call__(self, z, t, labels) -> np.ndarray:
        return self.forward(z, t, labels)[0]


def _round_f32(arrays: dict[str, np.ndarray]) -> None:
    # master weights are kept f32-representable so checkpoints are lossless
    for k in arrays:
        arrays[k] = arrays[k].astype(np.float32).astype(np.float64)


# --- conditional flow matching ------------------------------------------------


def _cfm_draws(z0: np.ndarray, rng: RngStream):
    t = rng.uniform(0.0, 1.0, z0.shape[0])
    eps = rng.normal(z0.shape)
    return t, eps


def cfm_loss(fld, z0, labels, rng: RngStream) -> float:
    """Mean over the batch of ||v(z_t, t, c) - (eps - z0)||^2 with
    t ~ U(0, 1), eps ~ N(0, I) drawn from ``rng``."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim < 2 or z0.shape[0] == 0:
        raise InvalidArgument("cfm_loss needs a non-empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z0.shape[0],):
        raise InvalidArgument("labels must have one entry per sample")
    flat = z0.reshape(z0.shape[0], -1)
    t, eps = _cfm_draws(flat, rng)
    zt = (1.0 - t)[:, None] * flat + t[:, None] * eps
    resid = fld(zt, t, labels) - (eps - flat)
    return float(np.mean(np.sum(resid**2, axis=1)))


def cfm_loss_and_grad(model: MlpFlowModel, z0, labels, rng: RngStream):
    z0 = np.asarray(z0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z0.ndim < 2 or z0.shape[0] == 0:
        raise InvalidArgument("cfm_loss needs a non-empty batch")
    flat = z0.reshape(z0.shape[0], -1)
    t, eps = _cfm_draws(flat, rng)
    zt = (1.0 - t)[:, None] * flat + t[:, None] * eps
    out, cache = model.forward(zt, t, labels)
    resid = out - (eps - flat)
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    grads = model.backward(cache, 2.0 * resid / flat.shape[0])
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 5000
    batch: int = 64
    seed: int = 0
    momentum: float = 0.9


@dataclass
class TrainState:
    """Everything needed to resume training bit-for-bit."""

    step: int
    rng: RngStream
    velocity: dict[str, np.ndarray]


def train(model: MlpFlowModel, dataset: Dataset, config: TrainConfig = TrainConfig(),
          state: TrainState | None = None):
    """SGD with heavy-ball momentum on :func:`cfm_loss`.

    Returns ``(trained_model, losses, state)``; the input model is not
    modified.  ``state`` from a previous call resumes that run exactly.
    """
    if config.steps < 0 or config.batch < 1 or not config.lr > 0:
        raise InvalidArgument(f"invalid training config {config}")
    if dataset.latent_shape != model.latent_shape:
        raise InvalidArgument(f"dataset shape {dataset.latent_shape} != model shape {model.latent_shape}")
    if len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    m = model.copy()
    if state is None:
        state = TrainState(0, RngStream(config.seed), {k: np.zeros_like(v) for k, v in m.params.items()})
    else:
        state = TrainState(state.step, state.rng.copy(), {k: v.copy() for k, v in state.velocity.items()})
    losses: list[float] = []
    for _ in range(config.steps):
        with np.errstate(over="ignore", invalid="ignore"):
            loss = _train_step(m, dataset, config, state)
        if not np.isfinite(loss):
            raise TrainingFailed(state.step, loss)
        losses.append(loss)
        state.step += 1
    return m, losses, state


def _train_step(m: MlpFlowModel, dataset: Dataset, config: TrainConfig, state: TrainState) -> float:
    """One momentum step in place; parameters are left untouched if the loss
    is not finite."""
    n = len(dataset)
    idx = np.minimum((state.rng.uniform(0.0, 1.0, config.batch) * n).astype(np.int64), n - 1)
    loss, grads = cfm_loss_and_grad(m, dataset.samples[idx], dataset.labels[idx], state.rng)
    if not np.isfinite(loss):
        return loss
    for k, g in grads.items():
        v = config.momentum * state.velocity[k] + g
        state.velocity[k] = v
        m.params[k] = m.params[k] - config.lr * v
    _round_f32(m.params)
    _round_f32(state.velocity)
    return loss


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"SNRM"
CKPT_VERSION = 1
_ACT_CODES = {name: i for i, name in enumerate(_ACTIVATIONS)}


def save_checkpoint(path, model: MlpFlowModel, state: TrainState | None = None) -> None:
    """Layout (little-endian): magic, u16 version, u32 n_sizes, u32 sizes...,
    u32 time_dim, u32 cond_dim, u32 num_classes, u32 activation,
    3 x u32 latent shape, f32 weights in declaration order, then u8 flag and
    (if set) u64 step, u64 rng seed, u64 rng counter, f32 momentum buffers."""
    if len(model.latent_shape) != 3:
        raise InvalidArgument("checkpoint expects a (C, H, W) latent shape")
    sizes = model.layer_sizes
    head = CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(sizes))
    head += struct.pack(f"<{len(sizes)}I", *sizes)
    head += struct.pack("<IIII", model.time_dim, model.cond_dim, model.num_classes, _ACT_CODES[model.activation])
    head += struct.pack("<3I", *model.latent_shape)
    body = b"".join(model.params[k].astype("<f4").tobytes() for k, _ in model.param_shapes())
    tail = struct.pack("<B", 0 if state is None else 1)
    if state is not None:
        tail += struct.pack("<QQQ", state.step, state.rng.seed, state.rng.counter)
        tail += b"".join(state.velocity[k].astype("<f4").tobytes() for k, _ in model.param_shapes())
    Path(path).write_bytes(head + body + tail)


def load_checkpoint(path) -> tuple[MlpFlowModel, TrainState | None]:
    data = Path(path).read_bytes()
    try:
        if data[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
        version, n_sizes = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 10
        sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
        off += 4 * n_sizes
        time_dim, cond_dim, num_classes, act = struct.unpack_from("<IIII", data, off)
        off += 16
        latent_shape = struct.unpack_from("<3I", data, off)
        off += 12
        model = MlpFlowModel(latent_shape, num_classes, sizes[1:-1], time_dim, cond_dim, _ACTIVATIONS[act], seed=None)
        if model.layer_sizes != tuple(sizes):
            raise FormatError(f"{path}: layer sizes inconsistent with latent/embedding dims")

        def read_block(offset):
            out = {}
            for name, shape in model.param_shapes():
                n = int(np.prod(shape))
                out[name] = np.frombuffer(data, "<f4", n, offset).astype(np.float64).reshape(shape)
                offset += 4 * n
            return out, offset

        model.params, off = read_block(off)
        (flag,) = struct.unpack_from("<B", data, off)
        off += 1
        state = None
        if flag:
            step, seed, counter = struct.unpack_from("<QQQ", data, off)
            off += 24
            velocity, off = read_block(off)
            state = TrainState(step, RngStream(seed, counter), velocity)
        if off != len(data):
            raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return model, state
