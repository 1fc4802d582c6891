"""Numerical checks of the re-anchoring stability bounds, image metrics,
ablation variants, and the noise-scale sensitivity sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid

from .edit import EditConfig, edit, make_schedule
from .errors import InvalidArgument, InvalidInput
from .flow import GaussianOracleField
from .grid import as_latent
from .prior import (
    PriorConfig,
    build_latent_prior,
    init_projection,
    paint_regions,
    pixel_coordinates,
    region_descriptor,
    rope_encode_many,
    segment_synthetic,
)

PSNR_CAP = 100.0
DISCRETIZATION_MARGIN = 0.05
# relative floating-point allowance when comparing a measured error with a
# bound that can be attained with equality
BOUND_RTOL = 1e-9


# --- bound reports ----------------------------------------------------------


@dataclass
class BoundRecord:
    t: float
    eps_src: float
    measured: float
    bound: float
    slack: float = field(init=False)
    seed: int | None = None

    def __post_init__(self):
        if self.bound < 0:
            raise InvalidArgument("bound must be non-negative")
        self.slack = self.bound - self.measured


@dataclass
class BoundReport:
    records: list[BoundRecord] = field(default_factory=list)
    margin: float = 0.0  # measured may exceed bound by this relative factor

    def violated(self, r: BoundRecord) -> bool:
        limit = r.bound * (1.0 + self.margin)
        return r.measured > limit * (1.0 + BOUND_RTOL) + 1e-300

    @property
    def violations(self) -> int:
        return sum(self.violated(r) for r in self.records)

    @property
    def min_slack(self) -> float:
        return min((r.slack for r in self.records), default=float("inf"))

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def extend(self, other: "BoundReport") -> None:
        self.records.extend(other.records)

    def to_json(self) -> str:
        return json.dumps(
            {
                "margin": self.margin,
                "violations": self.violations,
                "min_slack": self.min_slack,
                "records": [asdict(r) for r in self.records],
            },
            indent=1,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "t", "eps_src", "measured", "bound", "slack", "violated"])
        for r in self.records:
            w.writerow([r.seed, _fmt(r.t), _fmt(r.eps_src), _fmt(r.measured), _fmt(r.bound),
                        _fmt(r.slack), int(self.violated(r))])
        return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


def proxy_error(z_tilde_src, z_src_t) -> float:
    a = np.asarray(z_tilde_src, dtype=np.float64)
    b = np.asarray(z_src_t, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def _v(fld, z, t, c):
    return fld(np.asarray(z).reshape(1, -1), t, c).reshape(np.shape(z))


def reanchored_field(fld, z, t, z_tilde_src, z_src, c_src, c_tar):
    """f~(z, t) = v(z + (Z~src_t - Z_src), t, c_tar) - v(Z~src_t, t, c_src)."""
    return _v(fld, z + (z_tilde_src - z_src), t, c_tar) - _v(fld, z_tilde_src, t, c_src)


def field_error_check(fld, z, t: float, z_src_t, z_tilde_src_t, z_src, c_src: int, c_tar: int,
                      l_tar: float, l_src: float) -> BoundRecord:
    """Compare the re-anchored field with the ideal one (same anchoring
    reference, true source trajectory) against (L_tar + L_src) * eps_src."""
    f_tilde = reanchored_field(fld, z, t, z_tilde_src_t, z_src, c_src, c_tar)
    f_star = reanchored_field(fld, z, t, z_src_t, z_src, c_src, c_tar)
    eps = proxy_error(z_tilde_src_t, z_src_t)
    measured = float(np.linalg.norm((f_tilde - f_star).ravel()))
    return BoundRecord(t, eps, measured, (l_tar + l_src) * eps)


def gronwall_bound(l_tar: float, l_src: float, eps_src, t0: float, t: float,
                   quadrature_steps: int = 1024) -> float:
    """Composite-trapezoid value of
    int_0^tau exp(L_tar (tau - u)) (L_tar + L_src) eps_src(s(u)) du,
    where tau = |t - t0| is the elapsed pseudo-time and s(u) walks from t0
    towards t.  ``eps_src`` is a callable of the (real) time s."""
    if quadrature_steps < 16:
        raise InvalidArgument("quadrature_steps must be >= 16")
    tau = abs(t - t0)
    if tau == 0:
        return 0.0
    u = np.linspace(0.0, tau, quadrature_steps + 1)
    s = t0 + (t - t0) * u / tau
    e = np.array([float(eps_src(si)) for si in s])
    if not np.all(np.isfinite(e)):
        raise InvalidInput("eps_src returned non-finite values")
    integrand = np.exp(l_tar * (tau - u)) * (l_tar + l_src) * e
    return float(trapezoid(integrand, u))


def gronwall_bound_curve(l_tar: float, l_src: float, eps_values, elapsed) -> np.ndarray:
    """Bound at every node of a pseudo-time grid ``elapsed`` (starting at 0)
    from samples of eps_src on that grid, via a cumulative trapezoid of
    exp(-L u) g(u) rescaled by exp(L tau)."""
    u = np.asarray(elapsed, dtype=np.float64)
    g = (l_tar + l_src) * np.asarray(eps_values, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise InvalidInput("eps_src values must be finite")
    h = np.exp(-l_tar * u) * g
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (h[1:] + h[:-1]) * np.diff(u))])
    return np.exp(l_tar * u) * cum


def oracle_source_trajectory(fld: GaussianOracleField, z_src, t, c: int) -> np.ndarray:
    """Exact image of ``z_src`` under the class-``c`` oracle flow at time t:
    (1-t) mu + s(t)/sigma (z_src - mu), s(t)^2 = (1-t)^2 sigma^2 + t^2."""
    mu = fld.means[c]
    sig = fld.sigmas[c]
    s = np.sqrt((1.0 - t) ** 2 * sig**2 + t**2)
    return (1.0 - t) * mu + (s / sig) * (np.asarray(z_src) - mu)


def verify_trajectory_bound(fld: GaussianOracleField, z_src, c_src: int, c_tar: int, eps_tilde,
                            t_max: float = 1.0, num_steps: int = 1000, l_scale: float = 1.0,
                            quadrature_refine: int = 4, seed: int | None = None) -> BoundReport:
    """Integrate the ideal dynamics (true source trajectory) and the
    re-anchored dynamics (fixed rectified proxy) with the same Euler grid
    from ``Z_src`` at t_max, and compare their distance at every node with
    the Gronwall bound.  ``l_scale`` scales both Lipschitz constants (values
    below 1 serve as a negative control)."""
    if num_steps < 1:
        raise InvalidArgument("num_steps must be >= 1")
    z_src = as_latent(z_src, "source latent")
    eps_tilde = as_latent(eps_tilde, "rectified noise")
    l_tar = l_scale * fld.lipschitz_sup(0.0, t_max, c_tar)
    l_src = l_scale * fld.lipschitz_sup(0.0, t_max, c_src)

    times = make_schedule(num_steps, t_max)
    z = z_src.copy()
    z_star = z_src.copy()
    deviation = [0.0]
    for i in range(num_steps):
        t, t_next = times[i], times[i + 1]
        z_tilde = (1.0 - t) * z_src + t * eps_tilde
        z_true = oracle_source_trajectory(fld, z_src, t, c_src)
        dt = t_next - t
        z = z + dt * reanchored_field(fld, z, t, z_tilde, z_src, c_src, c_tar)
        z_star = z_star + dt * reanchored_field(fld, z_star, t, z_true, z_src, c_src, c_tar)
        deviation.append(float(np.linalg.norm((z - z_star).ravel())))

    fine = make_schedule(num_steps * quadrature_refine, t_max)
    eps_fine = np.array([
        proxy_error((1.0 - s) * z_src + s * eps_tilde, oracle_source_trajectory(fld, z_src, s, c_src))
        for s in fine
    ])
    bound_fine = gronwall_bound_curve(l_tar, l_src, eps_fine, t_max - fine)
    bounds = bound_fine[::quadrature_refine]
    eps_nodes = eps_fine[::quadrature_refine]
    report = BoundReport(margin=DISCRETIZATION_MARGIN)
    for t, e, d, b in zip(times, eps_nodes, deviation, bounds):
        report.records.append(BoundRecord(float(t), float(e), d, float(b), seed=seed))
    return report


# --- metrics ----------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP``."""
    if not peak > 0:
        raise InvalidArgument("peak must be positive")
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / err)))


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    """Per-pixel SSIM of two 2-D images; local statistics use a normalized
    Gaussian window with reflect padding."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise InvalidArgument("ssim_map expects 2-D images")
    w = _gaussian_window(params.window, params.sigma)

    def filt(x):
        return ndimage.correlate(x, w, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM; (C, H, W) inputs average the per-channel means."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b, params).mean())
    if a.ndim == 3:
        return float(np.mean([ssim_map(x, y, params).mean() for x, y in zip(a, b)]))
    raise InvalidArgument("ssim expects (H, W) or (C, H, W) inputs")


def background_consistency(source, edited, edit_mask) -> float:
    """MSE over pixels outside ``edit_mask`` (all channels)."""
    s, e = _pair(source, edited)
    m = np.asarray(edit_mask, dtype=bool)
    if m.shape != s.shape[-2:]:
        raise InvalidArgument(f"mask shape {m.shape} does not match image {s.shape[-2:]}")
    keep = ~m
    if not keep.any():
        raise InvalidInput("edit mask covers the whole image; background is empty")
    return float(np.mean((s[..., keep] - e[..., keep]) ** 2))


def alignment_proxy(edited, target_class: int, reference_means, temperature: float = 1.0) -> float:
    """Target-class probability of a softmax over -||x - mu_c|| / T."""
    means = np.asarray(reference_means, dtype=np.float64)
    x = np.asarray(edited, dtype=np.float64)
    if not 0 <= target_class < means.shape[0]:
        raise InvalidArgument(f"unknown class {target_class}")
    if means.shape[1:] != x.shape:
        raise InvalidArgument("reference means do not match the edited shape")
    if not temperature > 0:
        raise InvalidArgument("temperature must be positive")
    d = np.linalg.norm(means.reshape(means.shape[0], -1) - x.ravel(), axis=1)
    logits = -d / temperature
    logits -= logits.max()
    p = np.exp(logits)
    return float(p[target_class] / p.sum())


# --- ablations and sweeps ---------------------------------------------------

VARIANTS = ("full", "no_semantic_decomp", "no_rope", "no_rand_proj", "baseline")


def variant_prior(variant: str, image, latent_shape, cfg: PriorConfig = PriorConfig()):
    """Latent prior for an ablation variant, or ``None`` for the baseline.

    full               segmentation + RoPE descriptors + random projection
    no_semantic_decomp RoPE + projection applied per pixel over the whole
                       frame (no region pooling)
    no_rope            descriptors replaced by the all-ones vector
    no_rand_proj       projection replaced by the mean of descriptor entries
    """
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "baseline":
        return None
    x = as_latent(image, "image")
    h, w = x.shape[1:]
    weights = init_projection(cfg.projection_seed, cfg.c_desc)
    if variant == "no_semantic_decomp":
        enc = rope_encode_many(pixel_coordinates(h, w), cfg.c_desc, cfg.rope_base)
        phi_map = (enc @ weights.weights).reshape(h, w)
        return build_latent_prior(phi_map, latent_shape, cfg.epsilon).latent
    regions = segment_synthetic(x, cfg.quantize_levels, cfg.min_area, cfg.stability_threshold)
    if not regions:
        return np.zeros(tuple(latent_shape))
    if variant == "no_rope":
        descs = [np.ones(cfg.c_desc) for _ in regions]
    else:
        descs = [region_descriptor(r, cfg.c_desc, cfg.rope_base) for r in regions]
    if variant == "no_rand_proj":
        vals = np.array([d.mean() for d in descs])
    else:
        vals = np.array([weights.weights @ d for d in descs])
    phi_map = paint_regions(regions, vals)
    return build_latent_prior(phi_map, latent_shape, cfg.epsilon).latent


def fingerprint(prior) -> str:
    if prior is None:
        return "none"
    data = np.ascontiguousarray(np.asarray(prior, dtype="<f8")).tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


METRIC_FIELDS = ("mse", "psnr", "ssim", "background_mse", "alignment")


def edit_metrics(source, edited, edit_mask, target_class: int, reference_means) -> dict[str, float]:
    return {
        "mse": mse(source, edited),
        "psnr": psnr(source, edited),
        "ssim": ssim(source, edited),
        "background_mse": background_consistency(source, edited, edit_mask),
        "alignment": alignment_proxy(edited, target_class, reference_means),
    }


def run_ablation(variant: str, scenario, fld, seeds, config: EditConfig = EditConfig(),
                 prior_cfg: PriorConfig = PriorConfig(), reference_means=None) -> list[dict]:
    """One metrics row per seed. Seed ``s`` fixes both the source sample and
    the editing noise, so variants compared at the same seed share them."""
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    means = reference_means if reference_means is not None else scenario.generate(0).class_means()
    mask = scenario.edit_mask()
    rows = []
    for seed in seeds:
        x = scenario.source(seed)
        prior = variant_prior(variant, x, scenario.latent_shape, prior_cfg)
        cfg = replace(config, seed=int(seed))
        method = "flowedit" if variant == "baseline" else "snr"
        run = edit(fld, x, scenario.c_src, scenario.c_tar, prior, cfg, method=method)
        row = {"seed": int(seed), "variant": variant}
        row.update(edit_metrics(x, run.output, mask, scenario.c_tar, means))
        row["prior_fingerprint"] = fingerprint(prior)
        rows.append(row)
    return rows


def sensitivity_sweep(lambda_stoch_values, scenario, fld, seeds, config: EditConfig = EditConfig(),
                      prior_cfg: PriorConfig = PriorConfig(), reference_means=None) -> list[dict]:
    """Mean SSIM-vs-source and alignment per lambda_stoch, with
    lambda_struct = 1 - lambda_stoch."""
    values = [float(v) for v in lambda_stoch_values]
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise InvalidArgument("lambda_stoch values must lie in [0, 1]")
    seeds = list(seeds)
    means = reference_means if reference_means is not None else scenario.generate(0).class_means()
    mask = scenario.edit_mask()
    sources = {s: scenario.source(s) for s in seeds}
    priors = {s: variant_prior("full", sources[s], scenario.latent_shape, prior_cfg) for s in seeds}
    rows = []
    for lam in values:
        cfg = replace(config, lambda_stoch=lam, lambda_struct=1.0 - lam)
        per_seed = []
        for s in seeds:
            run = edit(fld, sources[s], scenario.c_src, scenario.c_tar, priors[s], replace(cfg, seed=int(s)))
            per_seed.append(edit_metrics(sources[s], run.output, mask, scenario.c_tar, means))
        row = {"lambda_stoch": lam, "lambda_struct": 1.0 - lam, "n_seeds": len(seeds)}
        for k in METRIC_FIELDS:
            row[k] = float(np.mean([m[k] for m in per_seed]))
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], columns=None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()
