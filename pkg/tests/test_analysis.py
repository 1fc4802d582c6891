from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest

from snredit.analysis import (
    BOUND_RTOL,
    VARIANTS,
    BoundRecord,
    BoundReport,
    alignment_proxy,
    background_consistency,
    field_error_check,
    fingerprint,
    gronwall_bound,
    gronwall_bound_curve,
    mse,
    oracle_source_trajectory,
    proxy_error,
    psnr,
    rows_to_csv,
    run_ablation,
    sensitivity_sweep,
    ssim,
    variant_prior,
    verify_trajectory_bound,
)
from snredit.edit import EditConfig, edit
from snredit.errors import InvalidArgument, InvalidInput
from snredit.flow import GaussianOracleField, MlpFlowModel, gaussian_velocity_slope
from snredit.grid import RngStream
from snredit.scenarios import get_scenario


def test_proxy_error():
    a = np.random.default_rng(0).normal(size=(2, 3, 3))
    assert proxy_error(a, a) == 0.0
    assert proxy_error(a + 1.0, a) == pytest.approx(np.sqrt(18))


def test_bound_record_invariants():
    r = BoundRecord(0.5, 0.1, 0.2, 0.3)
    assert r.slack == pytest.approx(0.1)
    with pytest.raises(InvalidArgument):
        BoundRecord(0.5, 0.1, 0.2, -1.0)
    rep = BoundReport([r, BoundRecord(0.4, 0.1, 0.31, 0.3)], margin=0.05)
    assert rep.violations == 0
    rep.margin = 0.0
    assert rep.violations == 1 and not rep.ok
    doc = json.loads(rep.to_json())
    assert doc["violations"] == 1 and len(doc["records"]) == 2
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [int(r["violated"]) for r in rows] == [0, 1]


def test_oracle_source_trajectory_solves_the_flow():
    fld = GaussianOracleField(np.random.default_rng(0).normal(size=(2, 1, 2, 2)), [0.5, 2.0])
    z = np.random.default_rng(1).normal(size=(1, 2, 2))
    assert np.allclose(oracle_source_trajectory(fld, z, 0.0, 1), z)
    for t in (0.2, 0.6, 0.9):
        h = 1e-6
        d = (oracle_source_trajectory(fld, z, t + h, 1) - oracle_source_trajectory(fld, z, t - h, 1)) / (2 * h)
        v = fld(oracle_source_trajectory(fld, z, t, 1).reshape(1, -1), t, 1).reshape(z.shape)
        np.testing.assert_allclose(d, v, atol=1e-6)


def test_field_error_zero_when_proxy_exact():
    sc = get_scenario("blobs2h")
    fld = sc.oracle()
    z_src = sc.source(0)
    zt = oracle_source_trajectory(fld, z_src, 0.4, 0)
    rec = field_error_check(fld, z_src + 0.3, 0.4, zt, zt, z_src, 0, 1, 2.0, 2.0)
    assert rec.measured == 0.0 and rec.bound == 0.0 and rec.slack == 0.0
    assert BoundReport([rec]).ok


def test_field_error_scalar_closed_form():
    fld = GaussianOracleField(np.array([[[[0.5]]], [[[-1.0]]]]), [0.8, 1.3])
    t, delta = 0.6, 0.25
    z_src = np.full((1, 1, 1), 0.1)
    zt = oracle_source_trajectory(fld, z_src, t, 0)
    k_tar = float(gaussian_velocity_slope(1.3, t))
    k_src = float(gaussian_velocity_slope(0.8, t))
    rec = field_error_check(fld, np.full((1, 1, 1), 0.7), t, zt, zt + delta, z_src, 0, 1, abs(k_tar), abs(k_src))
    assert rec.measured == pytest.approx(abs(k_tar - k_src) * delta, rel=1e-10)
    assert rec.bound == pytest.approx((abs(k_tar) + abs(k_src)) * delta, rel=1e-12)
    # opposite-sign slopes attain the bound, so only rounding separates them
    assert rec.slack >= -BOUND_RTOL * rec.bound
    assert BoundReport([rec]).ok


def test_field_error_theorem_random_configurations():
    sc = get_scenario("blobs2h")
    fld = sc.oracle()
    rng = RngStream(42)
    report = BoundReport()
    for _ in range(100):
        z_src = fld.means[0] + fld.sigmas[0] * rng.normal(sc.latent_shape)
        eps = rng.normal(sc.latent_shape)
        for t in rng.uniform(0.0, 1.0, 5):
            t = float(t)
            z = z_src + 2.0 * rng.normal(sc.latent_shape)
            zt = oracle_source_trajectory(fld, z_src, t, 0)
            report.records.append(field_error_check(fld, z, t, zt, (1 - t) * z_src + t * eps, z_src, 0, 1,
                                                    fld.lipschitz(t, 1), fld.lipschitz(t, 0)))
    assert report.violations == 0
    assert all(r.slack >= -BOUND_RTOL * r.bound for r in report.records)


def test_gronwall_closed_forms():
    assert gronwall_bound(1.0, 2.0, lambda s: 0.0, 1.0, 0.0) == 0.0
    eps, lam, dt = 0.3, 1.7, 0.8
    exact = 2 * eps * (np.exp(lam * dt) - 1)
    assert gronwall_bound(lam, lam, lambda s: eps, 1.0, 1.0 - dt, 4096) == pytest.approx(exact, abs=1e-6)
    assert gronwall_bound(0.0, lam, lambda s: eps, 1.0, 1.0 - dt) == pytest.approx(lam * eps * dt, rel=1e-12)
    u = np.linspace(0, dt, 4097)
    curve = gronwall_bound_curve(lam, lam, np.full_like(u, eps), u)
    np.testing.assert_allclose(curve, 2 * eps * (np.exp(lam * u) - 1), atol=1e-6)
    with pytest.raises(InvalidArgument):
        gronwall_bound(1.0, 1.0, lambda s: 1.0, 1.0, 0.0, quadrature_steps=4)


def test_trajectory_deviation_zero_for_exact_proxy():
    sc = get_scenario("blobs2h")
    fld = sc.oracle()
    # a source at its class mean travels along (1 - t) mu, which eps~ = 0 reproduces
    z_src = fld.means[0].copy()
    rep = verify_trajectory_bound(fld, z_src, 0, 1, np.zeros_like(z_src), num_steps=100)
    assert max(r.measured for r in rep.records) == 0.0
    assert max(r.eps_src for r in rep.records) == 0.0


def bound_inputs(seed):
    sc = get_scenario("blobs2h")
    rng = RngStream(seed)
    z_src = sc.source(seed)
    phi = np.clip(rng.uniform(-1, 1, sc.latent_shape), -1, 1)
    return sc, z_src, 0.1 * phi + 0.9 * rng.normal(sc.latent_shape)


def test_trajectory_bound_holds_and_negative_control_fails():
    for seed in range(3):
        sc, z_src, eps = bound_inputs(seed)
        ok = verify_trajectory_bound(sc.oracle(), z_src, 0, 1, eps, num_steps=300, seed=seed)
        assert ok.violations == 0 and ok.records[-1].seed == seed
        bad = verify_trajectory_bound(sc.oracle(), z_src, 0, 1, eps, num_steps=300, l_scale=0.5, seed=seed)
        assert bad.violations > 0


def test_step_refinement_converges_gap():
    sc, z_src, eps = bound_inputs(7)
    gaps = []
    for n in (50, 100, 200, 400, 3200):
        r = verify_trajectory_bound(sc.oracle(), z_src, 0, 1, eps, num_steps=n).records[-1]
        gaps.append(r.bound - r.measured)
    dist = [abs(g - gaps[-1]) for g in gaps[:-1]]
    assert all(a > b for a, b in zip(dist, dist[1:]))


def test_metric_closed_forms():
    a = np.random.default_rng(0).random((1, 16, 16))
    assert mse(a, a) == 0.0 and ssim(a, a) == pytest.approx(1.0) and psnr(a, a) == 100.0
    z, h = np.zeros((8, 8)), np.full((8, 8), 0.5)
    assert mse(z, h) == 0.25
    assert psnr(z, h) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(InvalidArgument):
        mse(z, h[:4])


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16))
    noise = rng.normal(size=(16, 16))
    vals = [ssim(a, a + s * noise) for s in (1e-4, 0.01, 0.05, 0.2)]
    assert vals[0] < 1.0 and all(x > y for x, y in zip(vals, vals[1:]))


def test_background_consistency():
    src = np.random.default_rng(2).random((1, 4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    mask[:, :2] = True
    assert background_consistency(src, src, mask) == 0.0
    inside = src.copy()
    inside[0, :, :2] += 1.0
    assert background_consistency(src, inside, mask) == 0.0
    assert background_consistency(src, src + 0.1, mask) == pytest.approx(0.01)
    with pytest.raises(InvalidInput):
        background_consistency(src, src, np.ones((4, 4), dtype=bool))


def test_alignment_proxy():
    means = np.stack([np.zeros((1, 2, 2)), np.full((1, 2, 2), 4.0)])
    assert alignment_proxy(means[1], 1, means) > 0.99
    assert alignment_proxy(np.full((1, 2, 2), 2.0), 1, means) == pytest.approx(0.5)
    scores = [alignment_proxy((1 - a) * means[1] + a * means[0], 1, means) for a in np.linspace(0, 1, 6)]
    assert all(x > y for x, y in zip(scores, scores[1:]))
    with pytest.raises(InvalidArgument):
        alignment_proxy(means[0], 2, means)


@pytest.fixture(scope="module")
def tiny_model():
    sc = get_scenario("shapes16")
    return sc, MlpFlowModel(sc.latent_shape, 2, hidden=(16,), time_dim=4, cond_dim=2, seed=0)


def test_variant_priors_differ(tiny_model):
    sc, _ = tiny_model
    for seed in range(3):
        x = sc.source(seed)
        prints = {v: fingerprint(variant_prior(v, x, sc.latent_shape)) for v in VARIANTS}
        assert prints["baseline"] == "none"
        assert len(set(prints.values())) == len(VARIANTS)


def test_ablation_baseline_is_flowedit(tiny_model):
    sc, model = tiny_model
    cfg = EditConfig(num_steps=8)
    rows = run_ablation("baseline", sc, model, [0, 1], cfg)
    means = sc.generate(0).class_means()
    for row in rows:
        run = edit(model, sc.source(row["seed"]), 0, 1, None, EditConfig(num_steps=8, seed=row["seed"]),
                   method="flowedit")
        assert row["ssim"] == ssim(sc.source(row["seed"]), run.output)
        assert row["alignment"] == alignment_proxy(run.output, 1, means)
    with pytest.raises(InvalidArgument):
        run_ablation("nope", sc, model, [0])


def test_sweep_contract(tiny_model):
    sc, model = tiny_model
    rows = sensitivity_sweep([0.0, 0.5, 0.9, 1.0], sc, model, [0, 1], EditConfig(num_steps=4))
    assert [r["lambda_stoch"] for r in rows] == [0.0, 0.5, 0.9, 1.0]
    assert all(r["n_seeds"] == 2 and r["lambda_struct"] == pytest.approx(1 - r["lambda_stoch"]) for r in rows)
    text = rows_to_csv(rows)
    assert text.splitlines()[0].startswith("lambda_stoch,lambda_struct,n_seeds")
    assert len(text.splitlines()) == 5
    with pytest.raises(InvalidArgument):
        sensitivity_sweep([1.5], sc, model, [0])
