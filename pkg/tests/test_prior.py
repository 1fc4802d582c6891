from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import flood_fill_components, per_pixel_owner
from snredit.errors import FormatError, InvalidArgument, InvalidInput
from snredit.prior import (
    PriorConfig,
    Region,
    assign_regions,
    build_latent_prior,
    build_structural_map,
    init_projection,
    load_masks,
    paint_regions,
    pixel_coordinates,
    prior_from_image,
    prior_from_regions,
    project,
    region_descriptor,
    rle_decode_row,
    rle_encode_row,
    rope_encode,
    rope_encode_many,
    save_masks,
    segment_synthetic,
)
from snredit.scenarios import get_scenario


def two_rectangles(h=16, w=16):
    img = np.full((1, h, w), 0.1)
    img[0, 2:6, 2:7] = 0.6
    img[0, 9:14, 8:15] = 0.9
    return img


def test_segment_two_rectangles_matches_flood_fill():
    img = two_rectangles()
    regions = segment_synthetic(img, quantize_levels=4, min_area=0.001, stability_threshold=0.85)
    assert len(regions) == 3
    assert all(r.stability == 1.0 for r in regions)
    expected = flood_fill_components(np.floor(img[0] * 4).astype(int))
    got = sorted(tuple(r.mask.ravel()) for r in regions)
    assert got == sorted(tuple(m.ravel()) for m in expected)
    # ids follow stability, then area
    assert [r.id for r in regions] == [0, 1, 2]
    assert regions[0].area_fraction >= regions[1].area_fraction >= regions[2].area_fraction


@pytest.mark.parametrize("value", [0.0, 0.3, 1.0])
def test_segment_constant_image(value):
    regions = segment_synthetic(np.full((1, 8, 8), value))
    assert len(regions) == 1
    assert regions[0].mask.all() and regions[0].stability == 1.0


def test_stability_filter_is_monotone_on_dither():
    rng = np.random.default_rng(0)
    img = 0.5 + 0.08 * rng.standard_normal((1, 16, 16))
    loose = segment_synthetic(img, stability_threshold=0.0)
    strict = segment_synthetic(img, stability_threshold=0.85)
    assert len(strict) < len(loose)
    assert all(r.stability >= 0.85 for r in strict)


def test_min_area_filter():
    img = np.full((1, 10, 10), 0.1)
    img[0, 0, 0] = 0.9
    assert len(segment_synthetic(img, min_area=0.001)) == 2
    assert len(segment_synthetic(img, min_area=0.02)) == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_components_match_flood_fill_on_random_labels(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 3, (1, 9, 11)) / 3.0 + 0.05
    regions = segment_synthetic(img, quantize_levels=3, min_area=1e-6, stability_threshold=0.0)
    labels = np.floor(img[0] * 3).astype(int)
    expected = sorted(tuple(m.ravel()) for m in flood_fill_components(labels))
    assert sorted(tuple(r.mask.ravel()) for r in regions) == expected


def test_multichannel_labels_split_on_any_channel():
    img = np.zeros((3, 4, 4))
    img[1, :, 2:] = 0.9
    regions = segment_synthetic(img)
    assert len(regions) == 2


def test_segment_rejects_bad_args():
    with pytest.raises(InvalidArgument):
        segment_synthetic(np.zeros((1, 4, 4)), quantize_levels=0)
    with pytest.raises(InvalidArgument):
        segment_synthetic(np.zeros((1, 4, 4)), min_area=0.0)
    with pytest.raises(InvalidInput):
        segment_synthetic(np.zeros((4, 4)))


def test_shapes16_samples_have_structure():
    sc = get_scenario("shapes16")
    data = sc.generate(0, 200)
    assert all(len(segment_synthetic(x)) >= 2 for x in data.samples)


# --- masks -------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30))
def test_rle_round_trip(row):
    runs = rle_encode_row(row)
    assert sum(runs) == len(row)
    assert rle_decode_row(runs, len(row)).tolist() == row


def test_mask_file_round_trip(tmp_path):
    regions = segment_synthetic(two_rectangles())
    save_masks(tmp_path / "m.json", regions)
    back = load_masks(tmp_path / "m.json")
    assert [r.id for r in back] == [r.id for r in regions]
    assert all(np.array_equal(a.mask, b.mask) and a.stability == b.stability for a, b in zip(back, regions))


def write_doc(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_load_full_frame_and_overlapping(tmp_path):
    full = {"height": 2, "width": 3, "masks": [{"id": 0, "stability": 1.0, "rle": [[0, 3], [0, 3]]}]}
    assert len(load_masks(write_doc(tmp_path / "a.json", full))) == 1
    overlap = {"height": 2, "width": 3, "masks": [
        {"id": 0, "stability": 0.9, "rle": [[0, 2, 1], [0, 3]]},
        {"id": 1, "stability": 0.95, "rle": [[1, 2], [3]]},
    ]}
    regions = load_masks(write_doc(tmp_path / "b.json", overlap))
    assert len(regions) == 2 and (regions[0].mask & regions[1].mask).any()


@pytest.mark.parametrize("doc", [
    {"height": 3, "width": 3, "masks": [{"id": 0, "stability": 1.0, "rle": [[0, 3], [0, 3]]}]},
    {"height": 2, "width": 4, "masks": [{"id": 0, "stability": 1.0, "rle": [[0, 3], [0, 3]]}]},
    {"height": 1, "width": 2, "masks": [{"id": 0, "stability": 1.5, "rle": [[0, 2]]}]},
    {"height": 1, "width": 2, "masks": [{"id": 0, "stability": 1.0, "rle": [[2]]}]},
    {"width": 2, "masks": []},
])
def test_load_masks_validation(tmp_path, doc):
    with pytest.raises(FormatError):
        load_masks(write_doc(tmp_path / "bad.json", doc))


def test_load_masks_bad_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{", encoding="utf-8")
    with pytest.raises(FormatError):
        load_masks(p)


# --- RoPE ----------------------------------------------------------------------


def test_rope_origin_pattern():
    e = rope_encode((0.0, 0.0), 16)
    assert e[0::2].tolist() == [1.0] * 8 and e[1::2].tolist() == [0.0] * 8


def test_rope_norm():
    pts = np.random.default_rng(0).random((1000, 2))
    for c in (4, 8, 32):
        np.testing.assert_allclose(np.linalg.norm(rope_encode_many(pts, c), axis=1), np.sqrt(c / 2), atol=1e-6)


def test_rope_matches_scalar_trig():
    x, y = 0.5, 0.25
    e = rope_encode((x, y), 4, 10000.0)
    # per axis: one frequency pair with theta = 2*pi * 10000^0
    th = 2 * np.pi
    expected = [np.cos(th * x), np.sin(th * x), np.cos(th * y), np.sin(th * y)]
    np.testing.assert_allclose(e, expected, atol=1e-12)
    e8 = rope_encode((x, y), 8, 100.0)
    th1 = 2 * np.pi * 100.0 ** (-2 * 1 / 4)
    np.testing.assert_allclose(e8[2:4], [np.cos(th1 * x), np.sin(th1 * x)], atol=1e-12)
    np.testing.assert_allclose(e8[6:8], [np.cos(th1 * y), np.sin(th1 * y)], atol=1e-12)


@pytest.mark.parametrize("c", [3, 6, 2, 0])
def test_rope_rejects_bad_dimension(c):
    with pytest.raises(InvalidArgument):
        rope_encode((0.1, 0.2), c)


def test_descriptor_single_cell_and_full_frame():
    m = np.zeros((5, 7), dtype=bool)
    m[3, 4] = True
    np.testing.assert_array_equal(region_descriptor(Region(m, 1.0, 0), 8), rope_encode((4 / 6, 3 / 4), 8))
    full = Region(np.ones((32, 32), dtype=bool), 1.0, 0)
    ref = np.zeros(32)
    for r in range(32):
        for c in range(32):
            ref += rope_encode((c / 31, r / 31), 32)
    np.testing.assert_allclose(region_descriptor(full, 32), ref / 1024, atol=1e-6)


def test_descriptor_two_symmetric_cells():
    # cells at x = 0.25 and 0.75 on one row: the first sine averages to
    # (sin(2pi*0.25) + sin(2pi*0.75)) / 2 = 0
    m = np.zeros((1, 5), dtype=bool)
    m[0, [1, 3]] = True
    d = region_descriptor(Region(m, 1.0, 0), 4)
    assert abs(d[1]) < 1e-12
    assert abs(d[0] - 0.5 * (np.cos(np.pi / 2) + np.cos(3 * np.pi / 2))) < 1e-12


def test_descriptor_convexity():
    rng = np.random.default_rng(4)
    m = rng.random((9, 9)) < 0.3
    m[0, 0] = True
    d = region_descriptor(Region(m, 1.0, 0), 16)
    enc = rope_encode_many(pixel_coordinates(9, 9)[m.ravel()], 16)
    assert np.all(d >= enc.min(axis=0) - 1e-12) and np.all(d <= enc.max(axis=0) + 1e-12)


# --- projection -------------------------------------------------------------------


def test_projection_determinism_and_bounds():
    assert np.array_equal(init_projection(3, 16).weights, init_projection(3, 16).weights)
    assert np.all(np.abs(init_projection(5, 16).weights) < 0.25)
    pooled = np.concatenate([init_projection(s, 100).weights for s in range(1000)])
    assert pooled.size == 100_000
    assert abs(pooled.mean()) <= 0.003


def test_projection_is_frozen():
    w = init_projection(0, 8)
    with pytest.raises(ValueError):
        w.weights[0] = 1.0


def test_project_linearity_and_dimension():
    w = init_projection(1, 8)
    s = np.random.default_rng(0).random(8)
    assert project(w, np.zeros(8)) == 0.0
    assert project(w, 2 * s) == pytest.approx(2 * project(w, s), rel=1e-15)
    with pytest.raises(InvalidArgument):
        project(w, np.zeros(4))


def test_projection_collision_study():
    rng = np.random.default_rng(11)
    ok = 0
    for seed in range(100):
        descs = rng.random((10, 32))
        vals = np.array([project(init_projection(seed, 32), d) for d in descs])
        gaps = np.abs(vals[:, None] - vals[None, :])[np.triu_indices(10, 1)]
        ok += bool(np.all(gaps > 1e-9))
    assert ok >= 99


# --- maps -----------------------------------------------------------------------


def test_full_frame_region_gives_constant_map():
    r = Region(np.ones((4, 4), dtype=bool), 1.0, 0)
    w = init_projection(0, 8)
    d = region_descriptor(r, 8)
    assert np.all(build_structural_map([r], [d], w) == project(w, d))


def test_overlap_goes_to_more_stable_region():
    a = np.zeros((4, 4), dtype=bool)
    a[:3, :3] = True
    b = np.zeros((4, 4), dtype=bool)
    b[1:, 1:] = True
    regions = [Region(a, 0.90, 0), Region(b, 0.95, 1)]
    out = paint_regions(regions, [1.0, 2.0])
    assert np.all(out[1:3, 1:3] == 2.0)
    assert out[0, 0] == 1.0 and out[3, 0] == 0.0


def test_equal_stability_tie_goes_to_lower_id():
    m = np.ones((2, 2), dtype=bool)
    regions = [Region(m, 0.9, 5), Region(m, 0.9, 2)]
    assert np.all(assign_regions(regions) == 1)


def test_assign_matches_brute_force_on_random_layouts():
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = int(rng.integers(1, 6))
        masks = [rng.random((7, 6)) < 0.4 for _ in range(k)]
        for m in masks:
            m[rng.integers(7), rng.integers(6)] = True
        stabs = [float(v) for v in rng.choice([0.85, 0.9, 0.95, 1.0], size=k)]
        ids = [int(v) for v in rng.permutation(k)]
        regions = [Region(m, s, i) for m, s, i in zip(masks, stabs, ids)]
        assert np.array_equal(assign_regions(regions), per_pixel_owner(masks, stabs, ids))


def test_region_permutation_invariance():
    regions = segment_synthetic(two_rectangles())
    w = init_projection(0, 32)
    descs = [region_descriptor(r, 32) for r in regions]
    base = build_structural_map(regions, descs, w)
    perm = [2, 0, 1]
    assert np.array_equal(build_structural_map([regions[k] for k in perm], [descs[k] for k in perm], w), base)


def test_latent_prior_examples():
    assert not build_latent_prior(np.full((8, 8), 3.0), (4, 4, 4)).latent.any()
    two = np.zeros((8, 8))
    two[:, 4:] = 5.0
    lat = build_latent_prior(two, (2, 4, 4)).latent
    assert set(np.unique(lat)) == {-1.0, 1.0}
    rnd = build_latent_prior(np.random.default_rng(0).random((16, 16)), (3, 5, 5)).latent
    assert lat.shape == (2, 4, 4) and rnd.shape == (3, 5, 5)
    assert rnd.min() >= -1 and rnd.max() <= 1
    assert np.array_equal(rnd[0], rnd[1]) and np.array_equal(rnd[0], rnd[2])


def test_weight_scale_is_absorbed_by_normalization():
    regions = segment_synthetic(two_rectangles())
    w = init_projection(0, 32)
    w2 = type(w)(w.weights * 4.0, w.seed)
    descs = [region_descriptor(r, 32) for r in regions]
    m1 = build_structural_map(regions, descs, w)
    m2 = build_structural_map(regions, descs, w2)
    assert np.array_equal(m2, 4.0 * m1)
    assert np.array_equal(build_latent_prior(m1, (4, 4, 4)).latent, build_latent_prior(m2, (4, 4, 4)).latent)


def test_prior_pipeline_determinism_and_fallback():
    img = two_rectangles()
    a = prior_from_image(img, (4, 8, 8))
    b = prior_from_image(img, (4, 8, 8))
    assert np.array_equal(a.map, b.map) and np.array_equal(a.latent, b.latent)
    assert a.latent.min() == -1.0 and a.latent.max() == 1.0
    # no surviving region -> zero prior
    noisy = np.random.default_rng(0).random((1, 8, 8))
    z = prior_from_image(noisy, (1, 8, 8), PriorConfig(stability_threshold=1.0, min_area=0.5))
    assert not z.latent.any()
    with pytest.raises(InvalidArgument):
        prior_from_regions(segment_synthetic(img), (4, 8, 8), PriorConfig(c_desc=6))
