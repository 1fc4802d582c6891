from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from snredit.errors import FormatError
from snredit.formats import (
    fgrid_bytes,
    parse_fgrid,
    read_fgrid,
    read_fgrid_stack,
    read_pgm,
    render_latent,
    svg_line_plot,
    write_fgrid,
    write_fgrid_stack,
    write_pgm,
)


def test_fgrid_layout(tmp_path):
    x = np.arange(12, dtype=np.float64).reshape(3, 2, 2) / 4
    data = fgrid_bytes(x)
    assert data[:4] == b"FGRD"
    assert int.from_bytes(data[4:6], "little") == 1
    assert [int.from_bytes(data[k:k + 4], "little") for k in (6, 10, 14)] == [3, 2, 2]
    assert np.array_equal(np.frombuffer(data[18:], "<f4"), x.ravel().astype(np.float32))
    write_fgrid(tmp_path / "a.fgrid", x)
    assert np.array_equal(read_fgrid(tmp_path / "a.fgrid"), x)


def test_fgrid_2d_and_stack(tmp_path):
    g = np.random.default_rng(0).random((3, 5)).astype(np.float32).astype(np.float64)
    write_fgrid_stack(tmp_path / "s.fgrid", [g, g[None] * 2])
    a, b = read_fgrid_stack(tmp_path / "s.fgrid")
    assert np.array_equal(a[0], g) and np.array_equal(b[0], g * 2)


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + (2).to_bytes(2, "little") + d[6:],
    lambda d: d[:10],
    lambda d: d[:-1],
])
def test_fgrid_corruption(tmp_path, mutate):
    data = mutate(fgrid_bytes(np.ones((1, 2, 2))))
    with pytest.raises(FormatError):
        parse_fgrid(data)


def test_fgrid_trailing_bytes(tmp_path):
    p = tmp_path / "t.fgrid"
    p.write_bytes(fgrid_bytes(np.ones((1, 1, 1))) + b"\0")
    with pytest.raises(FormatError):
        read_fgrid(p)


def test_pgm_round_trip(tmp_path):
    img = (np.arange(12).reshape(3, 4) * 20).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img / 255.0)


def test_pgm_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# hi\n2 1\n255\n" + bytes([0, 255]))
    assert read_pgm(p).tolist() == [[0.0, 1.0]]


def test_pgm_rejects_other_maxval(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(FormatError):
        read_pgm(p)


def test_render_latent_picks_format(tmp_path):
    assert render_latent(tmp_path / "g", np.zeros((1, 2, 2))).suffix == ".pgm"
    p = render_latent(tmp_path / "c", np.ones((3, 2, 2)))
    assert p.suffix == ".ppm" and p.read_bytes().startswith(b"P6")
    assert render_latent(tmp_path / "f", np.zeros((4, 2, 2))).suffix == ".pgm"


def test_svg_is_well_formed(tmp_path):
    svg_line_plot(tmp_path / "p.svg", {"a<b": ([0, 1, 2], [1, 3, 2]), "flat": ([0, 1], [5, 5])}, "t & t", "x")
    root = ET.parse(tmp_path / "p.svg").getroot()
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("polyline")]) == 2
