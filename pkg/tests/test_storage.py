import xml.etree.ElementTree as ET

import numpy as np
import pytest

from app.errors import ConfigError, ImageFormatError
from app.models import ChainRecord, ShapeRecord
from app.services.images import GrayImage, OrientedPointCloud
from app.storage import curve_vertices


def test_polygon_json(tmp_storage, tmp_path, make_circle) -> None:
    c = make_circle(1.5, center=(1.0, 2.0))
    path = tmp_storage.save_polygon(tmp_path / "circle.json", c)
    loaded = tmp_storage.load_polygon(path)
    assert loaded.degree == 1
    assert np.allclose(loaded.coords, c.coords)


def test_malformed_json(tmp_storage, tmp_path) -> None:
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        tmp_storage.read_json(bad)

    short = tmp_path / "short.json"
    short.write_text('{"degree": 2, "coords": [0, 0, 1, 1]}')
    with pytest.raises(ConfigError, match="coords|degree"):
        tmp_storage.load_polygon(short)


def test_spec_file_with_paired_sigma(tmp_storage, tmp_path) -> None:
    path = tmp_storage.write_json(
        tmp_path / "spec.json",
        {
            "degrees": [1, 1, 2],
            "sigma": [{"diag": 0.0}, {"diag": 0.0}, {"paired": [[1, 4], [2, 3]], "variance": 0.1}],
        },
    )
    spec = tmp_storage.load_spec(path).to_spec()
    assert spec.degrees == (1, 1, 2)
    assert spec.sigma[2][0, 6] == pytest.approx(0.1)


def test_cloud_csv(tmp_storage, tmp_path) -> None:
    plain = tmp_storage.save_cloud(tmp_path / "plain.csv", OrientedPointCloud(points=np.arange(8.0).reshape(4, 2)))
    cloud = tmp_storage.load_cloud(plain)
    assert cloud.count == 4
    assert not cloud.has_angles

    oriented = OrientedPointCloud(points=np.zeros((3, 2)), omega=np.array([0.0, 1.0, -1.0]))
    cloud = tmp_storage.load_cloud(tmp_storage.save_cloud(tmp_path / "oriented.csv", oriented))
    assert np.allclose(cloud.theta, oriented.theta)

    headerless = tmp_path / "headerless.csv"
    headerless.write_text("1,2\n3,4\n")
    with pytest.raises(ConfigError):
        tmp_storage.load_cloud(headerless)


def test_sample_table(tmp_storage, tmp_path, make_circle) -> None:
    path = tmp_storage.save_samples(tmp_path / "samples.csv", make_circle(1.0), 8)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,y"
    assert len(lines) == 9


def test_pgm_binary_and_plain(tmp_storage, tmp_path) -> None:
    pixels = np.arange(12, dtype=float).reshape(3, 4) * 20
    path = tmp_storage.save_pgm(tmp_path / "ramp.pgm", GrayImage(pixels=pixels))
    assert path.read_bytes().startswith(b"P5")
    assert np.array_equal(tmp_storage.load_pgm(path).pixels, pixels)

    plain = tmp_path / "plain.pgm"
    plain.write_text("P2\n3 2\n255\n0 10 20\n30 40 50\n")
    image = tmp_storage.load_pgm(plain)
    assert image.width == 3 and image.height == 2
    assert np.array_equal(image.pixels, [[0, 10, 20], [30, 40, 50]])


def test_invalid_raster(tmp_storage, tmp_path) -> None:
    junk = tmp_path / "junk.pgm"
    junk.write_bytes(b"definitely not an image")
    with pytest.raises(ImageFormatError):
        tmp_storage.load_pgm(junk)
    with pytest.raises(ImageFormatError):
        tmp_storage.load_pgm(tmp_path / "missing.pgm")


def test_svg_render(tmp_storage, make_circle) -> None:
    svg = tmp_storage.render_svg([make_circle(1.0)], samples=4)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    curves = curve_vertices(svg)
    assert len(curves) == 1
    assert curves[0].shape == (4, 2)
    curve = next(node for node in root.iter() if node.get("class") == "curve")
    assert curve.tag.endswith("path")
    assert curve.get("d").startswith("M ") and curve.get("d").endswith(" Z")
    assert "<polygon" not in svg


def test_svg_circle_is_accurate(tmp_storage, make_circle) -> None:
    svg = tmp_storage.render_svg([make_circle(5.0, center=(1.0, 1.0))], samples=512, points=np.zeros((3, 2)))
    vertices = curve_vertices(svg)[0]
    radii = np.linalg.norm(vertices - [1.0, 1.0], axis=1)
    assert np.max(np.abs(radii - 5.0)) < 0.005 * 5.0
    assert 'class="observations"' in svg
    assert 'class="control-points"' in svg


def test_chain_jsonl(tmp_storage, tmp_path) -> None:
    records = [
        ChainRecord(
            iteration=i,
            tau_p=1.0 + i,
            log_likelihood=-float(i),
            log_posterior=-2.0 * i,
            shapes=[ShapeRecord(m=[0.0, 0.0], deformations=[[0.0] * 6], polygon=[0.0] * 6)],
        )
        for i in (1, 2, 3)
    ]
    path = tmp_storage.write_chain(tmp_path / "chain.jsonl", records)
    assert len(path.read_text().splitlines()) == 3
    assert tmp_storage.read_chain(path) == records
