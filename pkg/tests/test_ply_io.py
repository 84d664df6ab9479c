from __future__ import annotations

import numpy as np
import pytest
from plyfile import PlyData
from plyfile import PlyElement

from app.exception_handlers import PlyParseError
from app.modules.gaussians import GaussianCloud
from app.modules.ply_io import construct_list_of_attributes
from app.modules.ply_io import load_ply
from app.modules.ply_io import save_ply


@pytest.fixture
def cloud():
    rng = np.random.default_rng(3)
    n = 25
    return GaussianCloud(
        mu=rng.normal(size=(n, 3)),
        quat=rng.normal(size=(n, 4)),
        log_scale=rng.uniform(-4.0, 0.0, size=(n, 3)),
        logit_opacity=rng.normal(size=n),
        color=rng.uniform(size=(n, 3)),
    )


def test_header_layout(tmp_path, cloud):
    path = tmp_path / "cloud.ply"
    save_ply(cloud, path)
    plydata = PlyData.read(str(path))
    assert not plydata.text
    assert plydata.byte_order == "<"
    vertex = plydata["vertex"]
    assert vertex.count == len(cloud)
    assert [p.name for p in vertex.properties] == construct_list_of_attributes()
    assert all(p.val_dtype.endswith("f4") for p in vertex.properties)
    np.testing.assert_array_equal(vertex["nx"], 0.0)


def test_round_trip_float32(tmp_path, cloud):
    path = tmp_path / "cloud.ply"
    save_ply(cloud, path)
    loaded = load_ply(path)
    assert len(loaded) == len(cloud)
    np.testing.assert_array_equal(loaded.mu, cloud.mu.astype(np.float32))
    np.testing.assert_array_equal(loaded.quat, cloud.quat.astype(np.float32))
    np.testing.assert_array_equal(loaded.log_scale, cloud.log_scale.astype(np.float32))
    np.testing.assert_array_equal(loaded.logit_opacity, cloud.logit_opacity.astype(np.float32))
    np.testing.assert_allclose(loaded.color, cloud.color, atol=1e-6)
    assert loaded.ids.tolist() == list(range(len(cloud)))


def test_loaded_cloud_is_fixed_point(tmp_path, cloud):
    first = tmp_path / "first.ply"
    second = tmp_path / "second.ply"
    save_ply(cloud, first)
    loaded = load_ply(first)
    save_ply(loaded, second)
    again = load_ply(second)
    for name in ("mu", "quat", "log_scale", "logit_opacity", "color"):
        np.testing.assert_array_equal(getattr(again, name), getattr(loaded, name))
    assert first.read_bytes() == second.read_bytes()


def test_empty_cloud(tmp_path):
    path = tmp_path / "empty.ply"
    save_ply(GaussianCloud.empty(), path)
    assert len(load_ply(path)) == 0


def test_creates_parent_directories(tmp_path, cloud):
    path = tmp_path / "nested" / "dir" / "cloud.ply"
    save_ply(cloud, path)
    assert path.exists()


def test_malformed_header(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"not a ply file\n")
    with pytest.raises(PlyParseError) as excinfo:
        load_ply(path)
    assert excinfo.value.name == "header"


def test_truncated_payload(tmp_path, cloud):
    path = tmp_path / "cloud.ply"
    save_ply(cloud, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 30])
    with pytest.raises(PlyParseError):
        load_ply(path)


@pytest.mark.parametrize(
    "names, message",
    [
        (["x", "y", "z"], "missing properties"),
        (construct_list_of_attributes() + ["extra"], "unexpected properties"),
    ],
)
def test_wrong_property_set(tmp_path, names, message):
    elements = np.zeros(3, dtype=[(name, "<f4") for name in names])
    path = tmp_path / "other.ply"
    PlyData([PlyElement.describe(elements, "vertex")], text=False, byte_order="<").write(str(path))
    with pytest.raises(PlyParseError) as excinfo:
        load_ply(path)
    assert excinfo.value.name == "vertex"
    assert message in str(excinfo.value)


def test_wrong_property_type(tmp_path):
    dtype = [(name, "<f8" if name == "opacity" else "<f4") for name in construct_list_of_attributes()]
    path = tmp_path / "double.ply"
    PlyData([PlyElement.describe(np.zeros(2, dtype=dtype), "vertex")], byte_order="<").write(str(path))
    with pytest.raises(PlyParseError) as excinfo:
        load_ply(path)
    assert excinfo.value.name == "opacity"


def test_missing_vertex_element(tmp_path):
    path = tmp_path / "faces.ply"
    PlyData([PlyElement.describe(np.zeros(2, dtype=[("a", "<f4")]), "face")], byte_order="<").write(str(path))
    with pytest.raises(PlyParseError) as excinfo:
        load_ply(path)
    assert excinfo.value.name == "vertex"
