"""
Tests for the artifact store: field containers, path containers and CSV tables
"""
import json

import numpy as np
import pytest

from app.models.schemas import CurvatureRecord
from app.services.energy import PotentialPath
from app.services.errors import DomainError, HessianLabError
from app.services.field_store import FieldStore, field_statistics, path_statistics
from app.services.torusfield import PotentialField, TorusBackground, random_potential


@pytest.fixture
def store(tmp_path):
    return FieldStore(tmp_path / "run")


def test_field_container_keeps_grid_and_role(store):
    bg = TorusBackground(n=2, N=8, collapse_imag=True, omega=np.array([[2.0, 0.3j], [-0.3j, 1.0]]))
    phi = random_potential(bg, np.random.default_rng(0), 0.05, role="phi")
    path = store.save_field("phi", phi, k=2)
    loaded, meta = FieldStore.load(path)
    assert isinstance(loaded, PotentialField)
    np.testing.assert_array_equal(loaded.data, phi.data)
    np.testing.assert_allclose(loaded.background.omega, bg.omega)
    assert loaded.background.collapse_imag
    assert loaded.role == "phi"
    assert meta["k"] == 2
    assert store.artifacts == ["phi.npz"]


def test_path_container(store):
    bg = TorusBackground(n=1, N=8)
    u = random_potential(bg, np.random.default_rng(1), 0.02).data
    path = PotentialPath.sample(lambda t: t * u, bg, [0.0, 0.5, 1.0])
    loaded, meta = FieldStore.load(store.save_path("geodesic", path))
    assert meta["kind"] == "path"
    assert isinstance(loaded, PotentialPath)
    np.testing.assert_allclose(loaded.times, [0.0, 0.5, 1.0])
    stats = path_statistics(loaded)
    assert stats["samples"] == 3
    assert stats["sup_norms"][0] == 0.0


def test_missing_artifact(tmp_path):
    with pytest.raises(HessianLabError):
        FieldStore.load(tmp_path / "nothing.npz")


def test_csv_column_order_and_float_format(store):
    path = store.write_csv("table", ["a", "b"], [(1, 0.1), (2, np.float64(1 / 3))])
    lines = path.read_text().splitlines()
    assert lines == ["a,b", "1,0.1", f"2,{1 / 3!r}"]


def test_models_csv(store):
    rows = [CurvatureRecord(sample_id=i, n=2, k=1, value=-float(i), bound_margin=float(i)) for i in range(3)]
    lines = store.write_models_csv("curvature", rows).read_text().splitlines()
    assert lines[0] == "sample_id,n,k,value,bound_margin"
    assert len(lines) == 4
    with pytest.raises(DomainError):
        store.write_models_csv("empty", [])
    header_only = store.write_models_csv("empty", [], header=["sample_id"])
    assert header_only.read_text().splitlines() == ["sample_id"]


def test_slice_export(store):
    bg = TorusBackground(n=2, N=4, collapse_imag=True)
    data = np.arange(16, dtype=float).reshape(bg.shape)
    lines = store.export_slice_csv("slice", PotentialField(bg, data)).read_text().splitlines()
    assert lines[0] == "row,0,1,2,3"
    assert lines[1] == "0,0.0,1.0,2.0,3.0"
    with pytest.raises(DomainError):
        store.export_slice_csv("bad", PotentialField(bg, data), axes=(0, 0))


def test_json_of_numpy_values(store):
    path = store.write_json("report", {"value": np.float64(0.5), "flags": np.array([True, False])})
    assert json.loads(path.read_text()) == {"value": 0.5, "flags": [True, False]}


def test_field_statistics():
    bg = TorusBackground(n=1, N=8, collapse_imag=True)
    stats = field_statistics(PotentialField(bg, np.linspace(-1.0, 0.5, 8).reshape(bg.shape), "F"))
    assert stats["role"] == "F"
    assert stats["min"] == pytest.approx(-1.0)
    assert stats["max"] == pytest.approx(0.5)
    assert stats["sup_norm"] == pytest.approx(1.0)
