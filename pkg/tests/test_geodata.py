import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spregimes.errors import ConfigError, DataError
from spregimes.geodata import (
    GeoDataset,
    InputSpec,
    InstrumentSpec,
    ModelSpec,
    equirectangular,
    load_csv,
    log_transform,
    validate,
    write_csv,
)

OLIVE_SPEC = ModelSpec(
    response="olives_kg",
    inputs=tuple(InputSpec(c) for c in ("land_ha", "labor_h", "capital_h", "inputs_eur")),
    coords=("lon", "lat"),
)


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _dataset(n=8, k=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return GeoDataset(
        ids=[f"f{i}" for i in range(n)],
        coords=rng.uniform(size=(n, 2)),
        response=rng.uniform(1, 10, n),
        inputs=rng.uniform(1, 10, (n, k)),
        response_name="output",
        **kw,
    )


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        path = _write(
            tmp_path,
            "id,lon,lat,y,x\n1,0,0,1,2\n2,1,0,2,3\n3,0,1,3,4\n",
        )
        spec = ModelSpec(response="y", inputs=(InputSpec("x"),))
        # n >= 2(k+1) = 4 is a dataset invariant, so 3 rows are refused
        with pytest.raises(DataError, match="at least 4"):
            load_csv(path, spec)

    def test_minimal_file_keeps_row_order(self, tmp_path):
        rows = "".join(f"r{i},{i},{i % 2},{i + 1},{i + 2}\n" for i in range(4))
        path = _write(tmp_path, "id,lon,lat,y,x\n" + rows)
        ds = load_csv(path, ModelSpec(response="y", inputs=(InputSpec("x"),)))
        assert ds.n == 4
        assert ds.ids == ("r0", "r1", "r2", "r3")
        np.testing.assert_array_equal(ds.response, [1, 2, 3, 4])

    def test_olive_schema_has_four_inputs(self, tmp_path):
        header = "id,lon,lat,olives_kg,land_ha,labor_h,capital_h,inputs_eur\n"
        rows = "".join(
            f"{i},{11 + i / 10},{43 + i / 7},{100 + i},{1 + i},{50 + i},{3 + i},{200 + i}\n" for i in range(12)
        )
        ds = load_csv(_write(tmp_path, header + rows), OLIVE_SPEC)
        assert ds.k == 4
        assert ds.input_names == ("land_ha", "labor_h", "capital_h", "inputs_eur")

    def test_zero_response_names_row(self, tmp_path):
        rows = ["1,0,0,5,2", "2,1,0,0,3", "3,0,1,3,4", "4,1,1,3,4"]
        path = _write(tmp_path, "id,lon,lat,y,x\n" + "\n".join(rows) + "\n")
        spec = ModelSpec(response="y", inputs=(InputSpec("x"),))
        with pytest.raises(DataError, match="row 2"):
            load_csv(path, spec)

    def test_drop_nonpositive(self, tmp_path):
        rows = ["1,0,0,5,2", "2,1,0,0,3"] + [f"{i},{i},{i * i},3,{i}" for i in range(3, 8)]
        path = _write(tmp_path, "id,lon,lat,y,x\n" + "\n".join(rows) + "\n")
        spec = ModelSpec(response="y", inputs=(InputSpec("x"),))
        ds = load_csv(path, spec, drop_nonpositive=True)
        assert "2" not in ds.ids and ds.n == 6

    @pytest.mark.parametrize(
        "text, match",
        [
            ("id,lon,lat,y\n1,0,0,1\n", "missing column"),
            ("id,lon,lat,y,x\n1,0,0,abc,1\n", "non-numeric"),
            ("id,lon,lat,y,x\n1,0,0,1,1\n1,1,1,2,2\n", "duplicate id"),
            ("id,lon,lat,y,x\n", "no data rows"),
            ("id,lon,lat,y,x\n1,,0,1,1\n", "missing value"),
        ],
    )
    def test_errors(self, tmp_path, text, match):
        spec = ModelSpec(response="y", inputs=(InputSpec("x"),))
        with pytest.raises(DataError, match=match):
            load_csv(_write(tmp_path, text), spec)

    def test_missing_instrument_drops_row(self, tmp_path):
        rows = [f"{i},{i},{i % 3},{i + 1},{i + 2},{'' if i == 2 else i - 0.5}" for i in range(8)]
        path = _write(tmp_path, "id,lon,lat,y,x,z\n" + "\n".join(rows) + "\n")
        spec = ModelSpec(
            response="y",
            inputs=(InputSpec("x", endogenous=True),),
            instruments=(InstrumentSpec("z", log=False),),
        )
        ds = load_csv(path, spec)
        assert ds.n == 7 and "2" not in ds.ids

    def test_lonlat_projection(self, tmp_path):
        rows = "".join(f"{i},{10 + i * 0.01},{45 + (i % 2) * 0.01},{i + 1},{i + 2}\n" for i in range(4))
        path = _write(tmp_path, "id,lon,lat,y,x\n" + rows)
        spec = ModelSpec(response="y", inputs=(InputSpec("x"),))
        raw = load_csv(path, spec)
        proj = load_csv(path, spec, project_lonlat=True)
        np.testing.assert_allclose(proj.coords, equirectangular(raw.coords))

    def test_roundtrip_exact(self, tmp_path):
        ds = _dataset(n=10, k=3, seed=4)
        path = tmp_path / "rt.csv"
        write_csv(ds, path)
        spec = ModelSpec(response="output", inputs=tuple(InputSpec(n) for n in ds.input_names), coords=("x", "y"))
        back = load_csv(path, spec)
        np.testing.assert_array_equal(back.coords, ds.coords)
        np.testing.assert_array_equal(back.response, ds.response)
        np.testing.assert_array_equal(back.inputs, ds.inputs)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-6, 1e9, allow_nan=False), min_size=4, max_size=20))
def test_roundtrip_property(tmp_path_factory, values):
    n = len(values)
    ds = GeoDataset(
        ids=[str(i) for i in range(n)],
        coords=np.column_stack([np.arange(n), np.zeros(n)]).astype(float),
        response=np.array(values),
        inputs=np.array(values)[::-1, None],
    )
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    back = load_csv(path, ModelSpec(response="output", inputs=(InputSpec("x1"),), coords=("x", "y")))
    np.testing.assert_array_equal(back.coords, ds.coords)
    np.testing.assert_array_equal(back.response, ds.response)
    np.testing.assert_array_equal(back.inputs, ds.inputs)


class TestDatasetInvariants:
    def test_ids_unique(self):
        with pytest.raises(DataError, match="unique"):
            GeoDataset(ids=["a", "a", "b", "c"], coords=np.zeros((4, 2)), response=np.ones(4), inputs=np.ones(4))

    def test_positive(self):
        with pytest.raises(DataError, match="strictly positive"):
            GeoDataset(ids="abcd", coords=np.zeros((4, 2)), response=np.array([1, 2, 0, 1.0]), inputs=np.ones(4))

    def test_finite_coords(self):
        coords = np.zeros((4, 2))
        coords[1, 0] = np.inf
        with pytest.raises(DataError, match="finite"):
            GeoDataset(ids="abcd", coords=coords, response=np.ones(4), inputs=np.ones(4))

    def test_immutable(self):
        ds = _dataset()
        with pytest.raises(ValueError):
            ds.response[0] = 3.0

    def test_subset(self):
        ds = _dataset(n=10)
        sub = ds.subset([1, 3, 5, 7, 8, 9])
        assert sub.ids == ("f1", "f3", "f5", "f7", "f8", "f9")


class TestModelSpec:
    def test_from_json(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(
            json.dumps(
                {
                    "response": "olives_kg",
                    "inputs": ["land_ha", {"name": "labor_h", "endogenous": True}],
                    "instruments": [{"name": "wage", "log": False}],
                    "coords": ["lon", "lat"],
                }
            )
        )
        spec = ModelSpec.from_json(path)
        assert spec.endogenous == [False, True]
        assert spec.instruments[0].log is False
        assert spec.n_params == 3
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_endogenous_needs_instrument(self):
        with pytest.raises(ConfigError, match="instruments"):
            ModelSpec(response="y", inputs=(InputSpec("x", endogenous=True),))

    @pytest.mark.parametrize("bad", [{}, {"response": "y"}, {"response": "y", "inputs": [{"nome": "x"}]}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelSpec.from_dict(bad)


class TestLogTransform:
    def test_known_logs(self):
        ds = GeoDataset(
            ids="abcd",
            coords=np.arange(8.0).reshape(4, 2),
            response=np.array([1.0, math.e, 2.0, 4.0]),
            inputs=np.array([[1.0], [2.0], [3.0], [4.0]]),
        )
        dm = log_transform(ds)
        assert dm.y[0] == 0.0
        assert dm.y[1] == pytest.approx(1.0, abs=1e-15)
        # smallest produced quantity in the regional summary table
        assert dm.y[2] == pytest.approx(0.693147, abs=1e-6)
        np.testing.assert_array_equal(dm.X[:, 0], 1.0)
        np.testing.assert_allclose(dm.X[:, 1], np.log([1, 2, 3, 4]))
        assert dm.x_names == ("Intercept", "x1")

    def test_no_intercept(self):
        ds = _dataset()
        spec = ModelSpec(response="output", inputs=(InputSpec("x1"), InputSpec("x2")), intercept=False)
        assert log_transform(ds, spec).X.shape == (8, 2)

    def test_instrument_matrix(self):
        ds = _dataset(instruments=np.linspace(-1, 1, 8)[:, None], instrument_names=("price",))
        spec = ModelSpec(
            response="output",
            inputs=(InputSpec("x1"), InputSpec("x2", endogenous=True)),
            instruments=(InstrumentSpec("price", log=False),),
        )
        dm = log_transform(ds, spec)
        assert dm.endogenous == (2,)
        assert dm.z_names == ("Intercept", "x1", "price")
        np.testing.assert_array_equal(dm.Z[:, :2], dm.X[:, :2])
        np.testing.assert_array_equal(dm.Z[:, 2], ds.instruments[:, 0])

    def test_logged_instrument_must_be_positive(self):
        ds = _dataset(instruments=np.linspace(-1, 1, 8)[:, None], instrument_names=("z",))
        spec = ModelSpec(
            response="output",
            inputs=(InputSpec("x1"), InputSpec("x2", endogenous=True)),
            instruments=(InstrumentSpec("z"),),
        )
        with pytest.raises(DataError, match="instrument"):
            log_transform(ds, spec)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(1e-8, 1e8), min_size=4, max_size=30, unique=True))
    def test_monotone(self, values):
        n = len(values)
        v = np.array(values)
        ds = GeoDataset(ids=range(n), coords=np.zeros((n, 2)), response=v, inputs=v[:, None])
        dm = log_transform(ds)
        np.testing.assert_array_equal(np.argsort(dm.X[:, 1]), np.argsort(v))
        np.testing.assert_array_equal(np.argsort(dm.y), np.argsort(v))


class TestValidate:
    def test_duplicate_pair(self):
        coords = np.array([[0, 0], [1, 1], [0, 0], [2, 3], [5, 1]], dtype=float)
        ds = GeoDataset(ids="abcde", coords=coords, response=np.arange(1.0, 6), inputs=np.arange(2.0, 7))
        rep = validate(ds)
        assert rep.duplicate_pairs == [("a", "c")]

    def test_constant_input_warns(self):
        ds = GeoDataset(ids="abcd", coords=np.arange(8.0).reshape(4, 2), response=np.arange(1.0, 5), inputs=np.full(4, 3.0))
        rep = validate(ds)
        assert any("rank deficient" in w for w in rep.warnings)

    def test_summary_layout(self):
        ds = _dataset(n=12, k=3)
        rep = validate(ds)
        assert list(rep.summary.columns) == ["min", "median", "mean", "max", "sd"]
        assert list(rep.summary.index) == ["output", "x1", "x2", "x3"]
        assert rep.summary.loc["output", "sd"] == pytest.approx(np.std(ds.response, ddof=1))
        json.dumps(rep.to_dict())

    def test_does_not_mutate(self):
        ds = _dataset(n=12, k=3)
        before = (ds.coords.copy(), ds.response.copy(), ds.inputs.copy())
        validate(ds)
        for a, b in zip(before, (ds.coords, ds.response, ds.inputs)):
            np.testing.assert_array_equal(a, b)


def test_equirectangular_scale():
    # one degree of latitude is about 111.2 km
    xy = equirectangular(np.array([[0.0, 0.0], [0.0, 1.0]]))
    assert xy[1, 1] - xy[0, 1] == pytest.approx(111.195, rel=1e-4)
