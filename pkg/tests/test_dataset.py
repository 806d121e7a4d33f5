import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madopt.dataset import (TABLE1, Dataset, EmptyPartitionWarning, VariableSpec, descriptive_stats,
                            load_csv, load_schema, pearson, pearson_matrix, save_schema, split,
                            subspace_filter, table1_spec)
from madopt.exceptions import DegenerateColumnError, ParseError, SchemaError
from madopt.scaling import RangeScaler, fit_scaler, scale, unscale
from madopt.synthetic import (DEFAULT_INPUT_CORR, IndefiniteCorrelationError, plant_oracle,
                              repair_correlation, synth_plant_generate)


def _write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))


@pytest.fixture
def small(plant):
    return plant.subset(np.arange(20))


def test_table1_schema_is_consistent():
    assert len(TABLE1) == 12
    cdp = table1_spec("CDP")
    assert (cdp.min, cdp.max, cdp.mean, cdp.std) == (186, 312, 248, 36.82)


@pytest.mark.parametrize("kw", [dict(min=5, max=1), dict(mean=20), dict(std=-1.0)])
def test_variable_spec_invariants(kw):
    base = dict(name="X", unit="u", role="process_input", min=0.0, max=10.0, mean=5.0, std=1.0)
    base.update(kw)
    with pytest.raises(SchemaError):
        VariableSpec(**base)


def test_duplicate_names_rejected():
    v = table1_spec("CDP")
    with pytest.raises(SchemaError):
        Dataset([v, v], np.zeros((3, 2)) + 200)


def test_csv_roundtrip_order_insensitive(tmp_path, small):
    p = tmp_path / "d.csv"
    names = list(small.names)[::-1]
    _write(p, names, small.columns(names))
    d = load_csv(p)
    assert d.names == small.names
    np.testing.assert_array_equal(d.values, small.values)
    assert len(d) == 20


def test_csv_missing_column_named(tmp_path, small):
    p = tmp_path / "d.csv"
    names = [n for n in small.names if n != "GFFR"]
    _write(p, names, small.columns(names))
    with pytest.raises(SchemaError, match="GFFR"):
        load_csv(p)


def test_csv_bad_cell_reports_row(tmp_path, small):
    p = tmp_path / "d.csv"
    rows = small.values.astype(object)
    rows[6, 2] = "n/a"
    _write(p, small.names, rows)
    with pytest.raises(ParseError, match="row 7") as info:
        load_csv(p)
    assert info.value.row == 7 and info.value.column == small.names[2]


def test_csv_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        load_csv(p)


def test_csv_extra_column_warns(tmp_path, small):
    p = tmp_path / "d.csv"
    _write(p, list(small.names) + ["junk"], np.column_stack([small.values, np.ones(20)]))
    with pytest.warns(UserWarning, match="junk"):
        d = load_csv(p)
    assert d.names == small.names


def test_sanity_bounds_enforced(small):
    vals = small.values.copy()
    vals[3, 0] = 10_000.0
    with pytest.raises(ParseError):
        Dataset(small.schema, vals)


def test_schema_sidecar_roundtrip(tmp_path):
    p = tmp_path / "schema.json"
    save_schema(TABLE1, p)
    assert load_schema(p) == TABLE1


def test_scaler_table1_cdp():
    sc = RangeScaler(columns=["CDP"]).fit(np.array([[186.0], [312.0], [248.0]]))
    assert (sc.data_min_[0], sc.data_max_[0]) == (186.0, 312.0)
    assert sc.scale_value("CDP", 186) == 0.0
    assert sc.scale_value("CDP", 312) == 1.0
    assert sc.scale_value("CDP", 248) == pytest.approx(62 / 126, abs=1e-12)


def test_scaler_extremes_and_errors(small):
    sc = fit_scaler(small)
    lo = {n: small.column(n).min() for n in small.names}
    hi = {n: small.column(n).max() for n in small.names}
    np.testing.assert_array_equal(scale(sc, lo), np.zeros(12))
    np.testing.assert_allclose(scale(sc, hi), np.ones(12), atol=1e-15)
    with pytest.raises(KeyError):
        sc.scale_value("nope", 1.0)
    with pytest.raises(DegenerateColumnError):
        RangeScaler().fit(np.ones((4, 2)))


def test_scaler_is_sklearn_estimator():
    sc = RangeScaler(columns=("a", "b"))
    assert sc.get_params() == {"columns": ("a", "b")}
    out = sc.fit_transform(np.array([[0.0, 1.0], [2.0, 3.0]]))
    np.testing.assert_array_equal(out, [[0, 0], [1, 1]])


def test_scaler_roundtrip_random_rows(plant, rng):
    sc = fit_scaler(plant)
    X = rng.uniform(sc.data_min_, sc.data_max_, size=(100, 12))
    back = unscale(sc, scale(sc, X))
    assert np.max(np.abs(back - X) / np.abs(X)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_scaler_roundtrip_property(row):
    sc = RangeScaler.from_bounds({"a": (-5.0, 7.0), "b": (0.1, 0.2), "c": (100.0, 1e4)})
    x = np.array(row)
    np.testing.assert_allclose(sc.inverse_transform(sc.transform(x)), x, rtol=1e-12, atol=1e-9)


def test_descriptive_stats_hand_values():
    spec = [VariableSpec("a", "u", "process_input", 0, 10), VariableSpec("b", "u", "process_input", 0, 10)]
    d = Dataset(spec, [[1, 5], [2, 5], [3, 5]])
    s = descriptive_stats(d)
    assert s["a"]["mean"] == 2.0 and s["a"]["std"] == 1.0
    assert s["b"] == {"min": 5.0, "mean": 5.0, "max": 5.0, "std": 0.0}


def test_pearson_hand_values():
    x = np.array([1.0, 2.0, 3.0])
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    # Centred: x -> (-1, 0, 1), y -> (-7/3, -1/3, 8/3); r = 5 / sqrt(2 * 38/3).
    assert pearson(x, [2, 4, 7]) == pytest.approx(5 / math.sqrt(2 * 38 / 3), abs=1e-12)
    assert round(pearson(x, [2, 4, 7]), 4) == 0.9934


def test_pearson_matrix_invariants(plant):
    C = pearson_matrix(plant)
    np.testing.assert_array_equal(C.values, C.values.T)
    np.testing.assert_array_equal(np.diag(C.values), 1.0)
    assert np.all(np.abs(C.values) <= 1.0)
    assert C["CDP", "GFFR"] > 0.9


def test_pearson_matrix_constant_column_named():
    spec = [VariableSpec("a", "u", "process_input", 0, 10), VariableSpec("k", "u", "process_input", 0, 10)]
    with pytest.raises(DegenerateColumnError, match="k"):
        pearson_matrix(Dataset(spec, [[1, 5], [2, 5], [3, 5]]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 11))
def test_pearson_affine_invariance(a, b, j):
    data = synth_plant_generate(n=200, seed=1)
    vals = data.values.copy()
    vals[:, j] = a * vals[:, j] + b
    C0 = pearson_matrix(data).values
    C1 = pearson_matrix(Dataset(data.schema, vals, check_sanity=False)).values
    assert np.max(np.abs(C0 - C1)) < 1e-10


def test_split_sizes_and_determinism(plant):
    d = plant.subset(np.arange(100))
    a, b = split(d, 0.8, 3)
    assert (len(a), len(b)) == (80, 20)
    a2, _ = split(d, 0.8, 3)
    np.testing.assert_array_equal(a.values, a2.values)
    rows = {tuple(r) for r in a.values} | {tuple(r) for r in b.values}
    assert len(rows) == 100
    with pytest.raises(ValueError):
        split(d, 1.0)
    with pytest.raises(ValueError):
        split(plant.subset(np.arange(4)), 0.5)


def test_subspace_filter(plant):
    sub, hold = subspace_filter(plant, 380.0)
    assert len(sub) + len(hold) == len(plant)
    assert sub.column("Power").max() <= 380.0
    p = hold.column("Power")
    assert p.min() > 380.0 and p.max() <= 395.0
    with pytest.warns(EmptyPartitionWarning):
        s, h = subspace_filter(plant, 1000.0)
    assert h is None and len(s) == len(plant)


def test_synthetic_matches_table1(plant):
    s = descriptive_stats(plant)
    for v in TABLE1:
        assert abs(s[v.name]["mean"] - v.mean) <= 0.05 * abs(v.mean), v.name
        assert abs(s[v.name]["std"] - v.std) <= 0.05 * v.std, v.name
        assert v.min <= s[v.name]["min"] and s[v.name]["max"] <= v.max
    assert plant.provenance["clip_fraction"] < 0.02
    assert plant.provenance["synthetic_seed"] == 7


def test_synthetic_deterministic():
    a = synth_plant_generate(n=300, seed=11)
    b = synth_plant_generate(n=300, seed=11)
    np.testing.assert_array_equal(a.values, b.values)


def test_synthetic_strong_pair(plant):
    assert pearson(plant.column("CDP"), plant.column("GFFR")) > 0.9


def test_oracle_te_rises_with_power(plant):
    P = plant.column("Power")
    X = plant.inputs
    te = plant_oracle(X[[np.argmax(P), np.argmin(P)]])["TE"]
    assert te[0] > te[1]


def test_oracle_power_monotone_in_drivers(plant):
    names = plant.input_names
    x = plant.inputs.mean(axis=0)
    base = plant_oracle(x)["Power"][0]
    for v in ("CDP", "GFFR", "CDT"):
        y = x.copy()
        y[names.index(v)] += 1.0
        assert plant_oracle(y)["Power"][0] > base, v


def test_oracle_te_concave_in_load(plant):
    names = plant.input_names
    x = plant.inputs.mean(axis=0)
    i, k = names.index("CDP"), names.index("CDT")
    step = np.zeros(9)
    step[i], step[k] = 36.82, 34.26
    te = [plant_oracle(x + t * step)["TE"][0] for t in (-1.0, 0.0, 1.0)]
    assert te[0] + te[2] < 2 * te[1]
    assert te[0] < te[1] < te[2]


def test_repair_correlation():
    R = repair_correlation(DEFAULT_INPUT_CORR.values)
    assert np.linalg.eigvalsh(R).min() > 0
    bad = np.array([[1, 0.99, -0.99], [0.99, 1, 0.99], [-0.99, 0.99, 1]])
    with pytest.raises(IndefiniteCorrelationError):
        repair_correlation(bad)
    with pytest.raises(IndefiniteCorrelationError):
        repair_correlation(np.array([[1, 2], [2, 1]]))
