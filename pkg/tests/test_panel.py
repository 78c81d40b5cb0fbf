import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpgmrf.errors import (DuplicateConflict, IndexOutOfRange, IoError, MalformedRow,
                           PrevalenceOutOfRange, UnknownCountry)
from kpgmrf.panel import (POPULATIONS, empty_panel, flat_index, load_country_table, load_panel,
                          sparsity_profile, unflat_index, write_country_table, write_panel)

from conftest import make_panel


def _obs(tmp_path, rows, header="country,population,year,prevalence"):
    p = tmp_path / "obs.csv"
    p.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def table():
    return load_country_table()


def test_bundled_table_has_seven_regions(table):
    assert len(table) == 199
    assert set(table.region.tolist()) == set(range(7))


def test_log_transform_at_flat_position(tmp_path, table):
    panel = load_panel(_obs(tmp_path, ["PAN,MSM,2015,0.20"]), table)
    i = table.position("PAN") + 1
    f = flat_index(i, "MSM", 2015, len(table)) - 1
    assert panel.y[f] == pytest.approx(-1.60944, abs=1e-5)
    assert panel.y[f] == math.log(0.2)
    assert panel.n_observed == 1


@pytest.mark.parametrize("prev", ["0.0", "1.0", "-0.1", "1.5", "nan"])
def test_out_of_range_prevalence_rejected(tmp_path, table, prev):
    with pytest.raises(PrevalenceOutOfRange):
        load_panel(_obs(tmp_path, [f"PAN,MSM,2015,{prev}"]), table)


def test_identical_duplicates_accepted_once(tmp_path, table):
    panel = load_panel(_obs(tmp_path, ["PAN,MSM,2015,0.20", "PAN,MSM,2015,0.20"]), table)
    assert panel.n_observed == 1


def test_conflicting_duplicates(tmp_path, table):
    with pytest.raises(DuplicateConflict):
        load_panel(_obs(tmp_path, ["PAN,MSM,2015,0.20", "PAN,MSM,2015,0.21"]), table)


def test_duplicates_within_tolerance_average_on_log_scale(tmp_path, table):
    panel = load_panel(_obs(tmp_path, ["PAN,FSW,2012,0.20", "PAN,FSW,2012,0.22"]), table, dup_tol=0.05)
    f = flat_index(table.position("PAN") + 1, "FSW", 2012, len(table)) - 1
    assert panel.y[f] == pytest.approx(0.5 * (math.log(0.2) + math.log(0.22)), rel=1e-14)


def test_percent_flag(tmp_path, table):
    panel = load_panel(_obs(tmp_path, ["PAN,PWID,2020,20"]), table, percent=True)
    assert np.nanmax(panel.y) == pytest.approx(math.log(0.2), rel=1e-14)


def test_malformed_rows_report_line(tmp_path, table):
    with pytest.raises(MalformedRow) as exc:
        load_panel(_obs(tmp_path, ["PAN,MSM,2015,0.2", "PAN,MSM,2016"]), table)
    assert exc.value.line == 3
    with pytest.raises(MalformedRow):
        load_panel(_obs(tmp_path, ["PAN,TG,2015,0.2"]), table)
    with pytest.raises(MalformedRow):
        load_panel(_obs(tmp_path, ["PAN,MSM,2010,0.2"]), table)
    with pytest.raises(MalformedRow):
        load_panel(_obs(tmp_path, ["PAN,MSM,2015,0.2"], header="a,b,c,d"), table)


def test_unknown_country(tmp_path, table):
    with pytest.raises(UnknownCountry):
        load_panel(_obs(tmp_path, ["XXX,MSM,2015,0.2"]), table)


def test_missing_file(tmp_path, table):
    with pytest.raises(IoError):
        load_panel(tmp_path / "nope.csv", table)


def test_flat_index_examples():
    assert flat_index(1, "MSM", 2011, 5) == 1
    assert flat_index(1, "FSW", 2011, 5) == 12
    assert flat_index(2, "MSM", 2011, 5) == 34
    with pytest.raises(IndexOutOfRange):
        flat_index(6, "MSM", 2011, 5)
    with pytest.raises(IndexOutOfRange):
        flat_index(1, "MSM", 2022, 5)
    with pytest.raises(IndexOutOfRange):
        unflat_index(0, 5)


def test_flat_index_bijection_exhaustive():
    n = 3
    seen = []
    for i in range(1, n + 1):
        for k in POPULATIONS:
            for t in range(2011, 2022):
                f = flat_index(i, k, t, n)
                i2, k2, t2 = unflat_index(f, n)
                assert (i2, POPULATIONS[k2], t2) == (i, k, t)
                seen.append(f)
    assert sorted(seen) == list(range(1, 33 * n + 1))


@given(st.integers(1, 40), st.data())
def test_unflat_inverts_flat(n, data):
    f = data.draw(st.integers(1, 33 * n))
    assert flat_index(*unflat_index(f, n), n) == f


def test_sparsity_profile_extremes(table):
    empty = empty_panel(table)
    prof = sparsity_profile(empty)
    assert all(v == (199, 0, 0) for v in prof.values())
    full = make_panel(np.full((4, 3, 11), -2.0), [0, 1, 2, 3])
    assert all(v == (0, 0, 4) for v in sparsity_profile(full).values())


def test_sparsity_profile_mixed():
    vals = np.full((3, 3, 11), np.nan)
    vals[0, 0, :2] = -1
    vals[1, 0, :6] = -1
    vals[2, 2, 0] = -1
    prof = sparsity_profile(make_panel(vals, [0, 0, 0]))
    assert prof == {"MSM": (1, 1, 1), "FSW": (3, 0, 0), "PWID": (2, 1, 0)}


def test_round_trip_and_determinism(tmp_path, toy_panel):
    obs, cty = tmp_path / "o.csv", tmp_path / "c.csv"
    write_panel(toy_panel, obs)
    write_country_table(toy_panel, cty)
    a = load_panel(obs, cty)
    b = load_panel(obs, cty)
    assert np.array_equal(a.mask, toy_panel.mask)
    np.testing.assert_allclose(a.y[a.mask], toy_panel.y[toy_panel.mask], rtol=0, atol=1e-12)
    assert np.array_equal(a.y, b.y, equal_nan=True) and np.array_equal(a.mask, b.mask)
    assert a.n_observed == toy_panel.n_observed


def test_observed_values_strictly_negative(tmp_path, table):
    panel = load_panel(_obs(tmp_path, ["PAN,MSM,2015,0.999999", "PAN,FSW,2015,1e-9"]), table)
    assert np.all(panel.y[panel.mask] < 0)


def test_with_mask_requires_subset(toy_panel):
    with pytest.raises(ValueError):
        toy_panel.with_mask(~toy_panel.mask)
    sub = toy_panel.with_mask(np.zeros_like(toy_panel.mask))
    assert sub.n_observed == 0
