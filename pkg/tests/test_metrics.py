import io
import math
from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from visitmotifs.metrics import (
    BASELINE_WINDOW,
    DailySeries,
    compute_baseline,
    date_range,
    max_impact,
    pct_change,
    read_changes_csv,
    recovery_duration,
    summarize,
    weekday_index,
    write_changes_csv,
    WeekdayBaseline,
)

CALENDAR = date_range(date(2021, 8, 1), date(2021, 9, 30))


def _change_series(changes: dict):
    base = DailySeries("m", {d: 10.0 for d in date_range(*BASELINE_WINDOW)})
    for d, c in changes.items():
        base.values[d] = 10.0 * (1 + c)
    return pct_change(base, compute_baseline(base))


def test_aug_first_is_sunday():
    assert weekday_index(date(2021, 8, 1)) == 1
    assert weekday_index(date(2021, 8, 7)) == 7


def test_constant_baseline():
    table = compute_baseline(DailySeries("c", {d: 10.0 for d in CALENDAR}))
    assert set(table.values.values()) == {10.0}
    assert all(table.complete.values())


def test_sunday_mean():
    values = {d: 5.0 for d in date_range(*BASELINE_WINDOW)}
    for d, v in zip([date(2021, 8, 1), date(2021, 8, 8), date(2021, 8, 15)], [1, 2, 3]):
        values[d] = v
    assert compute_baseline(DailySeries("s", values))[1] == 2.0


def test_window_length_check():
    s = DailySeries("s", {d: 1.0 for d in CALENDAR})
    with pytest.raises(ValueError):
        compute_baseline(s, (date(2021, 8, 1), date(2021, 8, 20)))
    table = compute_baseline(s, (date(2021, 8, 1), date(2021, 8, 28)), allow_multiple_weeks=True)
    assert set(table.samples.values()) == {4}


def test_missing_day_marks_incomplete():
    values = {d: 1.0 for d in date_range(*BASELINE_WINDOW)}
    del values[date(2021, 8, 2)]
    table = compute_baseline(DailySeries("s", values))
    assert table.samples[2] == 2 and not table.complete[2]
    assert table.complete[1]


@pytest.mark.parametrize("value,expected", [(15, 0.5), (10, 0.0), (6, -0.4)])
def test_pct_change_arithmetic(value, expected):
    ch = _change_series({date(2021, 8, 30): value / 10 - 1})
    assert ch.change(date(2021, 8, 30)) == pytest.approx(expected, abs=1e-12)


def test_zero_baseline_is_undefined():
    s = DailySeries("z", {d: 0.0 for d in CALENDAR})
    ch = pct_change(s, compute_baseline(s))
    assert all(not e.defined for e in ch.entries.values())
    assert summarize(ch).max_impact is None
    with pytest.raises(ValueError):
        max_impact(ch)


def test_max_impact_largest_magnitude():
    ch = _change_series({date(2021, 8, 27): -0.1, date(2021, 8, 29): -0.3206, date(2021, 8, 31): 0.2})
    assert max_impact(ch) == max_impact(ch).__class__(pytest.approx(-0.3206), date(2021, 8, 29))


def test_max_impact_single_entry():
    ch = _change_series({date(2021, 8, 26): 0.4})
    impact = max_impact(ch, (date(2021, 8, 26), date(2021, 8, 26)))
    assert impact.change == pytest.approx(0.4) and impact.date == date(2021, 8, 26)


def test_healthcare_shaped_trough():
    shape = {date(2021, 8, 26) + timedelta(days=i): c for i, c in enumerate([-0.05, -0.12, -0.25, -0.3205, -0.28, -0.2, -0.1, -0.04])}
    impact = max_impact(_change_series(shape))
    assert impact.change == pytest.approx(-0.3205) and impact.date == date(2021, 8, 29)


def test_recovery_sep3():
    ch = _change_series({date(2021, 8, 28): -0.3, date(2021, 9, 2): 0.03, date(2021, 9, 3): -0.05})
    r = recovery_duration(ch)
    assert (r.recovery_days, r.cutoff_date) == (8, date(2021, 9, 3))


def test_recovery_needs_consecutive_days():
    changes = {d: -0.2 for d in date_range(date(2021, 8, 26), date(2021, 9, 30))}
    changes.update({date(2021, 9, 2): 0.0, date(2021, 9, 4): 0.0, date(2021, 9, 5): 0.01})
    r = recovery_duration(_change_series(changes))
    assert (r.recovery_days, r.cutoff_date) == (10, date(2021, 9, 5))


def test_never_recovers():
    changes = {d: 0.06 for d in date_range(date(2021, 8, 22), date(2021, 9, 30))}
    r = recovery_duration(_change_series(changes))
    assert not r.recovered and r.cutoff_date is None


def test_missing_day_breaks_run():
    changes = {d: -0.2 for d in date_range(date(2021, 8, 22), date(2021, 9, 30))}
    changes.update({date(2021, 9, 2): 0.0, date(2021, 9, 4): 0.0, date(2021, 9, 5): 0.0})
    ch = _change_series(changes)
    del ch.entries[date(2021, 9, 3)]
    assert recovery_duration(ch).cutoff_date == date(2021, 9, 5)


def test_changes_csv_round_trip():
    ch = _change_series({date(2021, 8, 30): -0.25})
    buf = io.StringIO()
    write_changes_csv([ch], buf)
    buf.seek(0)
    (back,) = read_changes_csv(buf)
    assert back.metric == ch.metric
    assert back.change(date(2021, 8, 30)) == ch.change(date(2021, 8, 30))


def test_weekday_baseline_estimator():
    idx = pd.date_range("2021-08-01", "2021-09-30")
    X = pd.DataFrame({"a": np.arange(61, dtype=float) % 7 + 1, "b": 2.0}, index=idx)
    est = WeekdayBaseline().fit(X)
    out = est.transform(X)
    assert list(out.columns) == ["a", "b"]
    assert np.allclose(out.to_numpy(), 0.0)
    assert est.get_params()["allow_multiple_weeks"] is False


@given(
    st.lists(st.floats(0.1, 1e6), min_size=61, max_size=61),
    st.floats(0.01, 1e3),
)
def test_scale_equivariance(values, k):
    s = DailySeries("p", dict(zip(CALENDAR, values)))
    a = pct_change(s, compute_baseline(s))
    b = pct_change(s.scaled(k), compute_baseline(s.scaled(k)))
    for d, e in a.entries.items():
        assert math.isclose(e.change, b.entries[d].change, rel_tol=1e-9, abs_tol=1e-12)


@given(st.lists(st.floats(-0.9, 0.9), min_size=8, max_size=8))
def test_recovery_days_consistent_with_cutoff(event):
    changes = {date(2021, 8, 26) + timedelta(days=i): c for i, c in enumerate(event)}
    r = recovery_duration(_change_series(changes))
    if r.recovered:
        assert r.cutoff_date >= date(2021, 9, 3)
        assert r.recovery_days == (r.cutoff_date - date(2021, 8, 26)).days
