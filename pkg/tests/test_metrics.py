import math

import pytest
from hypothesis import given, strategies as st

from carnet import metrics as mt


def test_header_is_fixed():
    assert mt.format_rows([]).splitlines()[0] == ",".join(mt.HEADER)
    assert [f for f in mt.MetricsRow.__dataclass_fields__] == list(mt.HEADER)


def test_empty_fields_are_blank_not_zero():
    row = mt.MetricsRow("r", "p", 3, loss_total=0.0)
    assert row.cells() == ["r", "p", "3", "0.0"] + [""] * 8


def test_log_and_file_mirror(tmp_path):
    log = mt.MetricsLog("run", tmp_path / "m.csv")
    log.log("a", 0, loss_total=1.5)
    log.log("b", 1, accuracy=0.5)
    back = mt.read_metrics(tmp_path / "m.csv")
    assert back == log.rows and [r.phase for r in log.phase("a")] == ["a"]
    with pytest.raises(KeyError):
        log.log("a", 2, bogus=1.0)


def test_wallclock_only_with_clock():
    ticks = iter([10.0, 12.5])
    log = mt.MetricsLog("r", clock=lambda: next(ticks))
    assert log.log("p", 0).wallclock_s == 2.5
    assert mt.MetricsLog("r").log("p", 0).wallclock_s is None


def test_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        mt.read_metrics(tmp_path / "x.csv")


values = st.one_of(st.none(), st.floats(allow_infinity=False, allow_nan=False))


@given(st.text(alphabet="abc/-_, \"", min_size=1), st.integers(0, 10 ** 6), values, values, values)
def test_round_trip(tmp_path_factory, phase, step, a, b, c):
    rows = [mt.MetricsRow("id", phase, step, loss_total=a, accuracy=b, reward_std=c)]
    p = mt.write_metrics(tmp_path_factory.mktemp("m") / "m.csv", rows)
    assert mt.read_metrics(p) == rows


def test_nan_written_as_nan(tmp_path):
    p = mt.write_metrics(tmp_path / "m.csv", [mt.MetricsRow("r", "p", 0, loss_total=float("nan"))])
    assert math.isnan(mt.read_metrics(p)[0].loss_total)
