from datetime import time
from decimal import Decimal

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from pricecluster.errors import FormatError, PrecisionError
from pricecluster.models import CLEANING_RULES, CleanConfig, FormatSpec, RawTrade
from pricecluster.services import ingestion

HEADER = "timestamp,price,size,exchange,condition,correction,suffix\n"


def trade(ts, price, volume=100, exchange="N", condition="@", line=0):
    return RawTrade(
        timestamp=pd.Timestamp(ts), price=Decimal(price), volume=volume,
        exchange=exchange, sale_condition=condition, line=line,
    )


def test_parse_golden(golden_raw):
    trades, malformed = ingestion.parse_trades(golden_raw)
    assert len(trades) == 29
    assert malformed == []
    assert trades[0].line == 2
    assert trades[2].timestamp == pd.Timestamp("2020-01-02 09:30:00.25")
    assert trades[2].sale_condition == ""
    assert trades[3].suffix == "PR"
    assert trades[1].price == Decimal("10.01")


def test_crlf_and_quoting_parse_the_same(golden_raw):
    text = golden_raw.read_text()
    quoted = text.replace(",@,", ',"@",').replace("\n", "\r\n")
    a, _ = ingestion.parse_trades(golden_raw)
    b, _ = ingestion.parse_trades(quoted.encode())
    assert a == b


def test_malformed_rows_are_reported():
    data = HEADER + (
        "2020-01-02T09:30:00,10.01,100,N,@,0,\n"
        "2020-01-02T09:30:01,,100,N,@,0,\n"
        "2020-01-02T09:30:02,10.02,100,N,@,0,,extra\n"
        "2020-01-02T09:30:03,10.03,abc,N,@,0,\n"
        "2020-01-02T09:30:04,10.04,100,N,@,0,\n"
    )
    trades, malformed = ingestion.parse_trades(data.encode(), FormatSpec(max_malformed_fraction=0.9))
    assert [t.line for t in trades] == [2, 6]
    assert [m.line for m in malformed] == [3, 4, 5]


def test_too_many_malformed_rows():
    data = HEADER + "2020-01-02T09:30:00,x,100,N,@,0,\n2020-01-02T09:30:01,10.00,100,N,@,0,\n"
    with pytest.raises(FormatError):
        ingestion.parse_trades(data.encode())


def test_missing_column():
    with pytest.raises(FormatError):
        ingestion.parse_trades(b"timestamp,price\n2020-01-02T09:30:00,10.00\n")


def test_empty_input():
    assert ingestion.parse_trades(b"") == ([], [])
    assert ingestion.parse_trades(HEADER.encode()) == ([], [])


def test_taq_time():
    assert ingestion.parse_taq_time("20200102", "093000250000000") == pd.Timestamp("2020-01-02 09:30:00.25")
    assert ingestion.parse_taq_time("20200102", "160000") == pd.Timestamp("2020-01-02 16:00:00")
    with pytest.raises(ValueError):
        ingestion.parse_taq_time("20200102", "096100")


def test_taq_format():
    data = "date,time,price,size,exchange,condition,correction,suffix\n20200102,093000500,10.01,100,N,@,0,\n"
    fmt = FormatSpec(timestamp_format="taq", timestamp_col="time")
    trades, _ = ingestion.parse_trades(data.encode(), fmt)
    assert trades[0].timestamp == pd.Timestamp("2020-01-02 09:30:00.5")


def test_clean_golden(golden_raw):
    trades, _ = ingestion.parse_trades(golden_raw)
    kept, report = ingestion.clean(trades, "N")
    assert report.input_count == 29
    assert report.dropped == {
        "suffix": 1, "hours": 2, "zero_price": 1, "off_exchange": 1, "corrected": 1,
        "abnormal_condition": 1, "outlier": 1, "duplicate_collapse": 3,
    }
    assert report.retained == 18
    assert report.retained + report.dropped_total == report.input_count
    prices = [str(t.price) for t in kept]
    assert prices[:4] == ["10.01", "10.02", "10.01", "10.02"]
    assert prices[-3:] == ["10.04", "10.10", "10.15"]
    assert "11.00" not in prices
    assert kept[2].volume == 450
    assert kept[2].group_size == 3
    # 10.04 и 10.02 по одному разу: остаётся меньшая цена
    assert kept[3].timestamp == pd.Timestamp("2020-01-02 09:30:08")
    assert (kept[3].volume, kept[3].group_size, kept[3].line) == (300, 2, 14)
    assert kept[15].timestamp == pd.Timestamp("2020-01-02 16:00:00")


def test_clean_is_idempotent(golden_raw):
    trades, _ = ingestion.parse_trades(golden_raw)
    once, _ = ingestion.clean(trades, "N")
    twice, report = ingestion.clean(once, "N")
    assert twice == once
    assert report.dropped_total == 0


def test_clean_is_idempotent_with_nested_spikes():
    prices = ["10.00" if i % 2 == 0 else "10.01" for i in range(60)]
    for i in (20, 24, 28, 32):
        prices[i] = "20.00"
    prices[26] = "15.00"
    trades = [trade(pd.Timestamp("2020-01-02 10:00") + pd.Timedelta(seconds=i), p) for i, p in enumerate(prices)]
    once, report = ingestion.clean(trades, "N")
    assert report.dropped["outlier"] == 5
    assert {str(t.price) for t in once} == {"10.00", "10.01"}
    twice, again = ingestion.clean(once, "N")
    assert twice == once
    assert again.dropped_total == 0


def test_outliers_rechecked_after_collapse():
    # десять записей 10.50 на одной метке не выбросы, пока не схлопнуты в одну
    stamps = [pd.Timestamp("2020-01-02 10:00") + pd.Timedelta(seconds=i) for i in range(30)]
    trades = [trade(ts, "10.00" if i % 2 == 0 else "10.01") for i, ts in enumerate(stamps)]
    trades += [trade(stamps[15], "10.50") for _ in range(10)]
    once, report = ingestion.clean(trades, "N")
    assert report.dropped["duplicate_collapse"] == 10
    assert report.dropped["outlier"] == 1
    assert len(once) == 29
    assert "10.50" not in {str(t.price) for t in once}
    twice, again = ingestion.clean(once, "N")
    assert twice == once
    assert again.dropped_total == 0


def test_modal_price_ties_go_to_lowest():
    assert ingestion.modal_price([Decimal("10.05"), Decimal("10.01")]) == Decimal("10.01")
    assert ingestion.modal_price([Decimal("10.05"), Decimal("10.05"), Decimal("10.01")]) == Decimal("10.05")


def test_duplicate_tie_keeps_lowest_price():
    trades = [trade("2020-01-02 10:00", "10.05", line=1), trade("2020-01-02 10:00", "10.01", line=2)]
    kept, report = ingestion.clean(trades, "N")
    assert len(kept) == 1
    assert kept[0].price == Decimal("10.01")
    assert kept[0].volume == 200
    assert report.dropped["duplicate_collapse"] == 1


def test_condition_codes():
    allowed = {"@", "E", "F"}
    assert ingestion.condition_allowed("", allowed)
    assert ingestion.condition_allowed("@F", allowed)
    assert not ingestion.condition_allowed("@Z", allowed)


def brute_outliers(prices, cfg):
    half = cfg.median_window // 2
    out = np.zeros(len(prices), dtype=bool)
    for i in range(len(prices)):
        nb = np.concatenate([prices[max(0, i - half):i], prices[i + 1:i + 1 + half]])
        if nb.size < cfg.min_window:
            continue
        med = np.median(nb)
        mad = np.mean(np.abs(nb - med))
        out[i] = mad > 0 and abs(prices[i] - med) > cfg.mad_k * mad
    return out


def test_rolling_outliers_match_direct_computation():
    rng = np.random.default_rng(3)
    prices = 10.0 + np.round(rng.normal(0, 0.02, 200), 2)
    prices[[5, 60, 150]] += [0.8, -0.9, 1.5]
    cfg = CleanConfig()
    mask = ingestion.rolling_outliers(prices, cfg)
    assert np.array_equal(mask, brute_outliers(prices, cfg))
    assert mask[[5, 60, 150]].all()


def test_outlier_rule_in_clean():
    prices = ["10.00", "10.01", "10.02"] * 20
    prices[30] = "10.50"
    trades = [trade(pd.Timestamp("2020-01-02 10:00") + pd.Timedelta(seconds=i), p) for i, p in enumerate(prices)]
    kept, report = ingestion.clean(trades, "N")
    assert report.dropped["outlier"] == 1
    assert Decimal("10.50") not in [t.price for t in kept]


def test_flat_prices_keep_everything():
    trades = [trade(pd.Timestamp("2020-01-02 10:00") + pd.Timedelta(seconds=i), "10.00") for i in range(30)]
    _, report = ingestion.clean(trades, "N")
    assert report.dropped["outlier"] == 0


def test_session_hours_are_configurable():
    trades = [trade("2020-01-02 09:00", "10.00"), trade("2020-01-02 09:45", "10.00")]
    kept, _ = ingestion.clean(trades, "N", CleanConfig(session_start=time(9, 0)))
    assert len(kept) == 2


def test_report_lists_every_rule():
    _, report = ingestion.clean([], "N")
    assert tuple(report.dropped) == CLEANING_RULES


def test_to_ticks():
    assert ingestion.to_ticks(Decimal("100.13")) == 10013
    assert ingestion.to_ticks(Decimal("100.135"), 1000) == 100135
    with pytest.raises(PrecisionError):
        ingestion.to_ticks(Decimal("10.005"))
    assert ingestion.format_price(10013) == "100.13"
    assert ingestion.format_price(1010) == "10.10"


GOLDEN_TICKS = [1001, 1002, 1001, 1002] + [1002, 1003] * 2 + [1002] + [1002, 1003] * 3 + [1004, 1010, 1015]


def test_tick_series_from_golden(golden_raw):
    trades, _ = ingestion.parse_trades(golden_raw)
    kept, _ = ingestion.clean(trades, "N")
    ts = ingestion.to_tick_series(kept)
    assert list(ts.y) == GOLDEN_TICKS
    assert list(ts.segment) == [0] * 16 + [1, 1]
    assert_allclose(ts.z[[1, 2, 3, 4, 9, 15, 17]], [0.25, 5.75, 2.0, 1792.0, 2.0, 21589.0, 0.5])
    assert list(ts.v) == [100, 200, 450, 300] + [100] * 14


def test_tick_file_round_trip(golden_clean):
    ts = ingestion.read_tick_series(golden_clean)
    assert list(ts.y) == GOLDEN_TICKS
    assert list(ts.segment_start) == [True] + [False] * 15 + [True, False]
    assert_allclose(ts.z[1], 0.25)
    frame = ingestion.tick_frame(ts)
    assert list(frame.columns) == ingestion.TICK_COLUMNS
    assert frame.loc[0, "duration"] == ""
