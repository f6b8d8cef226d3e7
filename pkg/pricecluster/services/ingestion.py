"""
Ingestion Service

Разбор сырых сделок в формате TAQ, очистка по стандартным правилам
(префильтр суффиксов, часы торгов, нулевые цены, чужие биржи, исправленные
записи, нестандартные условия продажи, выбросы, дубликаты меток времени) и
перевод в целые тики с длительностями.
"""

from __future__ import annotations

import io
import logging
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import BinaryIO, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import ValidationError

from ..errors import FormatError, PrecisionError
from ..models import (
    CleanConfig,
    CleaningReport,
    CleanTrade,
    FormatSpec,
    MalformedRow,
    RawTrade,
    TickSeries,
)

logger = logging.getLogger(__name__)

Source = Union[bytes, str, Path, BinaryIO]

_BAD_ROW = "\x00bad-field-count"
TICK_COLUMNS = ["timestamp", "price", "ticks", "duration", "size", "segment"]


# === Разбор ===


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def parse_taq_time(day: str, hhmmss: str) -> pd.Timestamp:
    """Дата плюс время вида HHMMSSxxxxxxxxx (дробная часть до наносекунд)."""
    digits = hhmmss.strip()
    if len(digits) < 6 or not digits.isdigit():
        raise ValueError(f"bad TAQ time {hhmmss!r}")
    frac = digits[6:]
    if len(frac) > 9:
        raise ValueError(f"TAQ time {hhmmss!r} is finer than nanoseconds")
    hours, minutes, seconds = int(digits[:2]), int(digits[2:4]), int(digits[4:6])
    if hours > 23 or minutes > 59 or seconds > 59:
        raise ValueError(f"bad TAQ time {hhmmss!r}")
    base = pd.Timestamp(day.strip())
    if base != base.normalize():
        raise ValueError(f"bad TAQ date {day!r}")
    return base + pd.Timedelta(
        hours=hours, minutes=minutes, seconds=seconds, nanoseconds=int(frac.ljust(9, "0") or 0)
    )


def _parse_timestamp(row: dict, fmt: FormatSpec) -> pd.Timestamp:
    if fmt.timestamp_format == "taq":
        return parse_taq_time(row[fmt.date_col], row[fmt.timestamp_col])
    value = row[fmt.timestamp_col].strip()
    if not value:
        raise ValueError("empty timestamp")
    ts = pd.Timestamp(value)
    if ts is pd.NaT or ts.tzinfo is not None:
        raise ValueError(f"timestamp {value!r} must be a naive local time")
    return ts


def _parse_row(row: dict, line: int, fmt: FormatSpec) -> RawTrade:
    if row.get(fmt.timestamp_col) == _BAD_ROW:
        raise ValueError("wrong number of fields")
    try:
        price = Decimal(row[fmt.price_col].strip())
    except InvalidOperation:
        raise ValueError(f"bad price {row[fmt.price_col]!r}") from None
    if not price.is_finite():
        raise ValueError(f"bad price {row[fmt.price_col]!r}")
    size = row[fmt.size_col].strip()
    if not size.isdigit():
        raise ValueError(f"bad size {size!r}")
    correction = row[fmt.correction_col].strip() or "0"
    return RawTrade(
        timestamp=_parse_timestamp(row, fmt),
        price=price,
        volume=int(size),
        exchange=row[fmt.exchange_col].strip(),
        sale_condition=row[fmt.condition_col].strip(),
        correction=int(correction),
        suffix=row[fmt.suffix_col].strip(),
        line=line,
    )


def _missing(value) -> bool:
    return value is None or (isinstance(value, float) and np.isnan(value))


def parse_trades(source: Source, fmt: Optional[FormatSpec] = None) -> Tuple[List[RawTrade], List[MalformedRow]]:
    """
    Разбор текста с разделителями и заголовком. Испорченные строки
    собираются с номерами строк; их доля выше fmt.max_malformed_fraction
    приводит к FormatError.
    """
    fmt = fmt or FormatSpec()
    data = _read_bytes(source)
    if not data.strip():
        return [], []

    header = pd.read_csv(io.BytesIO(data), sep=fmt.delimiter, nrows=0, dtype=str).columns

    def on_bad_line(fields: List[str]) -> List[str]:
        return [_BAD_ROW] + [""] * (len(header) - 1)

    missing = [c for c in fmt.required_columns if c not in header]
    if missing:
        raise FormatError(f"missing required columns: {', '.join(missing)}")

    frame = pd.read_csv(
        io.BytesIO(data),
        sep=fmt.delimiter,
        dtype=str,
        keep_default_na=False,
        skip_blank_lines=False,
        engine="python",
        on_bad_lines=on_bad_line,
    )

    trades: List[RawTrade] = []
    malformed: List[MalformedRow] = []
    for offset, row in enumerate(frame.to_dict("records")):
        line = offset + 2
        if all(_missing(v) or v == "" for v in row.values()):
            continue
        if any(_missing(v) for v in row.values()):
            malformed.append(MalformedRow(line=line, reason="wrong number of fields"))
            continue
        try:
            trades.append(_parse_row(row, line, fmt))
        except (ValueError, ValidationError) as e:
            malformed.append(MalformedRow(line=line, reason=str(e).splitlines()[0]))

    total = len(trades) + len(malformed)
    if malformed:
        logger.warning(f"[Ingestion] {len(malformed)} malformed rows of {total}")
        if len(malformed) > fmt.max_malformed_fraction * total:
            raise FormatError(
                f"{len(malformed)} of {total} rows are malformed "
                f"(limit {fmt.max_malformed_fraction:.0%}); first at line {malformed[0].line}"
            )
    return trades, malformed


# === Очистка ===



def _frame(trades: Sequence[RawTrade]) -> pd.DataFrame:
    frame = pd.DataFrame({
        "timestamp": pd.DatetimeIndex([t.timestamp for t in trades], dtype="datetime64[ns]"),
        "price": [float(t.price) for t in trades],
        "exchange": [t.exchange for t in trades],
        "condition": [t.sale_condition for t in trades],
        "correction": [t.correction for t in trades],
        "suffix": [t.suffix for t in trades],
        "pos": np.arange(len(trades)),
    })
    return frame


def condition_allowed(condition: str, allowed: Iterable[str]) -> bool:
    """Пустое условие допустимо; иначе каждый символ кода должен быть разрешён."""
    codes = condition.replace(" ", "")
    return all(ch in allowed for ch in codes)


def rolling_outliers(prices: np.ndarray, cfg: CleanConfig) -> np.ndarray:
    """
    Маска выбросов внутри одного дня: отклонение от центрированной
    скользящей медианы соседей (до median_window/2 с каждой стороны, без
    самого наблюдения) больше mad_k средних абсолютных отклонений.
    """
    n = len(prices)
    half = cfg.median_window // 2
    if n == 0:
        return np.zeros(0, dtype=bool)
    padded = np.concatenate([np.full(half, np.nan), prices.astype(float), np.full(half, np.nan)])
    windows = sliding_window_view(padded, 2 * half + 1).copy()
    windows[:, half] = np.nan
    count = np.sum(~np.isnan(windows), axis=1)
    out = np.zeros(n, dtype=bool)
    active = count >= cfg.min_window
    if not active.any():
        return out
    w = windows[active]
    med = np.nanmedian(w, axis=1)
    mad = np.nanmean(np.abs(w - med[:, None]), axis=1)
    dev = np.abs(prices[active] - med)
    # mad = 0: правило для наблюдения не действует
    out[active] = (mad > 0) & (dev > cfg.mad_k * mad)
    return out


def outlier_mask(prices: np.ndarray, days: np.ndarray, cfg: CleanConfig) -> np.ndarray:
    """Правило выбросов по дням, повторяемое, пока оно что-то отбрасывает."""
    prices = np.asarray(prices, dtype=float)
    out = np.zeros(len(prices), dtype=bool)
    while True:
        alive = np.flatnonzero(~out)
        fresh = np.zeros(len(alive), dtype=bool)
        for day in np.unique(days[alive]):
            sel = days[alive] == day
            fresh[sel] = rolling_outliers(prices[alive][sel], cfg)
        if not fresh.any():
            return out
        out[alive[fresh]] = True


def modal_price(prices: Sequence[Decimal]) -> Decimal:
    """Мода; при равенстве частот берётся наименьшая цена."""
    counts = pd.Series(list(prices)).value_counts()
    top = counts.max()
    return min(p for p, c in counts.items() if c == top)


def clean(
    trades: Sequence[RawTrade],
    primary_exchange: str,
    cfg: Optional[CleanConfig] = None,
) -> Tuple[List[CleanTrade], CleaningReport]:
    """Правила применяются по порядку; отчёт считает отброшенное каждым правилом."""
    cfg = cfg or CleanConfig()
    report = CleaningReport(input_count=len(trades))
    if not trades:
        return [], report

    trades = sorted(trades, key=lambda t: t.timestamp)
    frame = _frame(trades)

    def drop(rule: str, mask: np.ndarray) -> None:
        nonlocal frame
        mask = np.asarray(mask, dtype=bool)
        report.dropped[rule] += int(mask.sum())
        frame = frame[~mask]

    drop("suffix", frame["suffix"].to_numpy() != "")
    day_ns = frame["timestamp"].to_numpy().astype(np.int64) - frame["timestamp"].dt.normalize().to_numpy().astype(np.int64)
    lo = _time_ns(cfg.session_start)
    hi = _time_ns(cfg.session_end)
    drop("hours", (day_ns < lo) | (day_ns > hi))
    drop("zero_price", frame["price"].to_numpy() == 0)
    drop("off_exchange", frame["exchange"].to_numpy() != primary_exchange)
    drop("corrected", ~frame["correction"].isin(sorted(cfg.allowed_corrections)).to_numpy())
    allowed = np.array([condition_allowed(c, cfg.allowed_conditions) for c in frame["condition"]], dtype=bool)
    drop("abnormal_condition", ~allowed)

    days = frame["timestamp"].dt.normalize().to_numpy()
    drop("outlier", outlier_mask(frame["price"].to_numpy(), days, cfg))

    kept: List[CleanTrade] = []
    for _, group in frame.groupby("timestamp", sort=True):
        members = [trades[p] for p in group["pos"]]
        mode = modal_price([t.price for t in members])
        first = next(t for t in members if t.price == mode)
        kept.append(CleanTrade(
            **first.model_dump(exclude={"volume", "group_size"}),
            volume=sum(t.volume for t in members),
            group_size=sum(getattr(t, "group_size", 1) for t in members),
        ))
        report.dropped["duplicate_collapse"] += len(members) - 1

    # схлопнутые записи проверяются правилом выбросов ещё раз
    if kept:
        days = pd.DatetimeIndex([t.timestamp for t in kept]).normalize().to_numpy()
        late = outlier_mask(np.array([float(t.price) for t in kept]), days, cfg)
        report.dropped["outlier"] += int(late.sum())
        kept = [t for t, bad in zip(kept, late) if not bad]

    report.retained = len(kept)
    for rule, count in report.dropped.items():
        if count:
            logger.info(f"[Ingestion] dropped {count} rows by rule {rule}")
    return kept, report


def _time_ns(value) -> int:
    return ((value.hour * 60 + value.minute) * 60 + value.second) * 1_000_000_000 + value.microsecond * 1000


# === Тики ===


def to_ticks(price: Decimal, tick_scale: int = 100) -> int:
    """Цена в целых тиках через десятичную арифметику."""
    scaled = price * tick_scale
    if scaled != scaled.to_integral_value():
        raise PrecisionError(f"price {price} is not a whole number of ticks at scale {tick_scale}")
    return int(scaled)


def format_price(ticks: int, tick_scale: int = 100) -> str:
    decimals = len(str(tick_scale)) - 1 if str(tick_scale).strip("0") == "1" else 6
    return f"{Decimal(int(ticks)) / Decimal(tick_scale):.{decimals}f}"


def fill_segment_starts(z: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Длительность первого тика сегмента не определена: подставляем среднее."""
    z = z.astype(float).copy()
    defined = ~start
    z[start] = z[defined].mean() if defined.any() else 1.0
    return z


def to_tick_series(trades: Sequence[CleanTrade], tick_scale: int = 100) -> TickSeries:
    """
    Очищенные сделки в TickSeries. Каждый торговый день образует отдельный
    сегмент; длительность равна разрыву до предыдущей сделки того же дня.
    """
    if tick_scale < 1:
        raise ValueError("tick scale must be positive")
    y = np.array([to_ticks(t.price, tick_scale) for t in trades], dtype=np.int64)
    stamps = pd.DatetimeIndex([t.timestamp for t in trades], dtype="datetime64[ns]").to_numpy()
    ns = stamps.astype(np.int64)
    days = stamps.astype("datetime64[D]")
    _, segment = np.unique(days, return_inverse=True)
    start = np.ones(len(y), dtype=bool)
    start[1:] = segment[1:] != segment[:-1]
    z = np.zeros(len(y))
    if len(y) > 1:
        z[1:] = np.diff(ns) / 1e9
    return TickSeries(
        timestamps=stamps,
        y=y,
        z=fill_segment_starts(z, start),
        v=np.array([t.volume for t in trades], dtype=float),
        segment=segment.astype(np.int64),
        tick_scale=tick_scale,
    )


# === Табличный вывод ===


def _iso(stamps: np.ndarray) -> List[str]:
    return [pd.Timestamp(s).isoformat() for s in stamps]


def tick_frame(ts: TickSeries, first_duration_defined: bool = False) -> pd.DataFrame:
    """TickSeries как таблица: timestamp, price, ticks, duration, size, segment."""
    duration = ts.z.astype(object)
    if not first_duration_defined:
        duration[ts.segment_start] = ""
    return pd.DataFrame({
        "timestamp": _iso(ts.timestamps),
        "price": [format_price(t, ts.tick_scale) for t in ts.y],
        "ticks": ts.y,
        "duration": duration,
        "size": ts.v,
        "segment": ts.segment,
    }, columns=TICK_COLUMNS)


def clean_frame(trades: Sequence[CleanTrade], ts: TickSeries) -> pd.DataFrame:
    """Очищенные сделки в исходной схеме плюс тики и длительности."""
    frame = tick_frame(ts)
    frame["size"] = [t.volume for t in trades]
    frame["exchange"] = [t.exchange for t in trades]
    frame["condition"] = [t.sale_condition for t in trades]
    frame["correction"] = [t.correction for t in trades]
    frame["suffix"] = [t.suffix for t in trades]
    frame["group_size"] = [t.group_size for t in trades]
    return frame


def read_tick_series(source: Union[str, Path], tick_scale: int = 100) -> TickSeries:
    """Обратное чтение таблицы тиков (вывод clean или simulate)."""
    frame = pd.read_csv(source, dtype={"timestamp": str, "price": str})
    missing = [c for c in ("timestamp", "ticks", "size") if c not in frame.columns]
    if missing:
        raise FormatError(f"tick file lacks columns: {', '.join(missing)}")
    stamps = pd.to_datetime(frame["timestamp"], format="ISO8601").to_numpy(dtype="datetime64[ns]")
    if "segment" in frame.columns:
        segment = frame["segment"].to_numpy(dtype=np.int64)
    else:
        _, segment = np.unique(stamps.astype("datetime64[D]"), return_inverse=True)
    start = np.ones(len(frame), dtype=bool)
    start[1:] = segment[1:] != segment[:-1]
    if "duration" in frame.columns and frame["duration"].notna().all():
        z = frame["duration"].to_numpy(dtype=float)
    else:
        ns = stamps.astype(np.int64)
        z = np.zeros(len(frame))
        z[1:] = np.diff(ns) / 1e9
        z = fill_segment_starts(z, start)
    return TickSeries(
        timestamps=stamps,
        y=frame["ticks"].to_numpy(dtype=np.int64),
        z=z,
        v=frame["size"].to_numpy(dtype=float),
        segment=segment,
        tick_scale=tick_scale,
    )
