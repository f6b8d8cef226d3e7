"""
Daily Analysis Service

Дневная панель по акциям: мера кластеризации цен, реализованное ядро
(Парзен) для дневной волатильности, средние цены, длительности и объёмы;
регрессия с фиксированными эффектами акций и дней и ошибками,
кластеризованными по обоим измерениям.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from linearmodels.panel import PanelOLS
from linearmodels.panel.data import PanelData
from scipy.stats import norm

from ..errors import DomainError, FormatError, RealizedKernelError, SingularDesignError
from ..models import (
    REGRESSORS,
    DailyRow,
    FilterPath,
    ModelSpec,
    PanelFit,
    RKConfig,
    TickSeries,
)

logger = logging.getLogger(__name__)

PANEL_COLUMNS = ["stock", "day", "pc", "mean_price", "rk_vol", "mean_duration", "mean_volume", "n_trades"]
DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000
RANK_TOL = 1e-10
NEGATIVE_RK_TOL = 1e-12


# === Мера кластеризации ===


def price_clustering_measure(prices) -> float:
    """Доля цен, кратных 5 тикам, сверх равномерного ожидания 0.2."""
    prices = np.asarray(prices, dtype=np.int64)
    if prices.size == 0:
        raise DomainError("price clustering measure needs at least one price")
    return float(np.mean(prices % 5 == 0)) - 0.2


# === Реализованное ядро ===


def parzen(x: np.ndarray) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=float))
    return np.where(
        x <= 0.5,
        1.0 - 6.0 * x ** 2 + 6.0 * x ** 3,
        np.where(x <= 1.0, 2.0 * (1.0 - x) ** 3, 0.0),
    )


def jittered(log_prices: np.ndarray, m: int) -> np.ndarray:
    """Концы дня заменяются средним m крайних наблюдений."""
    if m <= 1 or len(log_prices) < 2 * m + 1:
        return log_prices
    return np.concatenate([[log_prices[:m].mean()], log_prices[m:-m], [log_prices[-m:].mean()]])


def autocovariance(returns: np.ndarray, h: int) -> float:
    if h == 0:
        return float(np.dot(returns, returns))
    return float(np.dot(returns[h:], returns[:-h]))


def sparse_iv(seconds: np.ndarray, log_prices: np.ndarray, cfg: RKConfig) -> float:
    """Средняя разреженная реализованная дисперсия по сдвинутым сеткам."""
    values = []
    for j in range(cfg.sparse_offsets):
        start = seconds[0] + j * cfg.sparse_seconds / cfg.sparse_offsets
        grid = np.arange(start, seconds[-1] + 1e-9, cfg.sparse_seconds)
        if grid.size < 2:
            continue
        idx = np.searchsorted(seconds, grid, side="right") - 1
        r = np.diff(log_prices[idx])
        values.append(float(np.dot(r, r)))
    return float(np.mean(values)) if values else 0.0


def bandwidth(seconds: np.ndarray, log_prices: np.ndarray, n_returns: int, cfg: RKConfig) -> int:
    """H = c* xi^(4/5) n^(3/5), xi^2 = omega^2 / IV; omega^2 = RV / (2n) по всем тикам."""
    r = np.diff(log_prices)
    rv_dense = float(np.dot(r, r))
    if rv_dense == 0.0 or n_returns == 0:
        return 0
    omega2 = rv_dense / (2.0 * len(r))
    iv = sparse_iv(seconds, log_prices, cfg)
    if iv <= 0.0:
        iv = rv_dense
    xi2 = omega2 / iv
    return int(math.ceil(cfg.c_star * xi2 ** 0.4 * n_returns ** 0.6))


def realized_kernel(timestamps, log_prices, cfg: Optional[RKConfig] = None) -> float:
    """
    Реализованное ядро Парзена за день. По умолчанию flat-top:
    gamma_0 + sum_h k((h-1)/H) (gamma_h + gamma_-h); иначе k(h/(H+1)).
    """
    cfg = cfg or RKConfig()
    log_prices = np.asarray(log_prices, dtype=float)
    if log_prices.size < 2:
        raise DomainError("realized kernel needs at least two observations")
    stamps = np.asarray(timestamps)
    if np.issubdtype(stamps.dtype, np.datetime64):
        ns = stamps.astype("datetime64[ns]").astype(np.int64)
        seconds = (ns - ns[0]) / 1e9
    else:
        seconds = stamps.astype(float) - float(stamps[0])

    x = jittered(log_prices, cfg.jitter)
    returns = np.diff(x)
    n = returns.size
    H = cfg.bandwidth if cfg.bandwidth is not None else bandwidth(seconds, log_prices, n, cfg)
    if H > 0 and n < H + 2:
        shrunk = max(n - 2, 0)
        logger.warning(f"[DailyAnalysis] {n} returns cannot support bandwidth {H}; using {shrunk}")
        H = shrunk

    value = autocovariance(returns, 0)
    for h in range(1, H + 1):
        w = parzen((h - 1) / H) if cfg.flat_top else parzen(h / (H + 1))
        value += 2.0 * float(w) * autocovariance(returns, h)
    if value < -NEGATIVE_RK_TOL:
        raise RealizedKernelError(f"realized kernel is negative ({value:.3e}) with H={H}")
    return max(value, 0.0)


# === Панель ===


def _day_rows(stock: str, ts: TickSeries, cfg: RKConfig) -> List[DailyRow]:
    rows: List[DailyRow] = []
    days = ts.days
    undefined = ts.segment_start | np.r_[True, days[1:] != days[:-1]]
    for day in np.unique(days):
        mask = days == day
        n = int(mask.sum())
        if n < 2:
            logger.warning(f"[DailyAnalysis] {stock} {day}: {n} trade(s), day skipped")
            continue
        y = ts.y[mask]
        # первая длительность дня не определена
        z = ts.z[mask & ~undefined]
        if z.size == 0:
            z = ts.z[mask]
        try:
            rk = realized_kernel(ts.timestamps[mask], np.log(y / ts.tick_scale), cfg)
        except RealizedKernelError as e:
            logger.warning(f"[DailyAnalysis] {stock} {day}: {e}; day skipped")
            continue
        rows.append(DailyRow(
            stock=stock,
            day=pd.Timestamp(day).date(),
            pc=price_clustering_measure(y),
            mean_price=float(y.mean()) / ts.tick_scale,
            rk_vol=rk,
            mean_duration=float(z.mean()),
            mean_volume=float(ts.v[mask].mean()),
            n_trades=n,
        ))
    return rows


def _day_rows_packed(payload):
    return _day_rows(*payload)


def build_daily_panel(
    per_stock: Mapping[str, TickSeries],
    cfg: Optional[RKConfig] = None,
    jobs: int = 1,
) -> List[DailyRow]:
    """Одна строка на акцию-день; дни с менее чем двумя сделками пропускаются."""
    cfg = cfg or RKConfig()
    payloads = [(stock, per_stock[stock], cfg) for stock in sorted(per_stock)]
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_day_rows_packed, payloads))
    else:
        chunks = [_day_rows(*p) for p in payloads]
    rows = [row for chunk in chunks for row in chunk]
    logger.info(f"[DailyAnalysis] panel: {len(rows)} stock-days from {len(payloads)} stocks")
    return rows


def panel_frame(rows: Sequence[DailyRow]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows], columns=PANEL_COLUMNS)


def read_panel(source) -> List[DailyRow]:
    frame = pd.read_csv(source, dtype={"stock": str, "day": str})
    missing = [c for c in PANEL_COLUMNS[:-1] if c not in frame.columns]
    if missing:
        raise FormatError(f"panel file lacks columns: {', '.join(missing)}")
    return [DailyRow(**rec) for rec in frame.to_dict("records")]


# === Регрессия с фиксированными эффектами ===


def design(panel: Sequence[DailyRow], spec: ModelSpec) -> Tuple[pd.DataFrame, int]:
    """Логарифмы ковариат; строки с нулевым RK исключаются, если есть волатильность."""
    frame = panel_frame(panel)
    dropped = 0
    if "volatility" in spec.regressors:
        zero = frame["rk_vol"] <= 0
        dropped = int(zero.sum())
        if dropped:
            logger.warning(f"[DailyAnalysis] dropped {dropped} stock-days with zero realized kernel")
        frame = frame[~zero]
    vol = np.log(frame["rk_vol"].where(frame["rk_vol"] > 0))
    columns = {
        "price": np.log(frame["mean_price"]),
        "volatility": vol if spec.vol_transform == "variance" else 0.5 * vol,
        "duration": np.log(frame["mean_duration"]),
        "volume": np.log(frame["mean_volume"]),
    }
    out = pd.DataFrame({"stock": frame["stock"].astype(str), "day": frame["day"].astype(str), "pc": frame["pc"]})
    for name in spec.regressors:
        out[name] = columns[name].to_numpy()
    return out.sort_values(["stock", "day"], kind="stable").reset_index(drop=True), dropped


def panel_index(frame: pd.DataFrame) -> pd.MultiIndex:
    """Индекс (акция, день) в виде, который ждёт linearmodels."""
    return pd.MultiIndex.from_arrays(
        [frame["stock"].to_numpy(), pd.to_datetime(frame["day"]).to_numpy()], names=["stock", "day"]
    )


def effects_kind(spec: ModelSpec) -> Optional[str]:
    if spec.stock_effects and spec.day_effects:
        return "both"
    if spec.stock_effects:
        return "entity"
    if spec.day_effects:
        return "time"
    return None


def within(data: pd.DataFrame, spec: ModelSpec) -> np.ndarray:
    """Ковариаты после снятия эффектов акций и дней."""
    kind = effects_kind(spec)
    if kind is None:
        return data.to_numpy(dtype=float)
    return PanelData(data).demean(kind, low_memory=False).values2d


def collinear_columns(X: np.ndarray, names: Sequence[str]) -> List[str]:
    """Столбцы, не увеличивающие ранг при последовательном добавлении."""
    bad: List[str] = []
    kept: List[int] = []
    scale = float(np.linalg.norm(X)) or 1.0
    for j, name in enumerate(names):
        s = np.linalg.svd(X[:, kept + [j]], compute_uv=False)
        if s[-1] <= RANK_TOL * scale:
            bad.append(name)
        else:
            kept.append(j)
    return bad


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def recover_effects(
    r: np.ndarray, stock_idx: np.ndarray, day_idx: np.ndarray, spec: ModelSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Эффекты акций и дней из остатка y - X beta. Нормировка: эффекты дней
    в среднем равны нулю, общий уровень уходит в эффекты акций.
    """
    n_s, n_d = int(stock_idx.max()) + 1, int(day_idx.max()) + 1
    gamma, delta = np.zeros(n_s), np.zeros(n_d)
    cnt_s, cnt_d = np.bincount(stock_idx, minlength=n_s), np.bincount(day_idx, minlength=n_d)
    for _ in range(DEMEAN_MAX_ITER):
        old = np.concatenate([gamma, delta])
        if spec.stock_effects:
            gamma = np.bincount(stock_idx, weights=r - delta[day_idx], minlength=n_s) / cnt_s
        if spec.day_effects:
            delta = np.bincount(day_idx, weights=r - gamma[stock_idx], minlength=n_d) / cnt_d
        if np.max(np.abs(np.concatenate([gamma, delta]) - old)) < DEMEAN_TOL:
            break
    if spec.stock_effects and spec.day_effects:
        shift = delta.mean()
        delta -= shift
        gamma += shift
    return gamma, delta


def fe_regression(panel: Sequence[DailyRow], spec: ModelSpec) -> PanelFit:
    """
    pc на логарифмы ковариат с эффектами акций и дней (PanelOLS); ошибки
    кластеризованы по акциям и дням без поправок на малую выборку.
    """
    frame, dropped = design(panel, spec)
    stocks, stock_idx = np.unique(frame["stock"].to_numpy(), return_inverse=True)
    days, day_idx = np.unique(frame["day"].to_numpy(), return_inverse=True)
    if (spec.stock_effects and len(stocks) < 2) or (spec.day_effects and len(days) < 2):
        raise DomainError(f"panel needs at least 2 stocks and 2 days, got {len(stocks)} x {len(days)}")

    names = list(spec.regressors)
    data = frame.set_index(panel_index(frame))
    bad = collinear_columns(within(data[names], spec), names)
    if bad:
        raise SingularDesignError(bad)

    model = PanelOLS(data["pc"], data[names], entity_effects=spec.stock_effects, time_effects=spec.day_effects)
    res = model.fit(cov_type="clustered", cluster_entity=True, cluster_time=True, debiased=False)
    beta = res.params[names].to_numpy()
    se = res.std_errors[names].to_numpy()
    if np.any(np.isnan(se)):
        logger.warning(f"[DailyAnalysis] model {spec.label}: two-way clustered covariance has negative variances")
    t = beta / se
    p = 2.0 * norm.sf(np.abs(t))
    resid = res.resids.reindex(data.index).to_numpy()

    y_raw = frame["pc"].to_numpy(dtype=float)
    X_raw = frame[names].to_numpy(dtype=float)
    gamma, delta = recover_effects(y_raw - X_raw @ beta, stock_idx, day_idx, spec)
    return PanelFit(
        label=spec.label,
        regressors=names,
        beta=dict(zip(names, beta.tolist())),
        se=dict(zip(names, se.tolist())),
        t=dict(zip(names, t.tolist())),
        p=dict(zip(names, p.tolist())),
        stars={n: stars(v) for n, v in zip(names, p)},
        residuals=resid.tolist(),
        fe_stock=dict(zip(map(str, stocks), gamma.tolist())) if spec.stock_effects else {},
        fe_day=dict(zip(map(str, days), delta.tolist())) if spec.day_effects else {},
        n=len(frame),
        n_stocks=len(stocks),
        n_days=len(days),
        dropped_zero_rk=dropped,
    )


# === Таблицы и данные для графиков ===


def coefficient_table(fits: Sequence[PanelFit], digits: int = 4) -> pd.DataFrame:
    """Таблица коэффициентов: модели в столбцах, под коэффициентом SE в скобках."""
    index: List[str] = []
    for name in REGRESSORS:
        if any(name in f.beta for f in fits):
            index += [name, f"{name} (se)"]
    index += ["observations", "stocks", "days"]
    table = pd.DataFrame("", index=index, columns=[f.label for f in fits])
    for f in fits:
        for name, b in f.beta.items():
            table.loc[name, f.label] = f"{b:.{digits}f}{f.stars[name]}"
            table.loc[f"{name} (se)", f.label] = f"({f.se[name]:.{digits}f})"
        table.loc["observations", f.label] = str(f.n)
        table.loc["stocks", f.label] = str(f.n_stocks)
        table.loc["days", f.label] = str(f.n_days)
    table.index.name = "term"
    return table


def univariate_fits(panel: Sequence[DailyRow]) -> Tuple[Dict[str, PanelFit], pd.DataFrame]:
    """
    Одномерные регрессии pc на каждую ковариату с эффектами акций.
    Возвращает оценки и точки с подогнанными линиями по акциям.
    """
    fits: Dict[str, PanelFit] = {}
    frames = []
    for name in REGRESSORS:
        spec = ModelSpec(label=name, regressors=(name,), day_effects=False)
        fit = fe_regression(panel, spec)
        fits[name] = fit
        data, _ = design(panel, spec)
        frames.append(pd.DataFrame({
            "covariate": name,
            "stock": data["stock"],
            "day": data["day"],
            "x": data[name],
            "pc": data["pc"],
            "fitted": data["stock"].map(fit.fe_stock) + fit.beta[name] * data[name],
        }))
    return fits, pd.concat(frames, ignore_index=True)


def digit_breakdown(ts: TickSeries, path: Optional[FilterPath] = None) -> pd.DataFrame:
    """
    Средние по последней цифре цены в тиках: цена, мгновенное стандартное
    отклонение (при наличии траектории фильтра), предшествующие длительность
    и объём.
    """
    digit = ts.y % 10
    defined = ~ts.segment_start
    frame = pd.DataFrame({
        "digit": digit,
        "price": ts.y / ts.tick_scale,
        "duration": np.where(defined, ts.z, np.nan),
        "volume": ts.v,
    })
    if path is not None:
        sd = np.sqrt(path.variance) / ts.tick_scale
        frame["sd"] = np.where(path.contributes, sd, np.nan)
    out = frame.groupby("digit").agg(
        count=("price", "size"),
        mean_price=("price", "mean"),
        mean_duration=("duration", "mean"),
        mean_volume=("volume", "mean"),
        **({"mean_sd": ("sd", "mean")} if path is not None else {}),
    )
    out = out.reindex(range(10))
    out["count"] = out["count"].fillna(0).astype(int)
    out.insert(1, "share", out["count"] / max(len(ts), 1))
    return out


def descriptive_stats(per_stock: Mapping[str, TickSeries]) -> pd.DataFrame:
    """Число сделок, среднее и SD цены и длительности, мера кластеризации."""
    rows = []
    for stock in sorted(per_stock):
        ts = per_stock[stock]
        if len(ts) == 0:
            continue
        price = ts.y / ts.tick_scale
        z = ts.z[~ts.segment_start]
        rows.append({
            "stock": stock,
            "n_trades": len(ts),
            "mean_price": float(price.mean()),
            "sd_price": float(price.std(ddof=1)) if len(ts) > 1 else float("nan"),
            "mean_duration": float(z.mean()) if z.size else float("nan"),
            "sd_duration": float(z.std(ddof=1)) if z.size > 1 else float("nan"),
            "pc": price_clustering_measure(ts.y),
        })
    return pd.DataFrame(rows, columns=["stock", "n_trades", "mean_price", "sd_price", "mean_duration", "sd_duration", "pc"])
