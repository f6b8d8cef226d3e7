"""
Dynamics Service

Фильтр с параметрами, управляемыми скором: mu_t = y_{t-1}, alpha_t следует
рекурсии со скором двойного Пуассона, eta_t из рекурсии с объясняющими
переменными, доли трейдеров phi_t: softmax по (eta_t, ln h5, ln h10).
Плюс прямой симулятор, который чередует шаг фильтра и выборку из смеси.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from ..compat import jit
from ..errors import DomainError, FilterDivergenceError, SimulationError
from ..models import (
    DEFAULT_TICK_MULTIPLES,
    DPParams,
    ExogenousPolicy,
    FilterPath,
    FilterState,
    InitPolicy,
    NormConstMethod,
    StaticParams,
    TickSeries,
)
from . import cluster_mixture as cm
from . import double_poisson as dp

logger = logging.getLogger(__name__)

ALPHA_BOUND = 50.0
BURN_IN = 2
SESSION_SECONDS = 6.5 * 3600
SIM_START = pd.Timestamp("2020-01-02 09:30:00")


def alpha_update_python(
    c: float, b: float, a: float, d: float,
    alpha_prev: float, y_prev: float, y_prev2: float, log_z: float,
) -> float:
    # скор по alpha при mu = y_{t-2}, наблюдение y_{t-1}
    s = math.exp(alpha_prev) * (y_prev * math.log(y_prev2 / y_prev) - y_prev2 + y_prev) + 0.5
    return c + b * alpha_prev + a * s + d * log_z


def eta_update_python(
    f: float, g1: float, g2: float, g3: float, g4: float,
    eta_prev: float, mu: float, alpha: float, log_z: float, log_v: float,
) -> float:
    log_mu = math.log(mu)
    return f * eta_prev + g1 * log_mu + g2 * (log_mu - alpha) + g3 * log_z + g4 * log_v


alpha_update = jit(alpha_update_python, nopython=True, inline="always")
eta_update = jit(eta_update_python, nopython=True, inline="always")


def filter_core_python(
    params: np.ndarray,
    y: np.ndarray,
    log_z: np.ndarray,
    log_v: np.ndarray,
    seg_start: np.ndarray,
    init_kind: int,
    alpha0: float,
    eta0: float,
    log_z_bar: float,
    log_v_bar: float,
    mu: np.ndarray,
    alpha: np.ndarray,
    eta: np.ndarray,
    clamped: np.ndarray,
) -> int:
    """
    Заполняет mu, alpha, eta на месте. Возвращает индекс первого
    неконечного значения или -1.

    В каждом сегменте: состояние 1 стартовое, состояние 2 повторяет alpha
    первого, полная рекурсия идёт с третьего тика.
    """
    c, b, a, d, f, g1, g2, g3, g4 = params[0], params[1], params[2], params[3], params[4], \
        params[5], params[6], params[7], params[8]
    n = y.shape[0]
    pos = 0
    for t in range(n):
        if seg_start[t]:
            pos = 0
        if pos == 0:
            mu[t] = y[t]
            if init_kind == 0:
                alpha[t] = c / (1.0 - b)
                if alpha[t] > ALPHA_BOUND or alpha[t] < -ALPHA_BOUND:
                    alpha[t] = ALPHA_BOUND if alpha[t] > 0 else -ALPHA_BOUND
                    clamped[t] = True
                log_mu = math.log(y[t])
                eta[t] = (g1 * log_mu + g2 * (log_mu - alpha[t]) + g3 * log_z_bar + g4 * log_v_bar) / (1.0 - f)
            else:
                alpha[t] = alpha0
                eta[t] = eta0
        elif pos == 1:
            mu[t] = y[t - 1]
            alpha[t] = alpha[t - 1]
            eta[t] = eta_update(f, g1, g2, g3, g4, eta[t - 1], mu[t], alpha[t], log_z[t], log_v[t])
        else:
            mu[t] = y[t - 1]
            value = alpha_update(c, b, a, d, alpha[t - 1], y[t - 1], y[t - 2], log_z[t])
            if math.isnan(value):
                alpha[t] = value
                return t
            if value > ALPHA_BOUND:
                value = ALPHA_BOUND
                clamped[t] = True
            elif value < -ALPHA_BOUND:
                value = -ALPHA_BOUND
                clamped[t] = True
            alpha[t] = value
            eta[t] = eta_update(f, g1, g2, g3, g4, eta[t - 1], mu[t], alpha[t], log_z[t], log_v[t])
        if not (math.isfinite(alpha[t]) and math.isfinite(eta[t])):
            return t
        pos += 1
    return -1


filter_core = jit(filter_core_python, nopython=True)


def log_weights(theta: StaticParams) -> np.ndarray:
    """(0, ln h5, ln h10); h = 0 даёт -inf."""
    with np.errstate(divide="ignore"):
        return np.array([0.0, np.log(theta.h5), np.log(theta.h10)])


def portions(eta, theta: StaticParams) -> np.ndarray:
    """Доли (phi1, phi5, phi10): softmax по (eta, ln h5, ln h10) с вычитанием максимума."""
    eta = np.asarray(eta, dtype=float)
    logits = np.empty(eta.shape + (3,))
    logits[..., 0] = eta
    logits[..., 1:] = log_weights(theta)[1:]
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def log_portions(eta, theta: StaticParams) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    logits = np.empty(eta.shape + (3,))
    logits[..., 0] = eta
    logits[..., 1:] = log_weights(theta)[1:]
    top = logits.max(axis=-1, keepdims=True)
    return logits - (top + np.log(np.exp(logits - top).sum(axis=-1, keepdims=True)))


def standardized(ts: TickSeries) -> Tuple[np.ndarray, np.ndarray]:
    """Длительности и объёмы с единичным средним."""
    if ts.z_std is not None and ts.v_std is not None:
        return ts.z_std, ts.v_std
    return ts.z / ts.z.mean(), ts.v / ts.v.mean()


def filter_step(
    theta: StaticParams,
    state: FilterState,
    y_prev: int,
    y_prev2: int,
    z_t: float,
    v_t: float,
) -> FilterState:
    """
    Один шаг рекурсии. z_t, v_t: уже стандартизованные значения.

    alpha_t клампится к [-50, 50] до обновления eta, как в filter_series;
    неконечные значения дают FilterDivergenceError.
    """
    if min(y_prev, y_prev2) < 1 or z_t <= 0 or v_t <= 0:
        raise DomainError("filter inputs must be positive")
    log_z, log_v = math.log(z_t), math.log(v_t)
    try:
        alpha = alpha_update_python(theta.c, theta.b, theta.a, theta.d, state.alpha, y_prev, y_prev2, log_z)
        clamped = not math.isnan(alpha) and abs(alpha) > ALPHA_BOUND
        if clamped:
            alpha = math.copysign(ALPHA_BOUND, alpha)
        mu = float(y_prev)
        eta = eta_update_python(theta.f, theta.g1, theta.g2, theta.g3, theta.g4, state.eta, mu, alpha, log_z, log_v)
    except OverflowError:
        raise FilterDivergenceError(-1) from None
    if not (math.isfinite(alpha) and math.isfinite(eta)):
        raise FilterDivergenceError(-1)
    phi = portions(eta, theta)
    return FilterState(
        mu=mu, alpha=alpha, eta=eta, phi=(float(phi[0]), float(phi[1]), float(phi[2])), clamped=clamped,
    )


def initial_state(theta: StaticParams, y1: int, init: Optional[InitPolicy] = None) -> FilterState:
    """Состояние на первом тике сегмента (z, v с единичным средним)."""
    init = init or InitPolicy()
    if init.kind == "fixed":
        alpha, eta = init.alpha0, init.eta0
    else:
        alpha = min(max(theta.c / (1.0 - theta.b), -ALPHA_BOUND), ALPHA_BOUND)
        log_mu = math.log(y1)
        eta = (theta.g1 * log_mu + theta.g2 * (log_mu - alpha)) / (1.0 - theta.f)
    phi = portions(eta, theta)
    return FilterState(mu=float(y1), alpha=alpha, eta=eta, phi=(float(phi[0]), float(phi[1]), float(phi[2])))


def run_recursion(
    theta: StaticParams,
    ts: TickSeries,
    init: Optional[InitPolicy] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """mu, alpha, eta и флаги клампа без правдоподобия."""
    init = init or InitPolicy()
    z_std, v_std = standardized(ts)
    n = len(ts)
    mu = np.empty(n)
    alpha = np.empty(n)
    eta = np.empty(n)
    clamped = np.zeros(n, dtype=np.bool_)
    bad = filter_core(
        theta.as_array(),
        ts.y.astype(np.float64),
        np.log(z_std),
        np.log(v_std),
        ts.segment_start,
        0 if init.kind == "stationary" else 1,
        float(init.alpha0),
        float(init.eta0),
        float(np.log(z_std.mean())),
        float(np.log(v_std.mean())),
        mu,
        alpha,
        eta,
        clamped,
    )
    if bad >= 0:
        raise FilterDivergenceError(int(bad))
    return mu, alpha, eta, clamped


def contributing_mask(ts: TickSeries) -> np.ndarray:
    """Тики, дающие слагаемые правдоподобия: третий и далее в каждом сегменте."""
    start_idx = np.flatnonzero(ts.segment_start)
    pos = np.arange(len(ts)) - np.repeat(start_idx, np.diff(np.append(start_idx, len(ts))))
    return pos >= BURN_IN


def filter_series(
    theta: StaticParams,
    ts: TickSeries,
    init: Optional[InitPolicy] = None,
    norm_const: NormConstMethod = dp.EFRON,
) -> FilterPath:
    """Прогон фильтра по всему ряду с вкладами в правдоподобие."""
    if len(ts) < BURN_IN + 1:
        raise DomainError(f"filter needs at least {BURN_IN + 1} observations, got {len(ts)}")
    mu, alpha, eta, clamped = run_recursion(theta, ts, init)
    phi = portions(eta, theta)
    contributes = contributing_mask(ts)

    loglik = np.full(len(ts), np.nan)
    idx = np.flatnonzero(contributes)
    if idx.size:
        loglik[idx] = cm.mixture_log_lik_array(
            ts.y[idx].astype(float), mu[idx], alpha[idx],
            log_portions(eta[idx], theta), DEFAULT_TICK_MULTIPLES.multiples, norm_const,
        )
    bad = idx[~np.isfinite(loglik[idx])]
    if bad.size:
        raise FilterDivergenceError(int(bad[0]), f"log-likelihood is not finite at t={int(bad[0])}")

    n_clamped = int(clamped.sum())
    first = int(np.argmax(clamped)) if n_clamped else None
    if n_clamped:
        logger.warning(f"[Dynamics] alpha clamped to +-{ALPHA_BOUND:g} at {n_clamped} ticks, first t={first}")
    return FilterPath(
        mu=mu, alpha=alpha, eta=eta, phi=phi,
        loglik_contrib=loglik, contributes=contributes,
        clamped=n_clamped, first_clamped_t=first,
    )


def unit_mean_lognormal(rng: np.random.Generator, scale: float, n: int) -> np.ndarray:
    return np.exp(scale * rng.standard_normal(n) - 0.5 * scale * scale)


def exogenous_draws(exo: ExogenousPolicy, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Сырые длительности (секунды) и объёмы для симулятора."""
    if exo.kind == "fixed":
        if len(exo.z) < n:
            raise DomainError(f"fixed exogenous series has {len(exo.z)} values, need {n}")
        return np.asarray(exo.z[:n], dtype=float), np.asarray(exo.v[:n], dtype=float)
    return unit_mean_lognormal(rng, exo.z_log_scale, n), unit_mean_lognormal(rng, exo.v_log_scale, n)


def session_timestamps(z: np.ndarray, start: pd.Timestamp = SIM_START) -> np.ndarray:
    """
    Метки времени из длительностей: торговая сессия 09:30-16:00,
    после закрытия время переносится на следующий рабочий день.
    """
    steps = np.maximum(np.rint(z * 1e9).astype(np.int64), 1)
    steps[0] = 0
    elapsed = np.cumsum(steps)
    session_ns = int(SESSION_SECONDS * 1e9)
    day = elapsed // session_ns
    offset = elapsed % session_ns
    days = pd.bdate_range(start.normalize(), periods=int(day[-1]) + 1)
    open_ns = (start - start.normalize()).value
    base = days.values.astype("datetime64[ns]").astype(np.int64)
    return (base[day] + open_ns + offset).astype("datetime64[ns]")


def draw_price(state: FilterState, rng: np.random.Generator) -> int:
    """Одна цена из смеси при текущем состоянии."""
    multiples = DEFAULT_TICK_MULTIPLES.multiples
    j = int(np.searchsorted(np.cumsum(state.phi), rng.random(), side="right"))
    k = multiples[min(j, len(multiples) - 1)]
    params = cm.derive_trader_params(DPParams(mu=state.mu, alpha=state.alpha), k)
    return int(k * dp.draw(params, rng, 1)[0])


def simulate(
    theta: StaticParams,
    exo: ExogenousPolicy,
    y0: int,
    rng_seed: int,
    n: int,
) -> TickSeries:
    """
    Симуляция n тиков. y0: цена первого тика; дальше каждое y_t
    выбирается из смеси при состоянии фильтра, вычисленном по прошлому.
    Весь ряд составляет один сегмент.
    """
    if n < BURN_IN + 1:
        raise DomainError(f"simulation needs n >= {BURN_IN + 1}")
    if y0 < 1:
        raise DomainError("initial price must be at least one tick")
    rng = np.random.default_rng(rng_seed)
    z, v = exogenous_draws(exo, rng, n)
    z_std, v_std = z / z.mean(), v / v.mean()

    y = np.empty(n, dtype=np.int64)
    y[0] = y0
    state = initial_state(theta, y0)
    for t in range(1, n):
        if t == 1:
            eta = eta_update_python(
                theta.f, theta.g1, theta.g2, theta.g3, theta.g4,
                state.eta, float(y[0]), state.alpha, math.log(z_std[1]), math.log(v_std[1]),
            )
            phi = portions(eta, theta)
            state = FilterState(mu=float(y[0]), alpha=state.alpha, eta=eta, phi=tuple(float(p) for p in phi))
        else:
            try:
                state = filter_step(theta, state, int(y[t - 1]), int(y[t - 2]), z_std[t], v_std[t])
            except FilterDivergenceError:
                raise FilterDivergenceError(t) from None
        try:
            y[t] = draw_price(state, rng)
        except DomainError as e:
            raise SimulationError(t, f"price draw failed at t={t}: {e}") from e
        if y[t] < 1:
            raise SimulationError(t)

    return TickSeries(
        timestamps=session_timestamps(z),
        y=y, z=z, v=v,
        segment=np.zeros(n, dtype=np.int64),
        z_std=z_std, v_std=v_std,
    )


def path_to_frame(path: FilterPath, ts: Optional[TickSeries] = None) -> pd.DataFrame:
    """Траектория фильтра в виде таблицы: одна строка на тик."""
    n = len(path.mu)
    frame = pd.DataFrame({
        "t": np.arange(1, n + 1),
        "mu": path.mu,
        "alpha": path.alpha,
        "eta": path.eta,
        "phi1": path.phi[:, 0],
        "phi5": path.phi[:, 1],
        "phi10": path.phi[:, 2],
        "loglik": path.loglik_contrib,
        "variance": path.variance,
    })
    if ts is not None:
        frame.insert(1, "timestamp", pd.to_datetime(ts.timestamps))
        frame.insert(2, "y", ts.y)
    return frame
