"""
Estimation Service

Условное ММП для трёх вложенных вариантов модели: мультистарт,
безградиентная оптимизация (метод главных осей, симплекс как запасной),
сравнение по AIC и средние значения параметров по траектории.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from ..errors import DomainError, EstimationError, FilterDivergenceError
from ..models import (
    PARAM_NAMES,
    FitConfig,
    FitResult,
    ModelVariant,
    NormConstMethod,
    StartTrace,
    StaticParams,
    SummaryRow,
    TickSeries,
)
from .dynamics import contributing_mask, filter_series

logger = logging.getLogger(__name__)

MIN_OBS = 100
PENALTY = 1e10
SQUASHED = ("b", "f")
POSITIVE = ("h5", "h10")
VARIANT_ORDER = (ModelVariant.NO_CLUSTERING, ModelVariant.STATIC, ModelVariant.DYNAMIC)

NEUTRAL = {"b": 0.2, "f": 0.2, "a": 0.1, "h5": 0.01, "h10": 0.01}


def standardize_exogenous(ts: TickSeries) -> TickSeries:
    """Длительности и объёмы, делённые на выборочные средние; сырые значения остаются."""
    if len(ts) == 0:
        raise DomainError("cannot standardize an empty series")
    return ts.with_standardized(ts.z / ts.z.mean(), ts.v / ts.v.mean())


# === Преобразования параметров ===


def to_unconstrained(theta: StaticParams, variant: ModelVariant) -> np.ndarray:
    out = []
    for name in variant.free_params:
        value = getattr(theta, name)
        if name in SQUASHED:
            value = math.atanh(min(max(value, -0.999999), 0.999999))
        elif name in POSITIVE:
            value = math.log(max(value, 1e-12))
        out.append(value)
    return np.array(out, dtype=float)


def from_unconstrained(u: np.ndarray, variant: ModelVariant) -> StaticParams:
    values = dict.fromkeys(PARAM_NAMES, 0.0)
    for name, x in zip(variant.free_params, u):
        if name in SQUASHED:
            x = math.tanh(x)
            # tanh округляется до 1.0 при |x| > ~19
            x = min(max(x, -1.0 + 1e-15), 1.0 - 1e-15)
        elif name in POSITIVE:
            x = math.exp(min(x, 700.0))
        values[name] = float(x)
    return StaticParams(**values)


def restrict(theta: StaticParams, variant: ModelVariant) -> StaticParams:
    """Обнуляет параметры, не свободные в данном варианте."""
    values = {n: (getattr(theta, n) if n in variant.free_params else 0.0) for n in PARAM_NAMES}
    return StaticParams(**values)


# === Целевая функция ===


def average_loglik(theta: StaticParams, ts: TickSeries, norm_const: NormConstMethod) -> float:
    return filter_series(theta, ts, norm_const=norm_const).loglik_avg


def objective(u: np.ndarray, ts: TickSeries, variant: ModelVariant, norm_const: NormConstMethod) -> float:
    """Минус средний логарифм правдоподобия; неудачная проба получает штраф."""
    try:
        value = average_loglik(from_unconstrained(u, variant), ts, norm_const)
    except (FilterDivergenceError, DomainError, OverflowError, ValueError, FloatingPointError):
        return PENALTY
    if not math.isfinite(value):
        return PENALTY
    return -value


# === Стартовые точки ===


def moment_alpha(ts: TickSeries) -> float:
    """Грубая оценка alpha: ln(mu / var(y_t - y_{t-1})) внутри сегментов."""
    keep = ~ts.segment_start
    dy = np.diff(ts.y.astype(float))[keep[1:]]
    if dy.size < 2:
        return 0.0
    var = max(float(np.var(dy)), 1e-2)
    return float(np.clip(math.log(float(ts.y.mean()) / var), -10.0, 20.0))


def neutral_start(ts: TickSeries, variant: ModelVariant) -> StaticParams:
    values = {n: NEUTRAL.get(n, 0.0) for n in PARAM_NAMES}
    values["c"] = moment_alpha(ts) * (1.0 - values["b"])
    return restrict(StaticParams(**values), variant)


def start_points(
    ts: TickSeries,
    variant: ModelVariant,
    config: FitConfig,
    warm_start: Optional[StaticParams] = None,
) -> List[np.ndarray]:
    """Нейтральный старт (и тёплый, если задан) плюс равномерные возмущения."""
    rng = np.random.default_rng(config.seed)
    base = to_unconstrained(neutral_start(ts, variant), variant)
    starts = []
    if warm_start is not None:
        starts.append(to_unconstrained(restrict(warm_start, variant), variant))
    starts.append(base)
    while len(starts) < config.n_starts:
        starts.append(base + rng.uniform(-config.perturbation, config.perturbation, size=base.size))
    return starts


# === Оптимизация ===


def _options(method: str, config: FitConfig) -> Dict[str, float]:
    if method == "Powell":
        return {"maxfev": config.max_fev, "xtol": config.xtol, "ftol": config.ftol}
    return {"maxfev": config.max_fev, "xatol": config.xtol, "fatol": config.ftol}


def run_start(
    index: int,
    u0: np.ndarray,
    ts: TickSeries,
    variant: ModelVariant,
    config: FitConfig,
) -> Tuple[StartTrace, Optional[np.ndarray], float]:
    """Один старт: основной метод, если он не сошёлся, запасной из лучшей точки."""
    x0 = from_unconstrained(u0, variant).to_dict()
    args = (ts, variant, config.norm_const)
    best_x, best_f, nfev, method, converged, message = None, PENALTY, 0, config.method, False, ""

    methods = [config.method] + ([config.fallback] if config.fallback and config.fallback != config.method else [])
    x_start = u0
    for method_name in methods:
        res = minimize(objective, x_start, args=args, method=method_name, options=_options(method_name, config))
        nfev += int(res.nfev)
        if math.isfinite(res.fun) and res.fun < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
        method, converged, message = method_name, bool(res.success) and best_f < PENALTY, str(res.message)
        if converged:
            break
        logger.warning(f"[Estimation] start {index}: {method_name} did not converge ({res.message})")
        x_start = best_x if best_x is not None else u0

    trace = StartTrace(
        start=index,
        x0=x0,
        theta=from_unconstrained(best_x, variant).to_dict() if best_x is not None and best_f < PENALTY else None,
        loglik_avg=-best_f if best_f < PENALTY else None,
        nfev=nfev,
        method=method,
        converged=converged,
        message=message,
    )
    return trace, best_x, best_f


def _run_start_packed(payload):
    return run_start(*payload)


def fit_mle(
    ts: TickSeries,
    variant: ModelVariant,
    config: Optional[FitConfig] = None,
    warm_start: Optional[StaticParams] = None,
) -> FitResult:
    """
    Максимизирует сумму вкладов в правдоподобие по свободным параметрам
    варианта. z и v стандартизуются к единичному среднему перед оптимизацией.
    """
    config = config or FitConfig()
    n_contrib = int(contributing_mask(ts).sum())
    if n_contrib < MIN_OBS:
        raise DomainError(f"estimation needs at least {MIN_OBS} contributing observations, got {n_contrib}")
    ts = standardize_exogenous(ts)
    starts = start_points(ts, variant, config, warm_start)
    payloads = [(i, u0, ts, variant, config) for i, u0 in enumerate(starts)]

    logger.info(f"[Estimation] fitting {variant.value} on {len(ts)} ticks from {len(starts)} starts")
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(_run_start_packed, payloads))
    else:
        outcomes = [run_start(*p) for p in payloads]

    traces = [o[0] for o in outcomes]
    best = min(range(len(outcomes)), key=lambda i: (outcomes[i][2], i))
    _, best_x, best_f = outcomes[best]
    if best_x is None or best_f >= PENALTY:
        raise EstimationError(
            f"all {len(starts)} starts failed for variant {variant.value}",
            diagnostics=[t.model_dump() for t in traces],
        )

    theta_hat = from_unconstrained(best_x, variant)
    path = filter_series(theta_hat, ts, norm_const=config.norm_const)
    k = variant.n_params
    total = path.loglik_total
    result = FitResult(
        variant=variant,
        theta_hat=theta_hat,
        loglik_total=total,
        loglik_avg=path.loglik_avg,
        aic=2.0 * k - 2.0 * total,
        n_obs=path.n_contrib,
        n_params=k,
        converged=traces[best].converged,
        starts=traces,
        path=path,
    )
    logger.info(f"[Estimation] {variant.value}: loglik_avg={result.loglik_avg:.6f} aic={result.aic:.2f}")
    return result


def fit_variants(
    ts: TickSeries,
    config: Optional[FitConfig] = None,
    variants: Sequence[ModelVariant] = VARIANT_ORDER,
) -> Dict[ModelVariant, FitResult]:
    """Вложенные варианты по порядку; каждый стартует и из оценки предыдущего."""
    results: Dict[ModelVariant, FitResult] = {}
    previous: Optional[StaticParams] = None
    for variant in sorted(variants, key=VARIANT_ORDER.index):
        results[variant] = fit_mle(ts, variant, config, warm_start=previous)
        previous = results[variant].theta_hat
    return results


def comparison_rows(results: Dict[ModelVariant, FitResult], stock: str = "") -> List[Dict[str, object]]:
    """Строки сравнения моделей: средний логарифм правдоподобия и AIC."""
    rows = []
    for variant in VARIANT_ORDER:
        fr = results.get(variant)
        if fr is None:
            continue
        rows.append({
            "stock": stock,
            "variant": variant.value,
            "n_params": fr.n_params,
            "n_obs": fr.n_obs,
            "loglik_avg": fr.loglik_avg,
            "aic": fr.aic,
        })
    return rows


def summarize_fit(fr: FitResult, stock: str = "", tick_scale: int = 100) -> SummaryRow:
    """Средние по траектории: mu в долларах, alpha, доли типов в процентах."""
    if fr.path is None:
        raise DomainError("fit result carries no filter path")
    if not fr.converged:
        logger.warning(f"[Estimation] summarizing a non-converged {fr.variant.value} fit")
    mask = fr.path.contributes
    phi = fr.path.phi[mask].mean(axis=0) * 100.0
    return SummaryRow(
        stock=stock,
        variant=fr.variant,
        mu_bar=float(fr.path.mu[mask].mean()) / tick_scale,
        alpha_bar=float(fr.path.alpha[mask].mean()),
        phi1=float(phi[0]),
        phi5=float(phi[1]),
        phi10=float(phi[2]),
    )


__all__ = [
    "standardize_exogenous",
    "fit_mle",
    "fit_variants",
    "comparison_rows",
    "summarize_fit",
]
