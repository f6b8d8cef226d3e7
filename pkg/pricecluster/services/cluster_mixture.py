"""
Cluster Mixture Service

Смесь распределений для кластеризации цен: трейдер типа k торгует только
по ценам, кратным k тикам. Цена такого трейдера: k * X, где X имеет двойное
распределение Пуассона с параметрами (mu / k, alpha + ln k); так сохраняются
E[Y] ~ mu и var[Y] ~ mu e^-alpha при любом k.
"""

from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from ..errors import DomainError
from ..models import DPParams, MixtureParams, NormConstKind, NormConstMethod
from . import double_poisson as dp

logger = logging.getLogger(__name__)


def derive_trader_params(p: DPParams, k: int) -> DPParams:
    """Параметры компоненты типа k: (mu / k, alpha + ln k)."""
    if k < 1:
        raise DomainError(f"tick multiple must be >= 1, got {k}")
    return DPParams(mu=p.mu / k, alpha=p.alpha + math.log(k))


def trader_log_pmf(p: DPParams, k: int, y: int, method: NormConstMethod = dp.EFRON) -> float:
    if y % k:
        return -math.inf
    return dp.log_pmf(derive_trader_params(p, k), y // k, method)


def trader_pmf(p: DPParams, k: int, y: int, method: NormConstMethod = dp.EFRON) -> float:
    """Вероятность цены y для трейдера типа k (0, если k не делит y)."""
    return math.exp(trader_log_pmf(p, k, y, method))


def mixture_pmf(mp: MixtureParams, y: int, method: NormConstMethod = dp.EFRON) -> float:
    return sum(w * trader_pmf(mp.dp, k, y, method) for k, w in mp.phi.items() if w > 0)


def _component_log_consts(mu, alpha, multiples: Sequence[int], method: NormConstMethod) -> np.ndarray:
    """ln C_k для каждой компоненты; форма результата (..., m)."""
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    out = np.zeros(np.broadcast(mu, alpha).shape + (len(multiples),))
    if method.kind is NormConstKind.UNIT:
        return out
    if method.kind is NormConstKind.EFRON:
        for j, k in enumerate(multiples):
            out[..., j] = dp.log_efron_const(mu / k, alpha + math.log(k))
        return out
    mu_b, alpha_b = np.broadcast_arrays(mu, alpha)
    for idx in np.ndindex(mu_b.shape):
        p = DPParams(mu=float(mu_b[idx]), alpha=float(alpha_b[idx]))
        for j, k in enumerate(multiples):
            out[idx + (j,)] = dp.log_norm_const(derive_trader_params(p, k), method)
    return out


def mixture_log_lik_array(
    y,
    mu,
    alpha,
    log_phi: np.ndarray,
    multiples: Sequence[int] = (1, 5, 10),
    method: NormConstMethod = dp.EFRON,
) -> np.ndarray:
    """
    Логарифм правдоподобия смеси в замкнутой форме, векторизованно.

    log_phi имеет форму (n, m) и содержит ln phi_k (может быть -inf).
    Внутренняя сумма по типам считается через log-sum-exp.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    theta = np.exp(alpha)
    base = theta * (dp._y_log_ratio(y, mu) + y - mu) + 0.5 * alpha

    log_c = _component_log_consts(mu, alpha, multiples, method)
    terms = np.empty(np.broadcast(y, mu, alpha).shape + (len(multiples),))
    y_int = np.rint(y).astype(np.int64)
    for j, k in enumerate(multiples):
        x = y / k
        comp = 0.5 * math.log(k) + xlogy(x, x) - gammaln(x + 1.0) - x
        terms[..., j] = np.where(y_int % k == 0, comp, -np.inf)
    with np.errstate(invalid="ignore"):
        return base + logsumexp(terms + np.asarray(log_phi) - log_c, axis=-1)


def mixture_log_lik(mp: MixtureParams, y: int, method: NormConstMethod = dp.EFRON) -> float:
    """Логарифм правдоподобия смеси для наблюдения y >= 1."""
    if y < 1 or int(y) != y:
        raise DomainError(f"prices must be positive integers, got {y}")
    multiples = sorted(mp.phi)
    with np.errstate(divide="ignore"):
        log_phi = np.log(np.array([mp.phi[k] for k in multiples]))
    return float(mixture_log_lik_array(y, mp.dp.mu, mp.dp.alpha, log_phi, multiples, method))


def mixture_sample(mp: MixtureParams, rng_seed: int, n: int) -> np.ndarray:
    """Двухэтапная выборка: тип трейдера по phi, затем k * (выборка компоненты)."""
    if n < 1:
        raise DomainError("sample size must be positive")
    return draw_mixture(mp, np.random.default_rng(rng_seed), n)


def draw_mixture(mp: MixtureParams, rng: np.random.Generator, n: int) -> np.ndarray:
    multiples = sorted(mp.phi)
    weights = np.array([mp.phi[k] for k in multiples])
    types = rng.choice(len(multiples), size=n, p=weights / weights.sum())
    out = np.empty(n, dtype=np.int64)
    for j, k in enumerate(multiples):
        idx = np.flatnonzero(types == j)
        if idx.size:
            out[idx] = k * dp.draw(derive_trader_params(mp.dp, k), rng, idx.size)
    return out


def mixture_window(mp: MixtureParams) -> np.ndarray:
    """Объединение окон носителя всех компонент (в тиках)."""
    lo, hi = math.inf, -math.inf
    for k in mp.phi:
        c_lo, c_hi = dp.support_window(derive_trader_params(mp.dp, k))
        lo, hi = min(lo, k * c_lo), max(hi, k * c_hi)
    return np.arange(max(int(lo), 1), int(hi) + 1)


def component_moments(p: DPParams, k: int) -> Tuple[float, float]:
    """Моменты цены трейдера типа k прямым суммированием по k-кратному носителю."""
    mean, var = dp.moments_bruteforce(derive_trader_params(p, k))
    return k * mean, k * k * var


def mixture_moments(mp: MixtureParams) -> Tuple[float, float]:
    """Среднее и дисперсия смеси через моменты компонент."""
    parts: Dict[int, Tuple[float, float]] = {k: component_moments(mp.dp, k) for k in mp.phi}
    mean = sum(mp.phi[k] * m for k, (m, _) in parts.items())
    second = sum(mp.phi[k] * (v + m * m) for k, (m, v) in parts.items())
    return mean, second - mean * mean


def multiples_frequency(values: Iterable[int], k: int) -> float:
    """Доля значений, кратных k."""
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values)
    return float(np.mean(arr % k == 0))
