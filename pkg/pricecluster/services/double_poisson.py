"""
Double Poisson Service

Двойное распределение Пуассона с параметром положения mu > 0 и
логарифмическим параметром дисперсии alpha (alpha = 0: обычный Пуассон,
alpha > 0: недисперсия). Все вычисления ведутся в логарифмах через
log-gamma: при ценах порядка 10^4 тиков наивная формула переполняется.
"""

from __future__ import annotations

import logging
import math
from typing import Tuple

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from ..errors import DomainError
from ..models import DPParams, NormConstKind, NormConstMethod

logger = logging.getLogger(__name__)

# Масса хвостов за пределами окна носителя
TAIL_MASS = 1e-12
WINDOW_SIGMAS = 12.0
MIN_HALF_WIDTH = 10.0
MAX_WIDENINGS = 40

EFRON = NormConstMethod.efron()


def _y_log_ratio(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """y * ln(mu / y) с соглашением 0 * ln(...) = 0."""
    with np.errstate(divide="ignore"):
        return xlogy(y, mu / y)


def log_kernel(y, mu, alpha) -> np.ndarray:
    """Логарифм ненормированного слагаемого суммы C(mu, alpha)."""
    y = np.asarray(y, dtype=float)
    theta = np.exp(alpha)
    return (
        xlogy(y, y) - gammaln(y + 1.0) - y
        + theta * (_y_log_ratio(y, mu) + y - mu)
        + 0.5 * np.asarray(alpha, dtype=float)
    )


def log_efron_const(mu, alpha) -> np.ndarray:
    """ln C по аппроксимации Эфрона; векторизовано по mu и alpha."""
    em = np.exp(alpha) * np.asarray(mu, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        corr = (1.0 - np.exp(alpha)) / (12.0 * em) * (1.0 + 1.0 / em)
        return np.log1p(corr)


def support_window(p: DPParams) -> Tuple[int, int]:
    """
    Окно [lo, hi] целых значений, вне которого масса меньше TAIL_MASS.

    Начинаем с mu +- 12 sigma, sigma = sqrt(mu e^-alpha), и расширяем окно,
    пока геометрическая оценка хвоста не станет достаточно малой.
    """
    sigma = math.sqrt(p.mu * math.exp(-p.alpha))
    half = max(WINDOW_SIGMAS * sigma, MIN_HALF_WIDTH)
    for _ in range(MAX_WIDENINGS):
        lo = max(0, int(math.floor(p.mu - half)))
        hi = int(math.ceil(p.mu + half))
        logk = log_kernel(np.arange(lo, hi + 1), p.mu, p.alpha)
        total = logsumexp(logk)
        if not np.isfinite(total):
            raise DomainError(f"support window failed for mu={p.mu}, alpha={p.alpha}")
        if _tail_bound(logk[::-1], total) and (lo == 0 or _tail_bound(logk, total)):
            return lo, hi
        half *= 2.0
    raise DomainError(f"support window did not converge for mu={p.mu}, alpha={p.alpha}")


def _tail_bound(logk: np.ndarray, total: float) -> bool:
    # logk[0] это крайний член, logk[1] его сосед
    if len(logk) < 2 or logk[0] >= logk[1]:
        return False
    ratio = math.exp(logk[0] - logk[1])
    return math.exp(logk[0] - total) / (1.0 - ratio) < TAIL_MASS


def log_norm_const(p: DPParams, method: NormConstMethod = EFRON) -> float:
    """ln C(mu, alpha) выбранным способом."""
    if method.kind is NormConstKind.UNIT:
        return 0.0
    if method.kind is NormConstKind.EFRON:
        value = float(log_efron_const(p.mu, p.alpha))
    else:
        m = method.m
        if m is None:
            m = max(int(math.ceil(2.0 * p.mu)), support_window(p)[1])
        elif m < 2.0 * p.mu:
            raise DomainError(f"truncation point m={m} is below 2*mu={2.0 * p.mu}")
        value = float(logsumexp(log_kernel(np.arange(0, m + 1), p.mu, p.alpha)))
    if not np.isfinite(value):
        raise DomainError(f"normalizing constant is not finite for mu={p.mu}, alpha={p.alpha}")
    return value


def norm_const(p: DPParams, method: NormConstMethod = EFRON) -> float:
    """Нормирующая константа C(mu, alpha) > 0."""
    value = math.exp(log_norm_const(p, method))
    if not (np.isfinite(value) and value > 0):
        raise DomainError(f"normalizing constant is not finite for mu={p.mu}, alpha={p.alpha}")
    return value


def _check_count(y: int) -> int:
    if y < 0 or int(y) != y:
        raise DomainError(f"y must be a non-negative integer, got {y}")
    return int(y)


def log_pmf(p: DPParams, y: int, method: NormConstMethod = EFRON) -> float:
    """Логарифм вероятности P[Y = y | mu, alpha]."""
    y = _check_count(y)
    return float(log_kernel(y, p.mu, p.alpha)) - log_norm_const(p, method)


def pmf(p: DPParams, y: int, method: NormConstMethod = EFRON) -> float:
    return math.exp(log_pmf(p, y, method))


def log_pmf_array(y, p: DPParams, method: NormConstMethod = EFRON) -> np.ndarray:
    """Векторизованный log_pmf по массиву значений y."""
    return log_kernel(y, p.mu, p.alpha) - log_norm_const(p, method)


def mean_var(p: DPParams) -> Tuple[float, float]:
    """Приближённые моменты: (mu, mu e^-alpha)."""
    return p.mu, p.mu * math.exp(-p.alpha)


def score(p: DPParams, y: int) -> Tuple[float, float]:
    """Приближённый скор по (mu, alpha); C считается постоянной."""
    y = _check_count(y)
    s_mu, s_alpha = score_array(np.asarray(float(y)), p.mu, p.alpha)
    return float(s_mu), float(s_alpha)


def score_array(y, mu, alpha) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    theta = np.exp(alpha)
    s_mu = theta / mu * (y - mu)
    s_alpha = theta * (_y_log_ratio(y, mu) - mu + y) + 0.5
    return s_mu, s_alpha


def fisher_info(p: DPParams) -> np.ndarray:
    """Приближённая информация Фишера diag(e^alpha / mu, 1/2)."""
    return np.diag([math.exp(p.alpha) / p.mu, 0.5])


def window_pmf(p: DPParams) -> Tuple[np.ndarray, np.ndarray]:
    """Значения и точно перенормированные вероятности на окне носителя."""
    lo, hi = support_window(p)
    values = np.arange(lo, hi + 1)
    logk = log_kernel(values, p.mu, p.alpha)
    return values, np.exp(logk - logsumexp(logk))


def moments_bruteforce(p: DPParams) -> Tuple[float, float]:
    """Среднее и дисперсия, посчитанные прямым суммированием по окну."""
    values, probs = window_pmf(p)
    mean = float(np.dot(values, probs))
    return mean, float(np.dot((values - mean) ** 2, probs))


def draw(p: DPParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """n значений методом обращения функции распределения."""
    values, probs = window_pmf(p)
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return values[np.minimum(idx, len(values) - 1)]


def sample(p: DPParams, rng_seed: int, n: int) -> np.ndarray:
    """Детерминированная (по зерну) выборка размера n."""
    if n < 1:
        raise DomainError("sample size must be positive")
    return draw(p, np.random.default_rng(rng_seed), n)


def poisson_log_pmf(y: int, mu: float) -> float:
    """Логарифм вероятности обычного Пуассона (для сверки при alpha = 0)."""
    return float(xlogy(y, mu) - mu - gammaln(y + 1.0))
