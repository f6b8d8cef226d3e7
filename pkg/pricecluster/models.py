from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from datetime import date, time
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# === Распределения ===


class NormConstKind(str, Enum):
    EFRON = "efron"
    TRUNCATED = "truncated"
    UNIT = "unit"


class NormConstMethod(BaseModel):
    """Способ вычисления нормирующей константы C(mu, alpha)."""

    model_config = ConfigDict(frozen=True)

    kind: NormConstKind = Field(NormConstKind.EFRON, description="Аппроксимация Эфрона, усечённая сумма или C = 1")
    m: Optional[int] = Field(
        None, ge=1, description="Верхний предел усечённой суммы; None: подобрать по окну носителя"
    )

    @classmethod
    def efron(cls) -> "NormConstMethod":
        return cls(kind=NormConstKind.EFRON)

    @classmethod
    def truncated(cls, m: Optional[int] = None) -> "NormConstMethod":
        return cls(kind=NormConstKind.TRUNCATED, m=m)

    @classmethod
    def unit(cls) -> "NormConstMethod":
        return cls(kind=NormConstKind.UNIT)


class DPParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: float = Field(..., gt=0, description="Параметр положения (в тиках)")
    alpha: float = Field(0.0, description="Логарифм параметра дисперсии; 0: обычный Пуассон")

    @field_validator("mu", "alpha")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("parameter must be finite")
        return v


class TickMultipleSet(BaseModel):
    """Кратности тика, доступные типам трейдеров."""

    model_config = ConfigDict(frozen=True)

    multiples: Tuple[int, ...] = Field((1, 5, 10), description="k_1 < ... < k_m, k_1 = 1")

    @field_validator("multiples")
    @classmethod
    def _check(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or v[0] != 1:
            raise ValueError("tick multiple set must start with 1")
        if any(k <= 0 for k in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("tick multiples must be positive and strictly increasing")
        return v

    def __iter__(self):  # type: ignore[override]
        return iter(self.multiples)

    def __len__(self) -> int:
        return len(self.multiples)


DEFAULT_TICK_MULTIPLES = TickMultipleSet()


class MixtureParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    dp: DPParams
    phi: Dict[int, float] = Field(..., description="Доли типов трейдеров по кратности k")

    @model_validator(mode="after")
    def _check_weights(self) -> "MixtureParams":
        TickMultipleSet(multiples=tuple(sorted(self.phi)))
        if any((w < 0) or not math.isfinite(w) for w in self.phi.values()):
            raise ValueError("mixture weights must be non-negative")
        if abs(sum(self.phi.values()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to one")
        return self

    @property
    def multiples(self) -> TickMultipleSet:
        return TickMultipleSet(multiples=tuple(sorted(self.phi)))

    @classmethod
    def build(cls, mu: float, alpha: float, phi: Mapping[int, float]) -> "MixtureParams":
        return cls(dp=DPParams(mu=mu, alpha=alpha), phi=dict(phi))


# === Динамика ===

PARAM_NAMES: Tuple[str, ...] = ("c", "b", "a", "d", "f", "g1", "g2", "g3", "g4", "h5", "h10")


class StaticParams(BaseModel):
    """Статический вектор theta = (c, b, a, d, f, g1..g4, h5, h10)."""

    model_config = ConfigDict(frozen=True)

    c: float = Field(0.0, description="Константа рекурсии alpha")
    b: float = Field(0.0, description="Авторегрессия alpha")
    a: float = Field(0.0, description="Коэффициент при скоре")
    d: float = Field(0.0, description="Коэффициент при ln(длительности)")
    f: float = Field(0.0, description="Авторегрессия eta")
    g1: float = Field(0.0, description="ln(цены)")
    g2: float = Field(0.0, description="ln(дисперсии)")
    g3: float = Field(0.0, description="ln(длительности)")
    g4: float = Field(0.0, description="ln(объёма)")
    h5: float = Field(0.0, ge=0, description="Сила типа 5 тиков")
    h10: float = Field(0.0, ge=0, description="Сила типа 10 тиков")

    @field_validator("b", "f")
    @classmethod
    def _stable(cls, v: float) -> float:
        if not abs(v) < 1:
            raise ValueError("autoregressive parameters must satisfy |x| < 1")
        return v

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "StaticParams":
        return cls(**{n: float(v) for n, v in zip(PARAM_NAMES, values)})

    def to_dict(self) -> Dict[str, float]:
        return {n: getattr(self, n) for n in PARAM_NAMES}


# Оценки для BA из таблицы коэффициентов; h5, h10 подобраны так, чтобы
# средние доли были близки к 4% и 12%.
BA_THETA = StaticParams(
    c=5.00, b=0.09, a=0.30, d=-0.29, f=0.39,
    g1=-0.14, g2=0.18, g3=0.03, g4=-0.71,
    h5=0.03, h10=0.09,
)


@dataclass
class TickSeries:
    """Выровненные массивы цен (тики), длительностей и объёмов."""

    timestamps: np.ndarray  # datetime64[ns]
    y: np.ndarray  # int64, тики
    z: np.ndarray  # float64, секунды до сделки
    v: np.ndarray  # float64, объём
    segment: np.ndarray  # int64, номер сегмента (торгового дня)
    tick_scale: int = 100
    z_std: Optional[np.ndarray] = None
    v_std: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[ns]")
        self.y = np.asarray(self.y, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.segment = np.asarray(self.segment, dtype=np.int64)
        n = len(self.y)
        if not (len(self.timestamps) == len(self.z) == len(self.v) == len(self.segment) == n):
            raise ValueError("tick series arrays must have equal lengths")
        if n and (self.y.min() < 1):
            raise ValueError("prices must be at least one tick")
        if n and (not np.all(self.z > 0) or not np.all(self.v > 0)):
            raise ValueError("durations and volumes must be positive")
        if n > 1 and not np.all(np.diff(self.timestamps.astype(np.int64)) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def segment_start(self) -> np.ndarray:
        start = np.ones(len(self.y), dtype=bool)
        start[1:] = self.segment[1:] != self.segment[:-1]
        return start

    @property
    def days(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    def with_standardized(self, z_std: np.ndarray, v_std: np.ndarray) -> "TickSeries":
        return replace(self, z_std=z_std, v_std=v_std)

    def take(self, mask: np.ndarray) -> "TickSeries":
        return TickSeries(
            timestamps=self.timestamps[mask], y=self.y[mask], z=self.z[mask], v=self.v[mask],
            segment=self.segment[mask], tick_scale=self.tick_scale,
        )


@dataclass(frozen=True)
class FilterState:
    mu: float
    alpha: float
    eta: float
    phi: Tuple[float, float, float]
    clamped: bool = False


@dataclass
class FilterPath:
    """Траектория фильтра: по одному значению на тик."""

    mu: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    phi: np.ndarray  # (n, 3): phi1, phi5, phi10
    loglik_contrib: np.ndarray  # NaN на тиках прогрева
    contributes: np.ndarray
    clamped: int = 0
    first_clamped_t: Optional[int] = None

    @property
    def n_contrib(self) -> int:
        return int(self.contributes.sum())

    @property
    def loglik_total(self) -> float:
        return float(np.sum(self.loglik_contrib[self.contributes]))

    @property
    def loglik_avg(self) -> float:
        n = self.n_contrib
        return self.loglik_total / n if n else float("nan")

    @property
    def variance(self) -> np.ndarray:
        return self.mu * np.exp(-self.alpha)


class InitPolicy(BaseModel):
    """Начальное состояние фильтра в каждом сегменте."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["stationary", "fixed"] = Field(
        "stationary", description="stationary: alpha = c/(1-b), eta: безусловное среднее"
    )
    alpha0: float = 0.0
    eta0: float = 0.0


class ExogenousPolicy(BaseModel):
    """Откуда симулятор берёт длительности и объёмы."""

    kind: Literal["lognormal", "fixed"] = "lognormal"
    z_log_scale: float = Field(1.0, gt=0)
    v_log_scale: float = Field(1.0, gt=0)
    z: Optional[List[float]] = None
    v: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_fixed(self) -> "ExogenousPolicy":
        if self.kind == "fixed":
            if self.z is None or self.v is None or len(self.z) != len(self.v):
                raise ValueError("fixed policy needs z and v series of equal length")
            if min(self.z) <= 0 or min(self.v) <= 0:
                raise ValueError("fixed durations and volumes must be positive")
        return self


# === Оценивание ===


class ModelVariant(str, Enum):
    NO_CLUSTERING = "none"
    STATIC = "static"
    DYNAMIC = "dynamic"

    @property
    def free_params(self) -> Tuple[str, ...]:
        if self is ModelVariant.NO_CLUSTERING:
            return ("c", "b", "a", "d")
        if self is ModelVariant.STATIC:
            return ("c", "b", "a", "d", "h5", "h10")
        return PARAM_NAMES

    @property
    def n_params(self) -> int:
        return len(self.free_params)


class FitConfig(BaseModel):
    n_starts: int = Field(5, ge=3, description="Число стартовых точек")
    seed: int = Field(0, description="Зерно для возмущения стартов")
    max_fev: int = Field(10_000, ge=10, description="Лимит вычислений функции на старт")
    ftol: float = Field(1e-8, gt=0, description="Порог относительного улучшения")
    xtol: float = Field(1e-4, gt=0)
    perturbation: float = Field(0.5, ge=0, description="Полуширина равномерных возмущений")
    method: Literal["Powell", "Nelder-Mead"] = "Powell"
    fallback: Optional[Literal["Powell", "Nelder-Mead"]] = "Nelder-Mead"
    norm_const: NormConstMethod = Field(default_factory=NormConstMethod.efron)
    jobs: int = Field(1, ge=1, description="Параллельные старты")


class StartTrace(BaseModel):
    start: int
    x0: Dict[str, float]
    theta: Optional[Dict[str, float]] = None
    loglik_avg: Optional[float] = None
    nfev: int = 0
    method: str = ""
    converged: bool = False
    message: str = ""


class FitResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    variant: ModelVariant
    theta_hat: StaticParams
    loglik_total: float
    loglik_avg: float
    aic: float
    n_obs: int
    n_params: int
    converged: bool
    starts: List[StartTrace] = Field(default_factory=list)
    path: Optional[FilterPath] = Field(None, exclude=True)

    def to_json_dict(self) -> Dict[str, Any]:
        out = self.model_dump(mode="json")
        out["theta_hat"] = self.theta_hat.to_dict()
        return out


class SummaryRow(BaseModel):
    stock: str = ""
    variant: ModelVariant = ModelVariant.DYNAMIC
    mu_bar: float = Field(..., description="Средняя цена, доллары")
    alpha_bar: float
    phi1: float = Field(..., description="%")
    phi5: float = Field(..., description="%")
    phi10: float = Field(..., description="%")


# === Данные ===


class RawTrade(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    timestamp: pd.Timestamp
    price: Decimal = Field(..., ge=0)
    volume: int = Field(..., gt=0)
    exchange: str
    sale_condition: str = ""
    correction: int = 0
    suffix: str = ""
    line: int = Field(0, description="Номер строки во входном файле")


class CleanTrade(RawTrade):
    group_size: int = Field(1, ge=1, description="Сколько записей с той же меткой времени объединено")


class MalformedRow(BaseModel):
    line: int
    reason: str


CLEANING_RULES: Tuple[str, ...] = (
    "suffix",
    "hours",
    "zero_price",
    "off_exchange",
    "corrected",
    "abnormal_condition",
    "outlier",
    "duplicate_collapse",
)


class CleaningReport(BaseModel):
    input_count: int = 0
    dropped: Dict[str, int] = Field(default_factory=lambda: {r: 0 for r in CLEANING_RULES})
    retained: int = 0
    malformed: int = 0

    @property
    def dropped_total(self) -> int:
        return sum(self.dropped.values())


class FormatSpec(BaseModel):
    delimiter: str = Field(",", min_length=1, max_length=1)
    timestamp_format: Literal["iso", "taq"] = "iso"
    timestamp_col: str = "timestamp"
    date_col: str = "date"
    price_col: str = "price"
    size_col: str = "size"
    exchange_col: str = "exchange"
    condition_col: str = "condition"
    correction_col: str = "correction"
    suffix_col: str = "suffix"
    max_malformed_fraction: float = Field(0.05, ge=0, le=1)

    @property
    def required_columns(self) -> List[str]:
        cols = [
            self.timestamp_col, self.price_col, self.size_col, self.exchange_col,
            self.condition_col, self.correction_col, self.suffix_col,
        ]
        if self.timestamp_format == "taq":
            cols.append(self.date_col)
        return cols


class CleanConfig(BaseModel):
    session_start: time = time(9, 30)
    session_end: time = time(16, 0)
    mad_k: float = Field(10.0, gt=0)
    median_window: int = Field(50, ge=2)
    min_window: int = Field(10, ge=1)
    allowed_conditions: FrozenSet[str] = frozenset({"@", "E", "F"})
    allowed_corrections: FrozenSet[int] = frozenset({0})


# === Дневной анализ ===


class RKConfig(BaseModel):
    bandwidth: Optional[int] = Field(None, ge=0, description="Фиксированная ширина H; None: правило подстановки")
    c_star: float = Field((12.0 ** 2 / 0.269) ** 0.2, gt=0)
    jitter: int = Field(2, ge=1, description="Число точек усреднения на концах дня")
    sparse_seconds: float = Field(1200.0, gt=0, description="Шаг разреженной RV для оценки IV")
    sparse_offsets: int = Field(10, ge=1)
    flat_top: bool = True


class DailyRow(BaseModel):
    stock: str
    day: date
    pc: float = Field(..., ge=-0.2, le=0.8)
    mean_price: float = Field(..., gt=0)
    rk_vol: float = Field(..., ge=0)
    mean_duration: float = Field(..., gt=0)
    mean_volume: float = Field(..., gt=0)
    n_trades: int = Field(0, ge=0)


REGRESSORS: Tuple[str, ...] = ("price", "volatility", "duration", "volume")


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    regressors: Tuple[str, ...]
    stock_effects: bool = True
    day_effects: bool = True
    vol_transform: Literal["variance", "std"] = "variance"

    @field_validator("regressors")
    @classmethod
    def _known(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [r for r in v if r not in REGRESSORS]
        if unknown or not v:
            raise ValueError(f"unknown regressors: {unknown}")
        return v


MODEL_I = ModelSpec(label="I", regressors=("price", "volatility", "duration"))
MODEL_II = ModelSpec(label="II", regressors=("price", "duration", "volume"))
MODEL_III = ModelSpec(label="III", regressors=REGRESSORS)


class PanelFit(BaseModel):
    label: str
    regressors: List[str]
    beta: Dict[str, float]
    se: Dict[str, float]
    t: Dict[str, float]
    p: Dict[str, float]
    stars: Dict[str, str]
    residuals: List[float] = Field(default_factory=list)
    fe_stock: Dict[str, float] = Field(default_factory=dict)
    fe_day: Dict[str, float] = Field(default_factory=dict)
    n: int
    n_stocks: int
    n_days: int
    dropped_zero_rk: int = 0


# === Запуск ===


class RunConfig(BaseModel):
    """Полное описание запуска команды; по нему пишется манифест."""

    command: str
    seed: Optional[int] = None
    out_dir: Path = Path("out")
    jobs: int = Field(1, ge=1)
    inputs: List[Path] = Field(default_factory=list)
    options: Dict[str, Any] = Field(default_factory=dict)

    def config_hash(self) -> str:
        payload = json.dumps(
            {"command": self.command, "seed": self.seed, "options": self.options},
            sort_keys=True, default=str,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()
