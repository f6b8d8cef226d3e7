"""
Иерархия исключений pricecluster.

CLI переводит любой PriceClusterError в код выхода 1.
"""

from __future__ import annotations

from typing import Any, Optional, Sequence


class PriceClusterError(Exception):
    """Базовая ошибка библиотеки."""


class DomainError(PriceClusterError, ValueError):
    """Аргументы вне области определения распределения или неконечный результат."""


class FilterDivergenceError(PriceClusterError):
    """Фильтр выдал неконечное значение alpha_t или eta_t."""

    def __init__(self, t: int, message: str = "") -> None:
        self.t = t
        super().__init__(message or f"filter diverged at t={t}")


class SimulationError(PriceClusterError):
    """Симулированная цена вышла за допустимую область (y_t <= 0)."""

    def __init__(self, t: int, message: str = "") -> None:
        self.t = t
        super().__init__(message or f"simulated price left the support at t={t}")


class EstimationError(PriceClusterError):
    """Ни один старт оптимизатора не дал конечного значения правдоподобия."""

    def __init__(self, message: str, diagnostics: Optional[Sequence[Any]] = None) -> None:
        self.diagnostics = list(diagnostics or [])
        super().__init__(message)


class FormatError(PriceClusterError):
    """Входной файл не соответствует ожидаемому формату."""


class PrecisionError(PriceClusterError, ValueError):
    """Цену нельзя точно перевести в целые тики."""


class SingularDesignError(PriceClusterError):
    """Матрица регрессоров вырождена после снятия фиксированных эффектов."""

    def __init__(self, columns: Sequence[str]) -> None:
        self.columns = list(columns)
        super().__init__(f"collinear covariates after demeaning: {', '.join(self.columns)}")


class RealizedKernelError(PriceClusterError):
    """Реализованное ядро существенно отрицательно."""
