"""Необязательные ускорители."""

from __future__ import annotations

import logging
from typing import Any, Callable

logger = logging.getLogger(__name__)

try:
    from numba import jit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def jit(function_or_signature: Any = None, **kwargs: Any) -> Any:
        """Заглушка numba.jit: возвращает функцию без изменений."""
        if callable(function_or_signature):
            return function_or_signature

        def wrap(func: Callable[..., Any]) -> Callable[..., Any]:
            return func

        return wrap


__all__ = ["jit", "HAS_NUMBA"]
