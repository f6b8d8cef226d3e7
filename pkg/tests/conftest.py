import math
from datetime import date
from pathlib import Path
from typing import List

import numpy as np
import pytest

from pricecluster.models import BA_THETA, DailyRow, ExogenousPolicy, MixtureParams, TickSeries
from pricecluster.services import dynamics

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def golden_raw() -> Path:
    return DATA_DIR / "golden_raw.csv"


@pytest.fixture
def golden_clean() -> Path:
    return DATA_DIR / "golden_clean.csv"


@pytest.fixture
def bank_mixture() -> MixtureParams:
    # цена $100.13, alpha = 7, phi = (0.95, 0.02, 0.03)
    return MixtureParams.build(10013, 7.0, {1: 0.95, 5: 0.02, 10: 0.03})


@pytest.fixture(scope="session")
def simulated_series() -> TickSeries:
    return dynamics.simulate(BA_THETA, ExogenousPolicy(), 10013, 20240101, 300)


def make_series(y, z=None, v=None, segment=None, start="2020-01-02 09:30:00") -> TickSeries:
    """Небольшой ряд тиков с равномерной сеткой времени."""
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    z = np.ones(n) if z is None else np.asarray(z, dtype=float)
    v = np.full(n, 100.0) if v is None else np.asarray(v, dtype=float)
    segment = np.zeros(n, dtype=np.int64) if segment is None else np.asarray(segment)
    stamps = np.datetime64(start, "ns") + np.cumsum(np.rint(z * 1e9).astype(np.int64)).astype("timedelta64[ns]")
    return TickSeries(timestamps=stamps, y=y, z=z, v=v, segment=segment)


PANEL_BETA = {"price": -0.12, "volatility": 0.70, "duration": -0.01, "volume": 3.96}
PANEL_BASE = {"price": 50.0, "volatility": 1e-4, "duration": 10.0, "volume": 1000.0}
PANEL_FIELDS = {"price": "mean_price", "volatility": "rk_vol", "duration": "mean_duration", "volume": "mean_volume"}


def make_panel(n_stocks, n_days, noise=0.0, seed=0, skip=()) -> List[DailyRow]:
    """Панель, где pc = gamma_i + delta_t + X beta (+ шум) точно."""
    rng = np.random.default_rng(seed)
    level = sum(PANEL_BETA[k] * math.log(PANEL_BASE[k]) for k in PANEL_BETA)
    rows = []
    for i in range(n_stocks):
        for t in range(n_days):
            if (i, t) in skip:
                continue
            values = {k: PANEL_BASE[k] * math.exp(rng.uniform(-0.05, 0.05)) for k in PANEL_BETA}
            pc = (0.3 - level + 0.01 * i) + 0.005 * t
            pc += sum(PANEL_BETA[k] * math.log(values[k]) for k in PANEL_BETA) + noise * rng.standard_normal()
            rows.append(DailyRow(
                stock=f"S{i}", day=date(2020, 1, 2 + t), pc=pc, n_trades=100,
                **{PANEL_FIELDS[k]: v for k, v in values.items()},
            ))
    return rows
