from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..models import (
    BA_THETA,
    CleanConfig,
    CleaningReport,
    DailyRow,
    ExogenousPolicy,
    FitConfig,
    FitResult,
    FormatSpec,
    ModelSpec,
    ModelVariant,
    PanelFit,
    RKConfig,
    RunConfig,
    StaticParams,
    SummaryRow,
    TickSeries,
)
from ..services import artifacts, daily_analysis, dynamics, estimation, ingestion

logger = logging.getLogger(__name__)


def stock_name(path: Path) -> str:
    """Имя акции это часть имени файла до первой точки."""
    return Path(path).name.split(".")[0]


def _fan_out(func: Callable, payloads: Sequence[tuple], jobs: int) -> list:
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(payloads))) as pool:
            return list(pool.map(func, payloads))
    return [func(p) for p in payloads]


# === Задания для пула (должны быть на уровне модуля) ===


def _clean_job(payload) -> Tuple[pd.DataFrame, CleaningReport, list]:
    path, primary_exchange, fmt, cfg, tick_scale = payload
    raw, malformed = ingestion.parse_trades(Path(path), fmt)
    kept, report = ingestion.clean(raw, primary_exchange, cfg)
    report.malformed = len(malformed)
    ts = ingestion.to_tick_series(kept, tick_scale)
    return ingestion.clean_frame(kept, ts), report, malformed


def _fit_job(payload) -> Dict[ModelVariant, FitResult]:
    ts, variants, config = payload
    return estimation.fit_variants(ts, config, variants)


@dataclass
class PipelineState:
    """Что агент уже знает в рамках одного запуска."""

    series: Dict[str, TickSeries] = field(default_factory=dict)
    fits: Dict[str, Dict[ModelVariant, FitResult]] = field(default_factory=dict)
    panel: List[DailyRow] = field(default_factory=list)
    outputs: List[Path] = field(default_factory=list)


class PipelineAgent:
    """
    Оркестратор пакетного конвейера: clean -> simulate/fit -> daily -> report.

    Каждая команда пишет файлы в run.out_dir атомарно и завершает работу
    манифестом, по которому запуск воспроизводится.
    """

    def __init__(self, run: RunConfig) -> None:
        self.run = run
        self.state = PipelineState()
        self.out_dir = Path(run.out_dir)

    def _out(self, name: str) -> Path:
        return self.out_dir / name

    def _emit(self, path: Path) -> Path:
        self.state.outputs.append(path)
        return path

    def finish(self) -> Path:
        return artifacts.write_manifest(self.run, self.state.outputs)

    # === Загрузка ===

    def load_series(self, paths: Sequence[Path], tick_scale: int = 100) -> Dict[str, TickSeries]:
        for path in paths:
            self.state.series[stock_name(path)] = ingestion.read_tick_series(path, tick_scale)
        return self.state.series

    # === Команды ===

    def clean(
        self,
        paths: Sequence[Path],
        primary_exchange: str,
        fmt: FormatSpec,
        cfg: CleanConfig,
        tick_scale: int = 100,
    ) -> List[Path]:
        """Очистка каждого файла: <stock>.clean.csv и <stock>.report.json."""
        payloads = [(str(p), primary_exchange, fmt, cfg, tick_scale) for p in paths]
        for path, (frame, report, malformed) in zip(paths, _fan_out(_clean_job, payloads, self.run.jobs)):
            name = stock_name(path)
            self._emit(artifacts.write_csv(self._out(f"{name}.clean.csv"), frame))
            payload = report.model_dump()
            payload["dropped_total"] = report.dropped_total
            payload["malformed_rows"] = [m.model_dump() for m in malformed]
            self._emit(artifacts.write_json(self._out(f"{name}.report.json"), payload))
            logger.info(f"[PipelineAgent] {name}: {report.retained} of {report.input_count} trades retained")
        self.finish()
        return self.state.outputs

    def simulate(
        self,
        theta: StaticParams,
        exo: ExogenousPolicy,
        y0: int,
        n: int,
        seed: int,
        stocks: int = 1,
    ) -> List[Path]:
        """Симуляция одного или нескольких независимых рядов (зерна порождаются из seed)."""
        if stocks == 1:
            seeds = [seed]
            names = ["sim"]
        else:
            seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(stocks)]
            names = [f"sim{i + 1:03d}" for i in range(stocks)]
        for name, s in zip(names, seeds):
            ts = dynamics.simulate(theta, exo, y0, s, n)
            self.state.series[name] = ts
            frame = ingestion.tick_frame(ts, first_duration_defined=True)
            self._emit(artifacts.write_csv(self._out(f"{name}.csv"), frame))
        self.finish()
        return self.state.outputs

    def fit(
        self,
        paths: Sequence[Path],
        variants: Sequence[ModelVariant],
        config: FitConfig,
        tick_scale: int = 100,
    ) -> List[Path]:
        """Оценка вариантов по каждой акции: JSON по варианту, summary.csv, comparison.csv."""
        series = self.load_series(paths, tick_scale)
        names = [stock_name(p) for p in paths]
        per_stock_jobs = self.run.jobs if len(names) > 1 else 1
        inner = config.model_copy(update={"jobs": 1 if per_stock_jobs > 1 else self.run.jobs})
        payloads = [(series[n], list(variants), inner) for n in names]
        summaries: List[SummaryRow] = []
        comparison: List[dict] = []
        for name, results in zip(names, _fan_out(_fit_job, payloads, per_stock_jobs)):
            self.state.fits[name] = results
            for variant, fr in results.items():
                self._emit(artifacts.write_json(self._out(f"{name}.fit.{variant.value}.json"), fr.to_json_dict()))
                summaries.append(estimation.summarize_fit(fr, name, tick_scale))
            comparison.extend(estimation.comparison_rows(results, name))
            dynamic = results.get(ModelVariant.DYNAMIC)
            if dynamic is not None and dynamic.path is not None:
                frame = dynamics.path_to_frame(dynamic.path, series[name])
                self._emit(artifacts.write_csv(self._out(f"{name}.path.csv"), frame))
        summary_frame = pd.DataFrame([s.model_dump(mode="json") for s in summaries])
        self._emit(artifacts.write_csv(self._out("summary.csv"), summary_frame))
        self._emit(artifacts.write_csv(self._out("comparison.csv"), pd.DataFrame(comparison)))
        self.finish()
        return self.state.outputs

    def daily(
        self,
        paths: Sequence[Path],
        models: Sequence[ModelSpec],
        rk_cfg: RKConfig,
        panel_path: Optional[Path] = None,
        tick_scale: int = 100,
    ) -> List[Path]:
        """Дневная панель, регрессии моделей, таблица коэффициентов и данные одномерных графиков."""
        if panel_path is not None:
            self.state.panel = daily_analysis.read_panel(panel_path)
        else:
            series = self.load_series(paths, tick_scale)
            self.state.panel = daily_analysis.build_daily_panel(series, rk_cfg, self.run.jobs)
        self._emit(artifacts.write_csv(self._out("panel.csv"), daily_analysis.panel_frame(self.state.panel)))

        fits: List[PanelFit] = [daily_analysis.fe_regression(self.state.panel, spec) for spec in models]
        self._emit(artifacts.write_json(self._out("panel_fits.json"), [f.model_dump() for f in fits]))
        table = daily_analysis.coefficient_table(fits)
        self._emit(artifacts.write_csv(self._out("coefficients.csv"), table, index=True))

        uni_fits, points = daily_analysis.univariate_fits(self.state.panel)
        self._emit(artifacts.write_csv(self._out("univariate_points.csv"), points))
        uni = pd.DataFrame([
            {"covariate": k, "beta": f.beta[k], "se": f.se[k], "p": f.p[k], "n": f.n} for k, f in uni_fits.items()
        ])
        self._emit(artifacts.write_csv(self._out("univariate_fits.csv"), uni))
        self.finish()
        return self.state.outputs

    def report(
        self,
        paths: Sequence[Path],
        theta_path: Optional[Path] = None,
        tick_scale: int = 100,
    ) -> List[Path]:
        """Описательные статистики по акциям и разбивка по последней цифре цены."""
        series = self.load_series(paths, tick_scale)
        self._emit(artifacts.write_csv(self._out("descriptive.csv"), daily_analysis.descriptive_stats(series)))
        theta = load_theta(theta_path) if theta_path is not None else None
        for name in sorted(series):
            ts = series[name]
            path = None
            if theta is not None and len(ts) >= dynamics.BURN_IN + 1:
                path = dynamics.filter_series(theta, estimation.standardize_exogenous(ts))
            frame = daily_analysis.digit_breakdown(ts, path)
            self._emit(artifacts.write_csv(self._out(f"{name}.digits.csv"), frame, index=True))
        self.finish()
        return self.state.outputs


def load_theta(path: Optional[Path]) -> StaticParams:
    """theta из JSON результата оценки или плоского словаря параметров; без пути берутся оценки BA."""
    if path is None:
        return BA_THETA
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return StaticParams(**payload.get("theta_hat", payload))
