from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

# Загружаем .env из корня проекта
load_dotenv(Path(__file__).resolve().parent.parent / ".env")

from .agent.pipeline_agent import PipelineAgent, load_theta
from .errors import PriceClusterError
from .models import (
    MODEL_I,
    MODEL_II,
    MODEL_III,
    PARAM_NAMES,
    CleanConfig,
    ExogenousPolicy,
    FitConfig,
    FormatSpec,
    ModelVariant,
    NormConstMethod,
    RKConfig,
    RunConfig,
    StaticParams,
)

logger = logging.getLogger("pricecluster")

MODELS = {"I": MODEL_I, "II": MODEL_II, "III": MODEL_III}
CONFIG_ENV = "PRICECLUSTER_CONFIG"


# === Разбор аргументов ===


def _hours(value: str) -> tuple:
    try:
        start, end = value.split("-")
        return time.fromisoformat(start.strip()), time.fromisoformat(end.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HH:MM-HH:MM, got {value!r}") from None


def _param(value: str) -> tuple:
    name, _, raw = value.partition("=")
    if name not in PARAM_NAMES or not raw:
        raise argparse.ArgumentTypeError(f"expected one of {', '.join(PARAM_NAMES)} as name=value, got {value!r}")
    return name, float(raw)


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    """Общие флаги: у корневого парсера с умолчаниями, у подкоманд без них."""
    parent = argparse.ArgumentParser(add_help=False)

    def default(value: Any) -> Any:
        return argparse.SUPPRESS if suppress else value

    parent.add_argument("--seed", type=int, default=default(None), help="Зерно генератора")
    parent.add_argument("--out-dir", type=Path, default=default(Path("out")), help="Каталог результатов")
    parent.add_argument("--jobs", type=int, default=default(1), help="Число параллельных процессов")
    parent.add_argument("--config", type=Path, default=default(None), help="Файл key=value с опциями")
    parent.add_argument(
        "--log-level", default=default(os.getenv("LOG_LEVEL", "INFO")),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pricecluster",
        description="Динамическая модель кластеризации цен: очистка, симуляция, оценка, дневной анализ.",
        parents=[_common()],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(suppress=True)

    clean = sub.add_parser("clean", help="Очистка сырых сделок", parents=[common])
    clean.add_argument("inputs", nargs="+", type=Path)
    clean.add_argument("--primary-exchange", required=True)
    clean.add_argument("--hours", type=_hours, default="09:30-16:00")
    clean.add_argument("--mad-k", type=float, default=10.0)
    clean.add_argument("--median-window", type=int, default=50)
    clean.add_argument("--min-window", type=int, default=10)
    clean.add_argument("--conditions", default="@,E,F", help="Допустимые коды условий продажи через запятую")
    clean.add_argument("--tick-scale", type=int, default=100)
    clean.add_argument("--delimiter", default=",")
    clean.add_argument("--timestamp-format", choices=["iso", "taq"], default="iso")
    clean.add_argument("--max-malformed", type=float, default=0.05)

    sim = sub.add_parser("simulate", help="Симуляция ряда тиков", parents=[common])
    sim.add_argument("--n", type=int, default=10_000)
    sim.add_argument("--y0", type=int, default=10013)
    sim.add_argument("--theta", type=Path, default=None, help="JSON с theta (по умолчанию оценки BA)")
    sim.add_argument("--param", type=_param, action="append", default=[], help="Замена параметра: name=value")
    sim.add_argument("--stocks", type=int, default=1)
    sim.add_argument("--z-log-scale", type=float, default=1.0)
    sim.add_argument("--v-log-scale", type=float, default=1.0)

    fit = sub.add_parser("fit", help="Оценка модели методом максимального правдоподобия", parents=[common])
    fit.add_argument("inputs", nargs="+", type=Path)
    fit.add_argument("--variant", action="append", choices=[v.value for v in ModelVariant] + ["all"])
    fit.add_argument("--n-starts", type=int, default=5)
    fit.add_argument("--max-fev", type=int, default=10_000)
    fit.add_argument("--method", choices=["Powell", "Nelder-Mead"], default="Powell")
    fit.add_argument("--norm-const", choices=["efron", "truncated", "unit"], default="efron")
    fit.add_argument("--tick-scale", type=int, default=100)

    daily = sub.add_parser("daily", help="Дневная панель и регрессии", parents=[common])
    daily.add_argument("inputs", nargs="*", type=Path)
    daily.add_argument("--panel", type=Path, default=None, help="Готовая панель вместо файлов тиков")
    daily.add_argument("--models", default="I,II,III")
    daily.add_argument("--vol-transform", choices=["variance", "std"], default="variance")
    daily.add_argument("--bandwidth", type=int, default=None)
    daily.add_argument("--no-flat-top", action="store_true")
    daily.add_argument("--tick-scale", type=int, default=100)

    report = sub.add_parser("report", help="Описательные статистики и разбивка по цифрам", parents=[common])
    report.add_argument("inputs", nargs="+", type=Path)
    report.add_argument("--theta", type=Path, default=None, help="JSON с theta для мгновенного SD")
    report.add_argument("--tick-scale", type=int, default=100)

    return parser


def _config_defaults(parser: argparse.ArgumentParser, values: Dict[str, Optional[str]]) -> None:
    known = {
        a.dest: a for a in parser._actions
        if a.default is not argparse.SUPPRESS and not isinstance(a, argparse._SubParsersAction)
    }
    updates: Dict[str, Any] = {}
    for key, raw in values.items():
        dest = key.replace("-", "_").lower()
        if dest not in known or raw is None:
            continue
        action = known[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            updates[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            updates[dest] = [action.type(v) if action.type else v for v in items]
        else:
            updates[dest] = raw
        action.required = False
    parser.set_defaults(**updates)


def apply_config(parser: argparse.ArgumentParser, values: Dict[str, Optional[str]]) -> None:
    """Значения из файла становятся умолчаниями парсера и подкоманд; явные флаги сильнее."""
    _config_defaults(parser, values)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _config_defaults(sub, values)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    config_path = known.config or (Path(os.environ[CONFIG_ENV]) if os.getenv(CONFIG_ENV) else None)
    if config_path is not None:
        if not config_path.is_file():
            parser.error(f"config file not found: {config_path}")
        apply_config(parser, dotenv_values(config_path))
    args = parser.parse_args(argv)
    if args.command == "simulate" and args.seed is None:
        parser.error("simulate requires --seed")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    return args


# === Команды ===


def _options(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"command", "seed", "out_dir", "jobs", "config", "log_level", "inputs"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, Path):
            value = value.name
        elif isinstance(value, tuple):
            value = [str(v) for v in value]
        elif isinstance(value, list):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        out[key] = value
    return out


def run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        command=args.command,
        seed=args.seed,
        out_dir=args.out_dir,
        jobs=args.jobs,
        inputs=list(getattr(args, "inputs", []) or []) + ([args.panel] if getattr(args, "panel", None) else []),
        options=_options(args),
    )


def cmd_clean(args: argparse.Namespace) -> int:
    start, end = args.hours
    fmt = FormatSpec(
        delimiter=args.delimiter,
        timestamp_format=args.timestamp_format,
        max_malformed_fraction=args.max_malformed,
    )
    cfg = CleanConfig(
        session_start=start,
        session_end=end,
        mad_k=args.mad_k,
        median_window=args.median_window,
        min_window=args.min_window,
        allowed_conditions=frozenset(c.strip() for c in args.conditions.split(",") if c.strip()),
    )
    PipelineAgent(run_config(args)).clean(args.inputs, args.primary_exchange, fmt, cfg, args.tick_scale)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    theta = load_theta(args.theta)
    if args.param:
        theta = StaticParams(**{**theta.to_dict(), **dict(args.param)})
    exo = ExogenousPolicy(z_log_scale=args.z_log_scale, v_log_scale=args.v_log_scale)
    PipelineAgent(run_config(args)).simulate(theta, exo, args.y0, args.n, args.seed, args.stocks)
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    chosen = args.variant or ["all"]
    if "all" in chosen:
        variants = list(ModelVariant)
    else:
        variants = [ModelVariant(v) for v in dict.fromkeys(chosen)]
    norm_const = {
        "efron": NormConstMethod.efron(),
        "truncated": NormConstMethod.truncated(),
        "unit": NormConstMethod.unit(),
    }[args.norm_const]
    config = FitConfig(
        n_starts=args.n_starts,
        seed=args.seed if args.seed is not None else 0,
        max_fev=args.max_fev,
        method=args.method,
        fallback="Nelder-Mead" if args.method == "Powell" else "Powell",
        norm_const=norm_const,
        jobs=args.jobs,
    )
    PipelineAgent(run_config(args)).fit(args.inputs, variants, config, args.tick_scale)
    return 0


def cmd_daily(args: argparse.Namespace) -> int:
    if not args.inputs and args.panel is None:
        raise PriceClusterError("daily needs tick files or --panel")
    labels = [m.strip() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in labels if m not in MODELS]
    if unknown:
        raise PriceClusterError(f"unknown models: {', '.join(unknown)}")
    models = [MODELS[m].model_copy(update={"vol_transform": args.vol_transform}) for m in labels]
    rk_cfg = RKConfig(bandwidth=args.bandwidth, flat_top=not args.no_flat_top)
    PipelineAgent(run_config(args)).daily(args.inputs, models, rk_cfg, args.panel, args.tick_scale)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    PipelineAgent(run_config(args)).report(args.inputs, args.theta, args.tick_scale)
    return 0


COMMANDS = {
    "clean": cmd_clean,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "daily": cmd_daily,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (PriceClusterError, ValidationError, OSError) as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
