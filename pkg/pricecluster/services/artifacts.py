"""
Artifacts Service

Атомарная запись выходных файлов (временный файл + rename) и манифест
запуска, по которому запуск воспроизводится байт в байт.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import pandas as pd
from pydantic import BaseModel

from ..models import RunConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "linearmodels", "numba", "pydantic", "python-dotenv")


def write_bytes_atomic(path: Union[str, Path], data: bytes) -> Path:
    """Пишет во временный файл рядом и переименовывает."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_text(path: Union[str, Path], text: str) -> Path:
    return write_bytes_atomic(path, text.encode("utf-8"))


def write_json(path: Union[str, Path], payload: Any) -> Path:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def write_csv(path: Union[str, Path], frame: pd.DataFrame, index: bool = False) -> Path:
    return write_text(path, frame.to_csv(index=index, lineterminator="\n"))


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def package_versions(names: Iterable[str] = TRACKED_PACKAGES) -> Dict[str, str]:
    out = {"python": platform.python_version()}
    for name in names:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "absent"
    return out


def write_manifest(run: RunConfig, outputs: List[Path]) -> Path:
    """Манифест: команда, опции, хеш конфигурации, зерно, входы и выходы с хешами, версии."""
    payload = {
        "command": run.command,
        "seed": run.seed,
        "jobs": run.jobs,
        "options": run.options,
        "config_hash": run.config_hash(),
        # входы по имени файла: манифест не зависит от каталога запуска
        "inputs": {Path(p).name: file_digest(p) for p in run.inputs if Path(p).is_file()},
        "outputs": {Path(p).name: file_digest(p) for p in sorted(outputs)},
        "versions": package_versions(),
    }
    path = write_json(Path(run.out_dir) / MANIFEST_NAME, payload)
    logger.info(f"[Artifacts] manifest written to {path}")
    return path
