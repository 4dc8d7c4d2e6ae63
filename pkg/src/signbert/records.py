"""
Run artifacts: line-delimited metric logs, atomic JSON writes, lock files
"""

import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Union

from .errors import RunLockError

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"


def _json_default(value: Any) -> Any:
    # numpy / torch scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json_atomic(path: Union[str, Path], data: Any) -> None:
    """Write to a temporary sibling, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, default=_json_default))
    os.replace(tmp, path)


class MetricLog:
    """Append-only JSON-lines log, one record per epoch or evaluation"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Dict[str, Any]) -> None:
        record = {"time": datetime.now(timezone.utc).isoformat(), **record}
        with open(self.path, "a") as f:
            f.write(json.dumps(record, default=_json_default) + "\n")
            f.flush()

    def read(self) -> List[Dict[str, Any]]:
        return read_metric_log(self.path)


def read_metric_log(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    records = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                logger.warning(f"Skipping unreadable line {number} in {path}: {e}")
    return records


class RunLock:
    """
    One writer per artifact directory.

    The lock file is created with O_EXCL; a second writer fails with
    RunLockError instead of interleaving artifacts.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.path = self.directory / LOCK_NAME
        self._held = False

    def acquire(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = self.path.read_text().strip() if self.path.exists() else "unknown"
            raise RunLockError(f"{self.directory} is locked by another run (pid {owner}); "
                               f"remove {self.path} if that run is gone")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True
        logger.debug(f"Acquired {self.path}")

    def release(self) -> None:
        if self._held:
            try:
                self.path.unlink()
            except FileNotFoundError:
                logger.warning(f"Lock file {self.path} vanished before release")
            self._held = False

    def __enter__(self) -> 'RunLock':
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()
