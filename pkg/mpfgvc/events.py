"""Run telemetry: an event hub fanning dict events out to sinks.

Training code calls ``hub.emit(event="step", stage="1", ...)``; sinks decide
where it goes. A failing sink never interrupts a run.
"""

from __future__ import annotations

import csv
import datetime
import json
import logging
import os
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

_LOGGER = logging.getLogger(__name__)

LOSS_COLUMNS = ["stage", "step", "epoch", "lr", "L_v", "L_i2t", "L_vlfm", "L_stage"]


def now_iso() -> str:
    return datetime.datetime.now().isoformat(timespec="milliseconds")


class EventSink:
    def handle(self, event: dict) -> None:
        raise NotImplementedError


class EventHub:
    def __init__(self, sinks: Iterable[EventSink] | None = None):
        self.sinks: List[EventSink] = list(sinks or [])

    def add(self, sink: EventSink) -> None:
        self.sinks.append(sink)

    def emit(self, **event) -> None:
        if not self.sinks:
            return
        payload = dict(event)
        payload.setdefault("ts", now_iso())
        for sink in list(self.sinks):
            try:
                sink.handle(dict(payload))
            except Exception:
                _LOGGER.debug("event sink %r failed", sink, exc_info=True)


class JsonlSink(EventSink):
    """Append events as JSON lines.

    ``path`` of None, "" or "-" prints to the console; "none" disables.
    """

    def __init__(self, path: Optional[str]):
        self.path = path
        self._lock = threading.Lock()
        if path is None or path == "" or path == "-":
            self._mode = "console"
        elif isinstance(path, str) and path.lower() == "none":
            self._mode = "disabled"
        else:
            self._mode = "file"
            try:
                d = os.path.dirname(self.path) or "."
                os.makedirs(d, exist_ok=True)
                with open(self.path, "a", encoding="utf-8"):
                    pass
            except OSError:
                _LOGGER.warning("cannot open %s, logging events to console", path)
                self._mode = "console"

    def enabled(self) -> bool:
        return self._mode != "disabled"

    def handle(self, event: dict) -> None:
        if not self.enabled():
            return
        line = json.dumps(event, ensure_ascii=False, default=_jsonable)
        with self._lock:
            if self._mode == "console":
                print(line, flush=True)
                return
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


class LossCsvSink(EventSink):
    """Write ``step`` events as rows of the loss CSV (one header line)."""

    def __init__(self, path: os.PathLike | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(LOSS_COLUMNS)
        self._lock = threading.Lock()

    def handle(self, event: dict) -> None:
        if event.get("event") != "step":
            return
        row = ["" if event.get(c) is None else event.get(c) for c in LOSS_COLUMNS]
        with self._lock:
            with open(self.path, "a", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(row)


class MemorySink(EventSink):
    """Keeps events in a list; used by the harness to collect curves."""

    def __init__(self) -> None:
        self.events: List[dict] = []

    def handle(self, event: dict) -> None:
        self.events.append(event)

    def of(self, kind: str) -> List[dict]:
        return [e for e in self.events if e.get("event") == kind]


class RunManifest:
    """``manifest.json`` listing every file a run directory holds."""

    def __init__(self, out_dir: os.PathLike | str):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        self.entries: Dict[str, Dict[str, Any]] = {}
        if self.path.exists():
            try:
                data = json.loads(self.path.read_text(encoding="utf-8"))
                self.entries = {e["path"]: e for e in data.get("files", [])}
            except (json.JSONDecodeError, KeyError, TypeError):
                _LOGGER.warning("ignoring unreadable manifest %s", self.path)

    def add(self, path: os.PathLike | str, command: str, kind: str = "") -> None:
        path = Path(path)
        try:
            rel = str(path.resolve().relative_to(self.out_dir.resolve()))
        except ValueError:
            rel = str(path)
        self.entries[rel] = {"path": rel, "command": command, "kind": kind}

    def save(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        files = [self.entries[k] for k in sorted(self.entries)]
        payload = {"updated": now_iso(), "files": files}
        self.path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return self.path


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)
