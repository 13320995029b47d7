"""Byte-stable line trace: ``t=<ms> ev=<name> k=v ...`` with sorted keys."""

from __future__ import annotations

import hashlib
import math
from typing import IO, Any, Mapping


def fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v).replace(" ", "_")


def format_line(t_ms: int, event: str, fields: Mapping[str, Any]) -> str:
    parts = [f"t={t_ms}", f"ev={event}"]
    parts.extend(f"{k}={fmt_value(fields[k])}" for k in sorted(fields))
    return " ".join(parts)


class Trace:
    """Hashes every line; optionally writes to a stream and/or keeps lines in memory."""

    def __init__(self, sink: IO[str] | None = None, keep: bool = False):
        self.sink = sink
        self.lines: list[str] | None = [] if keep else None
        self.count = 0
        self._hash = hashlib.sha256()

    def emit(self, t_ms: int, event: str, fields: Mapping[str, Any]) -> None:
        line = format_line(t_ms, event, fields)
        self._hash.update(line.encode())
        self._hash.update(b"\n")
        self.count += 1
        if self.sink is not None:
            self.sink.write(line + "\n")
        if self.lines is not None:
            self.lines.append(line)

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()
