"""Statistic traces, bit-width schedules, and offline policy replay.

JSONL trace schema, one object per measured step::

    {"t": 12, "layers": [{"id": 0, "name": "fc0.weight", "n_params": 1024,
                          "n": 0.01, "r": 0.8, "v": 1e-4, "bits": 8}, ...]}

``bits`` is optional. Unknown keys are ignored and counted.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .policy import BitPolicy, PolicyConfig, average_bits, compute_policy
from .quant import BitWidth
from .stats import GlobalEma, LayerStats, update_ema

log = logging.getLogger(__name__)

SCHEDULE_HEADER = ("step", "layer_id", "layer_name", "score", "bits")
_LAYER_KEYS = {"id", "name", "n_params", "n", "r", "v", "bits"}
_RECORD_KEYS = {"t", "layers"}


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class LayerEntry:
    id: int
    name: str
    n_params: int
    n: float
    r: float
    v: float
    bits: int | None = None

    def stats(self) -> LayerStats:
        return LayerStats(self.id, self.n, self.r, self.v)


@dataclass(frozen=True)
class TraceRecord:
    t: int
    layers: tuple[LayerEntry, ...]

    def to_json(self) -> dict:
        layers = []
        for e in self.layers:
            d = {"id": e.id, "name": e.name, "n_params": e.n_params, "n": e.n, "r": e.r, "v": e.v}
            if e.bits is not None:
                d["bits"] = e.bits
            layers.append(d)
        return {"t": self.t, "layers": layers}


def make_trace_record(
    t: int,
    stats: Sequence[LayerStats],
    names: Sequence[str],
    sizes: Sequence[int],
    policy: BitPolicy | None = None,
) -> TraceRecord:
    bits = policy.bits if policy is not None else {}
    entries = tuple(
        LayerEntry(s.layer_id, names[s.layer_id], int(sizes[s.layer_id]), s.n, s.r, s.v,
                   int(bits[s.layer_id]) if s.layer_id in bits else None)
        for s in sorted(stats, key=lambda s: s.layer_id)
    )
    return TraceRecord(t, entries)


def write_jsonl(records: Iterable[TraceRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _real(d: dict, key: str, line: int) -> float:
    x = d.get(key)
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise TraceFormatError(f"field {key!r} must be a number", line)
    x = float(x)
    if not math.isfinite(x) or x < 0:
        raise TraceFormatError(f"field {key!r} must be finite and >= 0, got {x}", line)
    return x


def _parse_layer(d, line: int) -> tuple[LayerEntry, int]:
    if not isinstance(d, dict):
        raise TraceFormatError("layer entry must be an object", line)
    missing = {"id", "name", "n_params", "n", "r", "v"} - d.keys()
    if missing:
        raise TraceFormatError(f"layer entry missing {sorted(missing)}", line)
    if not _is_int(d["id"]) or not _is_int(d["n_params"]) or d["n_params"] < 0:
        raise TraceFormatError("'id' and 'n_params' must be nonnegative integers", line)
    if not isinstance(d["name"], str):
        raise TraceFormatError("'name' must be a string", line)
    bits = d.get("bits")
    if bits is not None:
        if not _is_int(bits) or bits not in tuple(BitWidth):
            raise TraceFormatError(f"'bits' must be one of 4, 8, 16, 32, got {bits!r}", line)
    entry = LayerEntry(d["id"], d["name"], d["n_params"], _real(d, "n", line), _real(d, "r", line),
                       _real(d, "v", line), bits)
    return entry, len(d.keys() - _LAYER_KEYS)


def load_jsonl(path) -> tuple[list[TraceRecord], int]:
    """Parse a trace; returns ``(records, unknown_field_count)``."""
    records: list[TraceRecord] = []
    unknown = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise TraceFormatError("record must be an object", lineno)
            if not _is_int(obj.get("t")) or obj["t"] < 0:
                raise TraceFormatError("'t' must be a nonnegative integer", lineno)
            if not isinstance(obj.get("layers"), list):
                raise TraceFormatError("'layers' must be a list", lineno)
            unknown += len(obj.keys() - _RECORD_KEYS)
            entries = []
            for d in obj["layers"]:
                e, k = _parse_layer(d, lineno)
                entries.append(e)
                unknown += k
            ids = [e.id for e in entries]
            if ids != sorted(set(ids)):
                raise TraceFormatError("layer entries must be sorted by unique id", lineno)
            if records and obj["t"] <= records[-1].t:
                raise TraceFormatError(f"'t' must increase strictly ({obj['t']} after {records[-1].t})", lineno)
            records.append(TraceRecord(obj["t"], tuple(entries)))
    return records, unknown


def read_jsonl(path) -> list[TraceRecord]:
    records, unknown = load_jsonl(path)
    if unknown:
        log.warning("%s: ignored %d unknown field(s)", path, unknown)
    return records


def write_csv_schedule(history: Iterable[BitPolicy], path, names: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCHEDULE_HEADER)
        for pol in sorted(history, key=lambda p: p.step):
            for rec in sorted(pol.records, key=lambda r: r.layer_id):
                name = names[rec.layer_id] if names else f"layer{rec.layer_id}"
                w.writerow([pol.step, rec.layer_id, name, repr(rec.score), int(rec.bits)])


def read_csv_schedule(path) -> list[tuple[int, int, str, float, int]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCHEDULE_HEADER:
        raise TraceFormatError("missing schedule header", 1)
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise TraceFormatError(f"expected 5 columns, got {len(row)}", i)
        out.append((int(row[0]), int(row[1]), row[2], float(row[3]), int(row[4])))
    return out


@dataclass(frozen=True)
class ReplayResult:
    history: tuple[BitPolicy, ...]
    average_bits: tuple[float, ...]

    @property
    def mean_average_bits(self) -> float:
        return sum(self.average_bits) / len(self.average_bits) if self.average_bits else 0.0

    def summary(self) -> dict:
        avg = self.mean_average_bits
        return {
            "average_bits": avg,
            "saved_vs_32bit_pct": 100 * (1 - avg / 32),
            "saved_vs_8bit_pct": 100 * (1 - avg / 8),
            "replayed_steps": len(self.history),
        }


def replay(records: Sequence[TraceRecord], config: PolicyConfig = PolicyConfig()) -> ReplayResult:
    """Run the EMA -> anneal -> score -> map pipeline over recorded stats.

    Records at steps that are not refresh steps under ``config`` are
    skipped, so a trace captured during training replays to the same
    policy history it was recorded with.
    """
    if not records:
        raise ValueError("trace is empty")
    for a, b in zip(records, records[1:]):
        if b.t <= a.t:
            raise ValueError(f"trace steps must increase strictly ({b.t} after {a.t})")
    ema = GlobalEma(alpha=config.alpha)
    history = []
    avgs = []
    for rec in records:
        if not config.is_refresh_step(rec.t):
            continue
        stats = [e.stats() for e in rec.layers]
        ema = update_ema(ema, stats)
        pol = compute_policy(stats, ema, rec.t, config)
        history.append(pol)
        avgs.append(average_bits(pol.bits, {e.id: e.n_params for e in rec.layers}))
    return ReplayResult(tuple(history), tuple(avgs))
