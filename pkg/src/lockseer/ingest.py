"""Lock-trace ingestion: canonical `.lockevents` files and raw db2trc-style lines.

Canonical format: UTF-8, one JSON object per line with keys
``lock_id, start_ns, end_ns, mode, obj, schema, table, page`` (``page`` only
on PAGE events).

Raw reference grammar (one record per line, anything else is ignored)::

    <ts_ns> sqlplrq  lock_id=<id> mode=<MODE> obj=<OBJ> schema=<S> [table=<T>] [page=<N>]
    <ts_ns> sqlplrl  lock_id=<id>
    <ts_ns> sqlplrem lock_id=<id>

``sqlplrq`` opens a lock, ``sqlplrl``/``sqlplrem`` close it. Leading text
before the timestamp (e.g. a trace record number followed by ``|``) is
tolerated.
"""

from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional


class LockMode(str, enum.Enum):
    S = "S"
    X = "X"
    IX = "IX"
    IS = "IS"
    U = "U"
    SIX = "SIX"
    NS = "NS"


class LockObjectType(str, enum.Enum):
    PAGE = "PAGE"
    TABLE = "TABLE"
    CATALOG = "CATALOG"
    VARIATION = "VARIATION"
    PLAN = "PLAN"
    SEQUENCE = "SEQUENCE"
    INTERNAL = "INTERNAL"
    TABLESPACE = "TABLESPACE"


DEFAULT_KEEP_OBJS = frozenset({LockObjectType.TABLE, LockObjectType.PAGE})
DEFAULT_EXCLUDED_SCHEMAS = frozenset({"SYSIBM"})

_CANONICAL_KEYS = ("lock_id", "start_ns", "end_ns", "mode", "obj", "schema", "table", "page")


class ParseError(ValueError):
    """A malformed trace record. Carries the line number and offending field."""

    def __init__(self, message: str, *, line_no: Optional[int] = None, field: Optional[str] = None):
        self.message = message
        self.line_no = line_no
        self.field = field
        where = []
        if line_no is not None:
            where.append(f"line {line_no}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class LockEvent:
    lock_id: str
    start_ns: int
    end_ns: int
    mode: LockMode
    obj: LockObjectType
    schema: str
    table: str = ""
    page: Optional[int] = None

    def __post_init__(self):
        if self.start_ns < 0:
            raise ParseError("negative timestamp", field="start_ns")
        if self.end_ns < self.start_ns:
            raise ParseError("end before start", field="end_ns")
        if self.obj is LockObjectType.PAGE:
            if self.page is None:
                raise ParseError("PAGE lock without page", field="page")
            if not self.table:
                raise ParseError("PAGE lock without table", field="table")
        elif self.page is not None:
            raise ParseError(f"page given on {self.obj.value} lock", field="page")
        if self.obj is LockObjectType.TABLE and not self.table:
            raise ParseError("TABLE lock without table", field="table")
        if self.page is not None and self.page < 0:
            raise ParseError("negative page", field="page")


def _parse_mode(value, line_no=None) -> LockMode:
    try:
        return LockMode(value)
    except ValueError:
        raise ParseError(f"unknown lock mode {value!r}", line_no=line_no, field="mode") from None


def _parse_obj(value, line_no=None) -> LockObjectType:
    try:
        return LockObjectType(value)
    except ValueError:
        raise ParseError(f"unknown lock object type {value!r}", line_no=line_no, field="obj") from None


def _parse_uint(value, name, line_no=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, str) and value.isdigit():
            return int(value)
        raise ParseError(f"expected unsigned integer, got {value!r}", line_no=line_no, field=name)
    if value < 0:
        raise ParseError(f"expected unsigned integer, got {value!r}", line_no=line_no, field=name)
    return value


def _build_event(
    lock_id, start_ns, end_ns, mode, obj, schema, table, page, line_no=None
) -> LockEvent:
    try:
        return LockEvent(
            lock_id=lock_id,
            start_ns=start_ns,
            end_ns=end_ns,
            mode=mode,
            obj=obj,
            schema=schema,
            table=table,
            page=page,
        )
    except ParseError as exc:
        raise ParseError(exc.message, line_no=line_no, field=exc.field) from None


def parse_canonical_line(line: str, line_no: Optional[int] = None) -> LockEvent:
    """Parse one canonical `.lockevents` record."""
    text = line.strip()
    if not text:
        raise ParseError("empty record", line_no=line_no)
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line_no=line_no) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", line_no=line_no)

    unknown = set(rec) - set(_CANONICAL_KEYS)
    if unknown:
        raise ParseError(f"unexpected key(s) {sorted(unknown)}", line_no=line_no, field=sorted(unknown)[0])
    for key in _CANONICAL_KEYS[:-1]:
        if key not in rec:
            raise ParseError("missing field", line_no=line_no, field=key)

    lock_id = rec["lock_id"]
    if not isinstance(lock_id, str) or not lock_id:
        raise ParseError("lock_id must be a non-empty string", line_no=line_no, field="lock_id")
    for key in ("schema", "table"):
        if not isinstance(rec[key], str):
            raise ParseError("expected string", line_no=line_no, field=key)
    page = rec.get("page")
    if page is not None:
        page = _parse_uint(page, "page", line_no)
    return _build_event(
        lock_id,
        _parse_uint(rec["start_ns"], "start_ns", line_no),
        _parse_uint(rec["end_ns"], "end_ns", line_no),
        _parse_mode(rec["mode"], line_no),
        _parse_obj(rec["obj"], line_no),
        rec["schema"],
        rec["table"],
        page,
        line_no,
    )


def serialize_event(event: LockEvent) -> str:
    rec = {
        "lock_id": event.lock_id,
        "start_ns": event.start_ns,
        "end_ns": event.end_ns,
        "mode": event.mode.value,
        "obj": event.obj.value,
        "schema": event.schema,
        "table": event.table,
    }
    if event.page is not None:
        rec["page"] = event.page
    return json.dumps(rec, separators=(",", ":"))


def write_lockevents(events: Iterable[LockEvent], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(serialize_event(ev))
            fh.write("\n")
            n += 1
    return n


@dataclass
class ParseSummary:
    parsed: int = 0
    skipped: int = 0
    unmatched_request: int = 0
    orphan_release: int = 0
    errors: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "parsed": self.parsed,
            "skipped": self.skipped,
            "unmatched_request": self.unmatched_request,
            "orphan_release": self.orphan_release,
        }

    def format(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items())


def read_lockevents(lines: Iterable[str], *, strict: bool = True) -> tuple[list[LockEvent], ParseSummary]:
    """Parse canonical lines. Blank lines are ignored; with ``strict=False``
    malformed records are counted in the summary instead of raising."""
    events = []
    summary = ParseSummary()
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(parse_canonical_line(line, no))
            summary.parsed += 1
        except ParseError as exc:
            if strict:
                raise
            summary.skipped += 1
            summary.errors.append(exc)
    return events, summary


def load_lockevents(path, *, strict: bool = True) -> tuple[list[LockEvent], ParseSummary]:
    with open(path, encoding="utf-8") as fh:
        return read_lockevents(fh, strict=strict)


# ---------------------------------------------------------------------------
# raw trace adapter
# ---------------------------------------------------------------------------

_RAW_RE = re.compile(r"(?:^|[\s|])(?P<ts>\d+)\s+(?P<func>sqlplrq|sqlplrl|sqlplrem)\b(?P<rest>.*)$")
_KV_RE = re.compile(r"(\w+)=(\S*)")


@dataclass(frozen=True)
class RequestFragment:
    lock_id: str
    ts_ns: int
    mode: LockMode
    obj: LockObjectType
    schema: str
    table: str
    page: Optional[int]


@dataclass(frozen=True)
class ReleaseFragment:
    lock_id: str
    ts_ns: int
    func: str


def parse_raw_db2_line(line: str, line_no: Optional[int] = None):
    """Return a request/release fragment, or ``None`` for lines that are not
    lock records. Lock records with bad fields raise :class:`ParseError`."""
    m = _RAW_RE.search(line.rstrip("\n"))
    if m is None:
        return None
    ts = int(m.group("ts"))
    func = m.group("func")
    kv = dict(_KV_RE.findall(m.group("rest")))
    lock_id = kv.get("lock_id")
    if not lock_id:
        raise ParseError("missing lock_id", line_no=line_no, field="lock_id")
    if func != "sqlplrq":
        return ReleaseFragment(lock_id, ts, func)
    for key in ("mode", "obj", "schema"):
        if key not in kv:
            raise ParseError("missing field", line_no=line_no, field=key)
    page = kv.get("page")
    if page is not None:
        page = _parse_uint(page, "page", line_no)
    return RequestFragment(
        lock_id=lock_id,
        ts_ns=ts,
        mode=_parse_mode(kv["mode"], line_no),
        obj=_parse_obj(kv["obj"], line_no),
        schema=kv["schema"],
        table=kv.get("table", ""),
        page=page,
    )


def format_raw_request(ev: LockEvent) -> str:
    parts = [
        f"{ev.start_ns} sqlplrq lock_id={ev.lock_id}",
        f"mode={ev.mode.value} obj={ev.obj.value} schema={ev.schema}",
    ]
    if ev.table:
        parts.append(f"table={ev.table}")
    if ev.page is not None:
        parts.append(f"page={ev.page}")
    return " ".join(parts)


def format_raw_release(ev: LockEvent, func: str = "sqlplrl") -> str:
    return f"{ev.end_ns} {func} lock_id={ev.lock_id}"


def pair_fragments(fragments: Iterable, summary: Optional[ParseSummary] = None) -> tuple[list[LockEvent], ParseSummary]:
    """Join request and release fragments by lock_id.

    Requests still open at end of stream are closed at the last observed
    timestamp. Orphan releases and duplicate open requests are counted and
    skipped.
    """
    summary = summary if summary is not None else ParseSummary()
    open_requests: dict[str, RequestFragment] = {}
    events: list[LockEvent] = []
    last_ts = 0

    def close(req: RequestFragment, end_ns: int):
        events.append(
            LockEvent(req.lock_id, req.ts_ns, end_ns, req.mode, req.obj, req.schema, req.table, req.page)
        )
        summary.parsed += 1

    for frag in fragments:
        last_ts = max(last_ts, frag.ts_ns)
        if isinstance(frag, RequestFragment):
            if frag.lock_id in open_requests:
                summary.skipped += 1
                continue
            open_requests[frag.lock_id] = frag
        else:
            req = open_requests.pop(frag.lock_id, None)
            if req is None or frag.ts_ns < req.ts_ns:
                summary.orphan_release += 1
                continue
            close(req, frag.ts_ns)
    for req in open_requests.values():
        summary.unmatched_request += 1
        close(req, max(last_ts, req.ts_ns))
    return events, summary


def read_raw_trace(lines: Iterable[str]) -> tuple[list[LockEvent], ParseSummary]:
    summary = ParseSummary()
    fragments = []
    for no, line in enumerate(lines, start=1):
        try:
            frag = parse_raw_db2_line(line, no)
        except (ParseError, ValueError) as exc:
            summary.skipped += 1
            summary.errors.append(exc)
            continue
        if frag is not None:
            fragments.append(frag)
    return pair_fragments(fragments, summary)


# ---------------------------------------------------------------------------
# stream transforms
# ---------------------------------------------------------------------------

def filter_events(
    events: Iterable[LockEvent],
    keep_objs=DEFAULT_KEEP_OBJS,
    excluded_schemas=DEFAULT_EXCLUDED_SCHEMAS,
) -> Iterator[LockEvent]:
    keep = frozenset(LockObjectType(o) for o in keep_objs)
    excluded = frozenset(excluded_schemas)
    return (ev for ev in events if ev.obj in keep and ev.schema not in excluded)


def sort_chronological(events: Iterable[LockEvent]) -> list[LockEvent]:
    return sorted(events, key=lambda ev: (ev.start_ns, ev.end_ns, ev.lock_id))


@dataclass
class DistributionReport:
    counts: dict
    percentages: dict
    total: int
    empty: bool = False

    def rows(self):
        for obj in LockObjectType:
            yield obj.value, self.counts[obj], self.percentages[obj]

    def format(self) -> str:
        lines = [f"{'Lock Type':<12}{'Record Count':>14}{'Percentage (%)':>16}"]
        for name, count, pct in self.rows():
            lines.append(f"{name:<12}{count:>14,}{pct:>16.2f}")
        lines.append(f"{'Total':<12}{self.total:>14,}{(100.0 if self.total else 0.0):>16.2f}")
        if self.empty:
            lines.append("(empty stream)")
        return "\n".join(lines)


def lock_type_distribution(events: Iterable[LockEvent]) -> DistributionReport:
    counter = Counter(ev.obj for ev in events)
    return distribution_from_counts(counter)


def distribution_from_counts(counts) -> DistributionReport:
    counts = {obj: int(counts.get(obj, 0)) for obj in LockObjectType}
    total = sum(counts.values())
    if total == 0:
        return DistributionReport(counts, {obj: 0.0 for obj in LockObjectType}, 0, empty=True)
    pct = {obj: 100.0 * c / total for obj, c in counts.items()}
    return DistributionReport(counts, pct, total)
