"""Deterministic TPC-C-flavoured lock-event generator.

Each client runs transactions back to back. A transaction acquires the locks
of its template at exponentially spaced instants (``lock_step_ns``); the
client then idles for an exponential think time (``mean_gap_ns``). Events of
all clients are merged by start time.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional

import numpy as np

from .ingest import (
    LockEvent,
    LockMode,
    LockObjectType,
    format_raw_release,
    format_raw_request,
    serialize_event,
    sort_chronological,
)

TABLES = ("CUSTOMER", "DISTRICT", "HISTORY", "NEWORDER", "ORDERLINE", "ORDERS", "STOCK", "WAREHOUSE")
KINDS = ("NewOrder", "Payment", "OrderStatus", "Delivery", "StockLevel")

DEFAULT_MIX = {"NewOrder": 0.45, "Payment": 0.43, "OrderStatus": 0.04, "Delivery": 0.04, "StockLevel": 0.04}
DEFAULT_PAGE_SPACE = {
    "WAREHOUSE": 1,
    "DISTRICT": 32,
    "CUSTOMER": 4096,
    "HISTORY": 2048,
    "NEWORDER": 1024,
    "ORDERS": 4096,
    "ORDERLINE": 16384,
    "STOCK": 8192,
}
DEFAULT_SKEW = {
    "WAREHOUSE": 0.0,
    "DISTRICT": 0.6,
    "CUSTOMER": 1.0,
    "HISTORY": 0.5,
    "NEWORDER": 0.8,
    "ORDERS": 1.0,
    "ORDERLINE": 1.1,
    "STOCK": 1.2,
}

DISTRICTS_PER_WAREHOUSE = 10
STOCK_LEVEL_ORDERS = 20
HOLD_MEDIAN_NS = 50_000
HOLD_SIGMA = 0.5

T, P = LockObjectType.TABLE, LockObjectType.PAGE
M = LockMode

# page rules: "draw" samples a fresh page, "same" reuses the last page drawn
# for that table in the current transaction
DRAW, SAME = "draw", "same"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TemplateEntry:
    table: str
    obj: LockObjectType
    mode: LockMode
    page_rule: Optional[str] = None


@dataclass(frozen=True)
class TransactionTemplate:
    kind: str
    entries: tuple


@dataclass
class WorkloadConfig:
    warehouses: int = 100
    clients: int = 10
    transactions: int = 1000
    seed: int = 0
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    page_space: dict = field(default_factory=lambda: dict(DEFAULT_PAGE_SPACE))
    skew: dict = field(default_factory=lambda: dict(DEFAULT_SKEW))
    mean_gap_ns: float = 2_000_000.0
    lock_step_ns: float = 1_000.0
    min_items: int = 5
    max_items: int = 15

    def validate(self) -> "WorkloadConfig":
        if self.warehouses < 1 or self.clients < 1:
            raise ConfigError("warehouses and clients must be positive")
        if self.transactions < 1:
            raise ConfigError("empty workload: transactions must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if set(self.mix) != set(KINDS):
            raise ConfigError(f"mix must name exactly {KINDS}")
        if any(p < 0 for p in self.mix.values()) or abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError("mix probabilities must be non-negative and sum to 1")
        for table in TABLES:
            if self.page_space.get(table, 0) < 1:
                raise ConfigError(f"page_space[{table}] must be >= 1")
            if self.skew.get(table, -1) < 0:
                raise ConfigError(f"skew[{table}] must be >= 0")
        if self.page_space["WAREHOUSE"] != 1:
            raise ConfigError("WAREHOUSE must have exactly one page")
        if self.mean_gap_ns <= 0 or self.lock_step_ns <= 0:
            raise ConfigError("mean_gap_ns and lock_step_ns must be positive")
        if not 1 <= self.min_items <= self.max_items:
            raise ConfigError("need 1 <= min_items <= max_items")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown workload keys {sorted(unknown)}")
        cfg = cls()
        for key in ("mix", "page_space", "skew"):
            if key in data:
                merged = dict(getattr(cfg, key))
                merged.update({str(k): v for k, v in data.pop(key).items()})
                setattr(cfg, key, merged)
        for key, value in data.items():
            setattr(cfg, key, value)
        return cfg

    def fingerprint(self) -> str:
        text = repr(sorted(_flatten(self.to_dict())))
        return hashlib.sha256(text.encode()).hexdigest()


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def transaction_lock_template(kind: str, items: int = 10) -> TransactionTemplate:
    """Fixed lock order of one transaction; ``items`` is the repeated line count."""
    if kind == "NewOrder":
        head = [
            TemplateEntry("WAREHOUSE", T, M.IS),
            TemplateEntry("WAREHOUSE", P, M.S, DRAW),
            TemplateEntry("DISTRICT", T, M.IX),
            TemplateEntry("DISTRICT", P, M.U, DRAW),
            TemplateEntry("DISTRICT", P, M.X, SAME),
            TemplateEntry("CUSTOMER", T, M.IS),
            TemplateEntry("CUSTOMER", P, M.S, DRAW),
            TemplateEntry("ORDERS", T, M.IX),
            TemplateEntry("ORDERS", P, M.X, DRAW),
            TemplateEntry("NEWORDER", T, M.IX),
            TemplateEntry("NEWORDER", P, M.X, DRAW),
            # intent locks covering the per-item page locks below
            TemplateEntry("STOCK", T, M.IX),
            TemplateEntry("ORDERLINE", T, M.IX),
        ]
        body = [
            TemplateEntry("STOCK", P, M.U, DRAW),
            TemplateEntry("STOCK", P, M.X, SAME),
            TemplateEntry("ORDERLINE", P, M.X, DRAW),
        ] * items
    elif kind == "Payment":
        head = [
            TemplateEntry("WAREHOUSE", T, M.IX),
            TemplateEntry("WAREHOUSE", P, M.X, DRAW),
            TemplateEntry("DISTRICT", T, M.IX),
            TemplateEntry("DISTRICT", P, M.X, DRAW),
            TemplateEntry("CUSTOMER", T, M.IX),
            TemplateEntry("CUSTOMER", P, M.U, DRAW),
            TemplateEntry("CUSTOMER", P, M.X, SAME),
            TemplateEntry("HISTORY", T, M.IX),
            TemplateEntry("HISTORY", P, M.X, DRAW),
        ]
        body = []
    elif kind == "OrderStatus":
        head = [
            TemplateEntry("CUSTOMER", T, M.IS),
            TemplateEntry("CUSTOMER", P, M.S, DRAW),
            TemplateEntry("ORDERS", T, M.IS),
            TemplateEntry("ORDERS", P, M.S, DRAW),
            TemplateEntry("ORDERLINE", T, M.IS),
        ]
        body = [TemplateEntry("ORDERLINE", P, M.S, DRAW)] * items
    elif kind == "Delivery":
        # one pending order delivered in each district of the warehouse
        head = [
            TemplateEntry("NEWORDER", T, M.IX),
            TemplateEntry("ORDERS", T, M.IX),
            TemplateEntry("ORDERLINE", T, M.IX),
            TemplateEntry("CUSTOMER", T, M.IX),
        ]
        body = ([
            TemplateEntry("NEWORDER", P, M.X, DRAW),
            TemplateEntry("ORDERS", P, M.X, DRAW),
        ] + [TemplateEntry("ORDERLINE", P, M.X, DRAW)] * items + [
            TemplateEntry("CUSTOMER", P, M.X, DRAW),
        ]) * DISTRICTS_PER_WAREHOUSE
    elif kind == "StockLevel":
        # scans the lines of the most recent orders, then probes their stock rows
        head = [
            TemplateEntry("DISTRICT", T, M.IS),
            TemplateEntry("DISTRICT", P, M.S, DRAW),
            TemplateEntry("ORDERLINE", T, M.IS),
        ]
        body = [TemplateEntry("ORDERLINE", P, M.S, DRAW)] * (items * STOCK_LEVEL_ORDERS)
        body += [TemplateEntry("STOCK", T, M.IS)] + [TemplateEntry("STOCK", P, M.S, DRAW)] * items
    else:
        raise ConfigError(f"unknown transaction kind {kind!r}")
    return TransactionTemplate(kind, tuple(head + body))


class PageSampler:
    """Zipf-over-ranks page sampler; rank r (1-based) maps to page id r-1."""

    def __init__(self, page_space: dict, skew: dict):
        self._cdf = {}
        for table in page_space:
            n = int(page_space[table])
            weights = np.arange(1, n + 1, dtype=np.float64) ** -float(skew.get(table, 0.0))
            cdf = np.cumsum(weights)
            self._cdf[table] = cdf / cdf[-1]

    def sample(self, table: str, rng: np.random.Generator, size=None):
        cdf = self._cdf[table]
        if len(cdf) == 1:
            return 0 if size is None else np.zeros(size, dtype=np.int64)
        u = rng.random(size)
        idx = np.searchsorted(cdf, u, side="right")
        idx = np.minimum(idx, len(cdf) - 1)
        return int(idx) if size is None else idx.astype(np.int64)


def sample_page_id(table: str, config: WorkloadConfig, rng: np.random.Generator, size=None):
    return PageSampler({table: config.page_space[table]}, config.skew).sample(table, rng, size)


def generate_workload(config: WorkloadConfig) -> list[LockEvent]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    sampler = PageSampler(config.page_space, config.skew)
    kinds = list(KINDS)
    probs = np.array([config.mix[k] for k in kinds])
    cum = np.cumsum(probs)
    cum /= cum[-1]
    mu = math.log(HOLD_MEDIAN_NS)

    # clients start staggered within one think time
    clients = [(float(rng.exponential(config.mean_gap_ns)), c) for c in range(config.clients)]
    heapq.heapify(clients)
    events = []
    for txn in range(config.transactions):
        now, client = heapq.heappop(clients)
        kind = kinds[int(np.searchsorted(cum, rng.random(), side="right").clip(0, len(kinds) - 1))]
        items = int(rng.integers(config.min_items, config.max_items + 1))
        template = transaction_lock_template(kind, items)
        rng.integers(1, config.warehouses + 1)  # home warehouse; keeps draws aligned with config
        steps = rng.exponential(config.lock_step_ns, size=len(template.entries))
        holds = rng.lognormal(mu, HOLD_SIGMA, size=len(template.entries))
        last_page = {}
        t = now
        for k, entry in enumerate(template.entries):
            t += steps[k]
            page = None
            if entry.obj is LockObjectType.PAGE:
                if entry.page_rule == SAME and entry.table in last_page:
                    page = last_page[entry.table]
                else:
                    page = sampler.sample(entry.table, rng)
                last_page[entry.table] = page
            start = int(t)
            events.append(
                LockEvent(
                    lock_id=f"T{txn:08d}.{k:03d}",
                    start_ns=start,
                    end_ns=start + int(holds[k]),
                    mode=entry.mode,
                    obj=entry.obj,
                    schema="TPCC",
                    table=entry.table,
                    page=page,
                )
            )
        heapq.heappush(clients, (t + float(rng.exponential(config.mean_gap_ns)), client))
    return sort_chronological(events)


def generate_cyclic_workload(n_events: int, period: int = 8, seed: int = 0, step_ns: int = 1_000) -> list[LockEvent]:
    """TABLE locks visiting the first ``period`` tables in a fixed cycle."""
    if n_events < 1:
        raise ConfigError("empty workload: n_events must be positive")
    if not 2 <= period <= len(TABLES):
        raise ConfigError(f"period must be in [2, {len(TABLES)}]")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(period))
    holds = rng.integers(step_ns // 2, step_ns, size=n_events)
    return [
        LockEvent(
            lock_id=f"C{i:08d}",
            start_ns=i * step_ns,
            end_ns=i * step_ns + int(holds[i]),
            mode=LockMode.IX,
            obj=LockObjectType.TABLE,
            schema="TPCC",
            table=TABLES[(i + offset) % period],
        )
        for i in range(n_events)
    ]


def serialize_workload(events: Iterable[LockEvent]) -> bytes:
    return "".join(serialize_event(ev) + "\n" for ev in events).encode("utf-8")


def emit_raw_trace(events: Iterable[LockEvent]) -> list[str]:
    """Render events as raw request/release records ordered by timestamp."""
    records = []
    for ev in events:
        records.append((ev.start_ns, 0, ev.lock_id, format_raw_request(ev)))
        records.append((ev.end_ns, 1, ev.lock_id, format_raw_release(ev)))
    records.sort()
    return [r[3] for r in records]
