"""Tokenisation, page-id binning, chronological splits and windowed datasets."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ingest import LockEvent, LockObjectType

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
WINDOW = 25
MAX_HORIZON = 4
N_BINS = 10
WAREHOUSE = "WAREHOUSE"

TASKS = ("table", "page_global", "page_local")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinSpec:
    table: str
    boundaries: tuple

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) + 1

    @property
    def effective_bins(self) -> int:
        return len(set(self.boundaries)) + 1


def fit_bins(page_ids, n_bins: int = N_BINS, table: str = "") -> BinSpec:
    """Nearest-rank quantile cut points at 1/n, ..., (n-1)/n."""
    ids = np.sort(np.asarray(page_ids, dtype=np.int64))
    n = len(ids)
    if n == 0:
        raise DataError(f"cannot fit bins for {table or 'table'}: no page ids")
    # rank = ceil(k * n / n_bins), exact in integers
    ranks = [-(-k * n // n_bins) for k in range(1, n_bins)]
    return BinSpec(table, tuple(int(ids[max(r, 1) - 1]) for r in ranks))


def apply_bins(spec: BinSpec, page_id) -> int:
    return int(np.searchsorted(spec.boundaries, page_id, side="left"))


@dataclass
class BalanceReport:
    fractions: list
    degenerate: bool
    balanced: bool
    reason: str = ""


def bin_balance(spec: BinSpec, page_ids, tol: float = 0.015) -> BalanceReport:
    """Per-bin sample fractions; a set is degenerate when quantile balance
    cannot be guaranteed (too few samples or distinct values, or a single
    value heavier than ``tol``)."""
    ids = np.asarray(page_ids, dtype=np.int64)
    bins = np.searchsorted(np.asarray(spec.boundaries), ids, side="left")
    counts = np.bincount(bins, minlength=spec.n_bins)
    fractions = (counts / max(len(ids), 1)).tolist()
    _, value_counts = np.unique(ids, return_counts=True)
    reason = ""
    if len(ids) < 10_000:
        reason = "fewer than 10000 samples"
    elif len(value_counts) < 100:
        reason = "fewer than 100 distinct values"
    elif value_counts.max() / len(ids) > tol:
        reason = "single value heavier than tolerance"
    target = 1.0 / spec.n_bins
    balanced = all(abs(f - target) <= tol + 1e-12 for f in fractions)
    return BalanceReport(fractions, bool(reason), balanced, reason)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token <-> id bijection; ids 0 and 1 are reserved for PAD and UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = sorted(set(tokens))
        if not tokens:
            raise DataError("empty vocabulary")
        for reserved in (PAD_TOKEN, UNK_TOKEN):
            if reserved in tokens:
                raise DataError(f"token {reserved!r} is reserved")
        self.itos = [PAD_TOKEN, UNK_TOKEN] + tokens
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode_many(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.stoi.get(t, UNK) for t in tokens), dtype=np.int64, count=len(tokens))

    def decode(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def tokens(self) -> list:
        return self.itos[2:]

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.itos).encode("utf-8")).hexdigest()

    def to_list(self) -> list:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens) -> "Vocabulary":
        return cls(tokens)


def token_table(token: str, scope_table: Optional[str] = None) -> str:
    """Table a token belongs to, for per-table attribution."""
    if token in (PAD_TOKEN, UNK_TOKEN):
        return token
    if scope_table is not None:
        return scope_table
    return token.split("#", 1)[0]


# ---------------------------------------------------------------------------
# task encoding
# ---------------------------------------------------------------------------

def task_events(events: Sequence[LockEvent], task: str, table: Optional[str] = None) -> list[LockEvent]:
    """Restrict a cleaned stream to the object type and tables a task uses."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    if task == "table":
        out = [ev for ev in events if ev.obj is LockObjectType.TABLE]
    else:
        out = [ev for ev in events if ev.obj is LockObjectType.PAGE and ev.table.upper() != WAREHOUSE]
    if table is not None:
        out = [ev for ev in out if ev.table == table]
    return out


def encode_task(events: Sequence[LockEvent], task: str, binspecs: Optional[dict] = None,
                table: Optional[str] = None) -> list[str]:
    if task == "table":
        return [ev.table for ev in events]
    if binspecs is None:
        raise DataError("page tasks need fitted bins")
    if task == "page_global":
        out = []
        for ev in events:
            spec = binspecs.get(ev.table)
            if spec is None:
                raise DataError(f"no fitted bins for table {ev.table!r}")
            out.append(f"{ev.table}#{apply_bins(spec, ev.page)}")
        return out
    if task == "page_local":
        if table is None:
            raise DataError("page_local needs a table")
        spec = binspecs.get(table)
        if spec is None:
            raise DataError(f"no fitted bins for table {table!r}")
        return [str(apply_bins(spec, ev.page)) for ev in events if ev.table == table]
    raise DataError(f"unknown task {task!r}")


def fit_binspecs(train_events: Sequence[LockEvent], n_bins: int = N_BINS) -> dict:
    pages: dict[str, list] = {}
    for ev in train_events:
        if ev.obj is LockObjectType.PAGE:
            pages.setdefault(ev.table, []).append(ev.page)
    return {t: fit_bins(p, n_bins, t) for t, p in sorted(pages.items())}


def build_vocab(events: Sequence[LockEvent], task: str, binspecs: Optional[dict] = None,
                table: Optional[str] = None) -> Vocabulary:
    if not events:
        raise DataError("cannot build a vocabulary from no events")
    return Vocabulary(encode_task(events, task, binspecs, table))


# ---------------------------------------------------------------------------
# splitting and windowing
# ---------------------------------------------------------------------------

def split_counts(n: int, test_frac: float = 0.30, val_frac_of_train: float = 0.20) -> tuple:
    n_test = int(np.floor(n * test_frac + 1e-9))
    n_val = int(np.floor((n - n_test) * val_frac_of_train + 1e-9))
    return n - n_test - n_val, n_val, n_test


def chronological_split(events: Sequence, test_frac: float = 0.30, val_frac_of_train: float = 0.20):
    if len(events) < 10:
        raise DataError(f"need at least 10 events to split, got {len(events)}")
    n_train, n_val, _ = split_counts(len(events), test_frac, val_frac_of_train)
    return (
        list(events[:n_train]),
        list(events[n_train:n_train + n_val]),
        list(events[n_train + n_val:]),
    )


def end_watermark(events: Sequence[LockEvent]) -> np.ndarray:
    """Running maximum of end_ns: the latest release seen up to each event."""
    ends = np.fromiter((ev.end_ns for ev in events), dtype=np.int64, count=len(events))
    return np.maximum.accumulate(ends) if len(ends) else ends


@dataclass
class Split:
    name: str
    tokens: np.ndarray  # encoded stream (L,)
    windows: np.ndarray  # (L-1, window)
    targets: np.ndarray  # (L-1, max_horizon), PAD where the stream ended
    n_targets: np.ndarray  # (L-1,)
    anchor_end_ns: np.ndarray  # (L-1,)

    def __len__(self) -> int:
        return len(self.windows)


def window_examples(tokens, anchors=None, window: int = WINDOW, max_horizon: int = MAX_HORIZON,
                    name: str = "") -> Split:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n == 0:
        raise DataError("cannot window an empty stream")
    if anchors is None:
        anchors = np.arange(n, dtype=np.int64)
    anchors = np.asarray(anchors, dtype=np.int64)
    m = n - 1
    padded = np.concatenate([np.full(window - 1, PAD, dtype=np.int64), tokens,
                             np.full(max_horizon, PAD, dtype=np.int64)])
    t = np.arange(m)
    windows = padded[t[:, None] + np.arange(window)[None, :]]
    targets = padded[(t + window)[:, None] + np.arange(max_horizon)[None, :]]
    n_targets = np.minimum(max_horizon, n - 1 - t)
    return Split(name, tokens, windows, targets, n_targets.astype(np.int64), anchors[:m].copy())


@dataclass
class WindowedDataset:
    task: str
    scope: str  # "global" or a table name
    vocab: Vocabulary
    binspecs: dict
    train: Split
    val: Split
    test: Split
    window: int = WINDOW
    max_horizon: int = MAX_HORIZON
    meta: dict = field(default_factory=dict)

    @property
    def scope_table(self) -> Optional[str]:
        return None if self.scope == "global" else self.scope

    def splits(self):
        return (self.train, self.val, self.test)

    def target_tables(self, ids) -> list:
        scope = self.scope_table
        return [token_table(self.vocab.decode(int(i)), scope) for i in ids]


def build_dataset(events: Sequence[LockEvent], task: str, table: Optional[str] = None,
                  window: int = WINDOW, max_horizon: int = MAX_HORIZON,
                  test_frac: float = 0.30, val_frac_of_train: float = 0.20) -> WindowedDataset:
    """Events must already be cleaned (filtered and sorted chronologically)."""
    if task == "page_local" and table is None:
        raise DataError("page_local needs a table")
    selected = task_events(events, task, table)
    marks = end_watermark(selected)
    train_ev, val_ev, test_ev = chronological_split(selected, test_frac, val_frac_of_train)
    n_train, n_val = len(train_ev), len(val_ev)
    binspecs = fit_binspecs(train_ev) if task != "table" else {}
    if task != "table" and not binspecs:
        raise DataError("no PAGE events in the training segment")
    vocab = build_vocab(train_ev, task, binspecs, table)

    def make(name, evs, lo):
        toks = vocab.encode_many(_encode_lenient(evs, task, binspecs, table))
        return window_examples(toks, marks[lo:lo + len(evs)], window, max_horizon, name)

    return WindowedDataset(
        task=task,
        scope=table if table is not None else "global",
        vocab=vocab,
        binspecs=binspecs,
        train=make("train", train_ev, 0),
        val=make("val", val_ev, n_train),
        test=make("test", test_ev, n_train + n_val),
        window=window,
        max_horizon=max_horizon,
        meta={"n_events": len(selected), "split": [n_train, n_val, len(test_ev)]},
    )


def _encode_lenient(events, task, binspecs, table):
    # tables never seen in training have no bins; their pages become UNK tokens
    if task == "page_global":
        return [f"{ev.table}#{apply_bins(binspecs[ev.table], ev.page)}" if ev.table in binspecs else UNK_TOKEN
                for ev in events]
    return encode_task(events, task, binspecs, table)


def decode_split_tokens(dataset: WindowedDataset, split: Split) -> list:
    return [dataset.vocab.decode(int(i)) for i in split.tokens]


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------
#
#   magic  b"LSDS" | u16 version | u32 header length | UTF-8 JSON header
#   then, for train/val/test in order, little-endian arrays:
#   tokens i4[L] | windows i4[L-1, W] | targets i4[L-1, H] | n_targets i4[L-1] | anchors i8[L-1]
#
# the header records each split's L.

DATASET_MAGIC = b"LSDS"
DATASET_VERSION = 1


def save_dataset(ds: WindowedDataset, path) -> None:
    header = {
        "task": ds.task,
        "scope": ds.scope,
        "vocab": ds.vocab.to_list(),
        "binspecs": {t: list(s.boundaries) for t, s in ds.binspecs.items()},
        "window": ds.window,
        "max_horizon": ds.max_horizon,
        "lengths": [len(s.tokens) for s in ds.splits()],
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HI", DATASET_VERSION, len(blob)))
    buf.write(blob)
    for s in ds.splits():
        for arr, dt in ((s.tokens, "<i4"), (s.windows, "<i4"), (s.targets, "<i4"),
                        (s.n_targets, "<i4"), (s.anchor_end_ns, "<i8")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> WindowedDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise DataError("not a dataset file")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    off = 10
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    w, h = header["window"], header["max_horizon"]

    def take(count, dt, shape):
        nonlocal off
        nbytes = count * np.dtype(dt).itemsize
        if off + nbytes > len(data):
            raise DataError("truncated dataset file")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).astype(np.int64).reshape(shape)
        off += nbytes
        return arr

    splits = []
    for name, length in zip(("train", "val", "test"), header["lengths"]):
        m = length - 1
        splits.append(Split(
            name,
            take(length, "<i4", (length,)),
            take(m * w, "<i4", (m, w)),
            take(m * h, "<i4", (m, h)),
            take(m, "<i4", (m,)),
            take(m, "<i8", (m,)),
        ))
    binspecs = {t: BinSpec(t, tuple(b)) for t, b in header["binspecs"].items()}
    return WindowedDataset(header["task"], header["scope"], Vocabulary(header["vocab"]), binspecs,
                           *splits, window=w, max_horizon=h, meta=header["meta"])
