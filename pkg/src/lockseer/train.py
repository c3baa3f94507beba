"""Training loop, repetition over seeds, and global/local regimes."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .ingest import LockEvent
from .models import ModelConfig, forward, init_params
from .prep import DataError, WindowedDataset, build_dataset, task_events
from .tensorcore import AdamWState, Parameter, Tape, adamw_step, backward, softmax_cross_entropy

log = logging.getLogger(__name__)

REGIMES = ("global", "local")
MIN_SCOPE_EVENTS = 10


class TrainError(RuntimeError):
    pass


def derive_seeds(master_seed: int, n: int = 10) -> list:
    """``n`` distinct 32-bit seeds derived from a master seed."""
    state = np.random.SeedSequence(master_seed).generate_state(4 * n + 8, dtype=np.uint32)
    seeds = []
    for s in state:
        if int(s) not in seeds:
            seeds.append(int(s))
        if len(seeds) == n:
            return seeds
    raise TrainError("could not derive distinct seeds")  # pragma: no cover


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.001
    weight_decay: float = 0.004
    master_seed: int = 0
    n_seeds: int = 10
    seeds: Optional[list] = None
    max_horizon: int = 4
    eval_batch: int = 1024

    def resolved_seeds(self) -> list:
        return list(self.seeds) if self.seeds is not None else derive_seeds(self.master_seed, self.n_seeds)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")
        seeds = self.resolved_seeds()
        if not seeds or len(set(seeds)) != len(seeds):
            raise TrainError("seeds must be non-empty and distinct")
        return self


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    @property
    def best_epoch(self) -> Optional[int]:
        """1-based epoch of the lowest validation loss (earliest on ties)."""
        if not self.val_loss:
            return None
        return int(np.argmin(self.val_loss)) + 1

    @property
    def best_val_loss(self) -> Optional[float]:
        return None if not self.val_loss else float(min(self.val_loss))

    def rows(self, scope: str, model: str, seed: int):
        best = self.best_epoch
        for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            yield {"scope": scope, "model": model, "seed": seed, "epoch": e,
                   "train_loss": tl, "val_loss": vl, "is_best": int(e == best)}


@dataclass
class RunResult:
    seed: int
    config: ModelConfig
    params: dict
    history: TrainHistory


def make_batches(n_examples: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled index batches; the final partial batch is kept."""
    if n_examples < 1:
        raise TrainError("no examples to batch")
    order = rng.permutation(n_examples)
    return [order[i:i + batch_size] for i in range(0, n_examples, batch_size)]


def evaluate_loss(cfg: ModelConfig, params: dict, windows, targets, batch: int = 1024) -> float:
    """Mean next-token cross-entropy with dropout off."""
    total = 0.0
    for i in range(0, len(windows), batch):
        loss, _ = softmax_cross_entropy(forward(params, cfg, windows[i:i + batch]), targets[i:i + batch])
        total += float(loss.value) * len(windows[i:i + batch])
    return total / len(windows)


def fit(model_cfg: ModelConfig, dataset: WindowedDataset, train_cfg: TrainConfig,
        seed: Optional[int] = None) -> tuple[dict, TrainHistory]:
    """Train on horizon-1 targets; returns the parameters of the best validation epoch."""
    if model_cfg.kind == "naive":
        return {}, TrainHistory()
    train, val = dataset.train, dataset.val
    if len(train) == 0 or len(val) == 0:
        raise TrainError("train and validation splits must be non-empty")
    seed = model_cfg.seed if seed is None else seed
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    cfg = replace(model_cfg, vocab_size=len(dataset.vocab),
                  seed=int(init_seq.generate_state(1, dtype=np.uint32)[0])).validate()
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)

    params = init_params(cfg)
    state = AdamWState(learning_rate=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    x_tr, y_tr = train.windows, train.targets[:, 0]
    x_va, y_va = val.windows, val.targets[:, 0]

    history = TrainHistory()
    best_loss, snapshot = np.inf, None
    for epoch in range(train_cfg.epochs):
        total = 0.0
        for idx in make_batches(len(x_tr), train_cfg.batch_size, shuffle_rng):
            with Tape() as tape:
                loss, _ = softmax_cross_entropy(forward(params, cfg, x_tr[idx], True, drop_rng), y_tr[idx])
            adamw_step(params, backward(tape, loss, params), state)
            total += float(loss.value) * len(idx)
        history.train_loss.append(total / len(x_tr))
        val_loss = evaluate_loss(cfg, params, x_va, y_va, train_cfg.eval_batch)
        history.val_loss.append(val_loss)
        log.debug("%s seed=%d epoch=%d train=%.6f val=%.6f", cfg.kind, seed, epoch + 1,
                  history.train_loss[-1], val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            snapshot = {k: p.value.copy() for k, p in params.items()}
    return {k: Parameter(v) for k, v in snapshot.items()}, history


def _fit_one(args):
    model_cfg, dataset, train_cfg, seed = args
    try:
        params, history = fit(model_cfg, dataset, train_cfg, seed)
    except Exception as exc:
        raise TrainError(f"seed {seed}: {exc}") from exc
    cfg = replace(model_cfg, vocab_size=len(dataset.vocab), seed=seed)
    return RunResult(seed, cfg, params, history)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LOCKSEER_THREADS", "1")))
    except ValueError:
        return 1


def run_repetitions(model_cfg: ModelConfig, dataset: WindowedDataset, train_cfg: TrainConfig,
                    workers: Optional[int] = None) -> list[RunResult]:
    """One independent fit per seed, returned sorted by seed."""
    train_cfg.validate()
    seeds = sorted(train_cfg.resolved_seeds())
    jobs = [(model_cfg, dataset, train_cfg, s) for s in seeds]
    workers = worker_count() if workers is None else workers
    if model_cfg.kind == "naive" or workers <= 1 or len(jobs) == 1:
        return [_fit_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_one, jobs))


@dataclass
class ScopeResult:
    scope: str
    dataset: WindowedDataset
    runs: dict  # model kind -> list[RunResult]


def regime_scopes(events: Sequence[LockEvent], task: str, regime: str) -> list:
    """Scopes a regime trains: ``["global"]`` or the sorted tables of the task."""
    if regime == "global":
        return ["global"]
    if regime != "local":
        raise TrainError(f"unknown regime {regime!r}")
    base = "table" if task == "table" else "page_local"
    return sorted({ev.table for ev in task_events(events, base)})


def scope_dataset(events: Sequence[LockEvent], task: str, scope: str, **kw) -> WindowedDataset:
    if scope == "global":
        if task == "page_local":
            raise TrainError("page_local requires the local regime")
        return build_dataset(events, task, **kw)
    return build_dataset(events, "table" if task == "table" else "page_local", table=scope, **kw)


def train_regime(regime: str, events: Sequence[LockEvent], task: str, model_cfgs: Sequence[ModelConfig],
                 train_cfg: TrainConfig, workers: Optional[int] = None, **dataset_kw) -> list[ScopeResult]:
    if regime == "local" and task == "page_global":
        raise TrainError("page_global is a global-regime task; use page_local")
    results = []
    for scope in regime_scopes(events, task, regime):
        try:
            ds = scope_dataset(events, task, scope, **dataset_kw)
        except DataError as exc:
            if scope != "global":
                log.warning("skipping table %s: %s", scope, exc)
                continue
            raise
        if len(ds.val) == 0 or len(ds.train) == 0:
            log.warning("skipping scope %s: empty train or validation split", scope)
            continue
        runs = {cfg.kind: run_repetitions(cfg, ds, train_cfg, workers) for cfg in model_cfgs}
        results.append(ScopeResult(scope, ds, runs))
    return results
