"""Next-lock predictors: naive repeat-last, LSTM and a Transformer encoder."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .prep import PAD, UNK, Vocabulary
from .tensorcore import (
    Parameter,
    Tensor,
    add,
    dropout,
    embedding_lookup,
    getitem,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    lstm_scan,
    softmax,
    transpose,
)

KINDS = ("naive", "lstm", "transformer")
MASK_BIAS = -1e9


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str
    vocab_size: int
    window: int = 25
    embed_dim: int = 128
    heads: int = 8
    ffn_hidden: int = 512
    dropout: float = 0.10
    encoder_layers: int = 1
    lstm_hidden: int = 256
    lstm_layers: int = 1
    head_hidden: int = 128
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.vocab_size < 3:
            raise ModelError("vocab_size must cover PAD, UNK and at least one token")
        if self.kind == "transformer" and self.embed_dim % self.heads:
            raise ModelError("embed_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if min(self.window, self.embed_dim, self.encoder_layers, self.lstm_hidden,
               self.lstm_layers, self.head_hidden, self.ffn_hidden, self.heads) < 1:
            raise ModelError("sizes must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "ModelConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map for an architecture."""
    V, E, Hh = cfg.vocab_size, cfg.embed_dim, cfg.head_hidden
    shapes = {}
    if cfg.kind == "naive":
        return shapes
    shapes["embedding"] = (V, E)
    if cfg.kind == "transformer":
        F = cfg.ffn_hidden
        for l in range(cfg.encoder_layers):
            p = f"enc{l}."
            shapes[p + "ln1.gain"] = (E,)
            shapes[p + "ln1.bias"] = (E,)
            for m in "qkvo":
                shapes[p + f"attn.w{m}"] = (E, E)
                shapes[p + f"attn.b{m}"] = (E,)
            shapes[p + "ln2.gain"] = (E,)
            shapes[p + "ln2.bias"] = (E,)
            shapes[p + "ffn.w1"] = (E, F)
            shapes[p + "ffn.b1"] = (F,)
            shapes[p + "ffn.w2"] = (F, E)
            shapes[p + "ffn.b2"] = (E,)
        top = E
    else:
        H = cfg.lstm_hidden
        for l in range(cfg.lstm_layers):
            p = f"lstm{l}."
            shapes[p + "w"] = (E if l == 0 else H, 4 * H)
            shapes[p + "u"] = (H, 4 * H)
            shapes[p + "b"] = (4 * H,)
        top = H
    shapes["head.w"] = (top, Hh)
    shapes["head.b"] = (Hh,)
    shapes["out.w"] = (Hh, V)
    shapes["out.b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig) -> dict:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains, LSTM forget bias 1."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
            if cfg.kind == "lstm" and name.startswith("lstm") and name.endswith(".b"):
                H = cfg.lstm_hidden
                value[H:2 * H] = 1.0
        params[name] = Parameter(value)
    return params


def count_params(params: dict) -> int:
    return int(sum(p.value.size for p in params.values()))


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _as_windows(windows) -> np.ndarray:
    ids = np.asarray(windows, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ModelError("windows must be (batch, length)")
    return ids


def last_positions(ids: np.ndarray) -> np.ndarray:
    mask = ids != PAD
    if not mask.any(axis=1).all():
        raise ModelError("window contains only PAD tokens")
    return ids.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)


def _check_ids(ids, vocab_size):
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ModelError(f"token id out of range [0, {vocab_size})")


def _embed(params, ids):
    x = embedding_lookup(params["embedding"], ids)
    # PAD positions carry no content, whatever the PAD embedding row holds
    return mul(x, (ids != PAD)[..., None].astype(np.float64))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, E = x.shape
    return transpose(reshape(x, (B, T, heads, E // heads)), (0, 2, 1, 3))


def _encoder_layer(params, prefix, x, key_bias, readout, cfg, train, rng):
    """Pre-norm encoder layer. With ``readout`` given, only those positions
    are carried past attention (keys and values still span the window)."""
    p = lambda n: params[prefix + n]  # noqa: E731
    B, T, E = x.shape
    H = cfg.heads
    dh = E // H
    h = layer_norm(x, p("ln1.gain"), p("ln1.bias"))
    k = _split_heads(add(matmul(h, p("attn.wk")), p("attn.bk")), H)
    v = _split_heads(add(matmul(h, p("attn.wv")), p("attn.bv")), H)
    if readout is None:
        xq = x
        q = _split_heads(add(matmul(h, p("attn.wq")), p("attn.bq")), H)
    else:
        index = (np.arange(B), readout)
        xq = getitem(x, index)
        q = reshape(add(matmul(getitem(h, index), p("attn.wq")), p("attn.bq")), (B, H, 1, dh))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = softmax(add(scores, key_bias))
    ctx = matmul(att, v)
    ctx = reshape(ctx, (B, E)) if readout is not None else reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, E))
    a = dropout(add(matmul(ctx, p("attn.wo")), p("attn.bo")), cfg.dropout, train, rng)
    x = add(xq, a)
    h2 = layer_norm(x, p("ln2.gain"), p("ln2.bias"))
    f = add(matmul(relu(add(matmul(h2, p("ffn.w1")), p("ffn.b1"))), p("ffn.w2")), p("ffn.b2"))
    return add(x, dropout(f, cfg.dropout, train, rng))


def _head(params, r: Tensor) -> Tensor:
    z = relu(add(matmul(r, params["head.w"]), params["head.b"]))
    return add(matmul(z, params["out.w"]), params["out.b"])


def transformer_forward(params: dict, cfg: ModelConfig, windows, train: bool = False,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    ids = _as_windows(windows)
    _check_ids(ids, cfg.vocab_size)
    last = last_positions(ids)
    B, T = ids.shape
    x = add(_embed(params, ids), positional_encoding(T, cfg.embed_dim))
    x = dropout(x, cfg.dropout, train, rng)
    key_bias = np.where(ids != PAD, 0.0, MASK_BIAS)[:, None, None, :]
    for l in range(cfg.encoder_layers):
        final = l == cfg.encoder_layers - 1
        x = _encoder_layer(params, f"enc{l}.", x, key_bias, last if final else None, cfg, train, rng)
    return _head(params, x)


def lstm_forward(params: dict, cfg: ModelConfig, windows, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    ids = _as_windows(windows)
    _check_ids(ids, cfg.vocab_size)
    last = last_positions(ids)
    # positions past the latest readout cannot influence any output
    steps = int(last.max()) + 1
    ids = ids[:, :steps]
    B = ids.shape[0]
    x = dropout(_embed(params, ids), cfg.dropout, train, rng)
    for l in range(cfg.lstm_layers):
        p = f"lstm{l}."
        xw = add(matmul(x, params[p + "w"]), params[p + "b"])
        x = lstm_scan(xw, params[p + "u"])
    if np.all(last == steps - 1):
        r = getitem(x, (slice(None), steps - 1))
    else:
        r = getitem(x, (np.arange(B), last))
    return _head(params, r)


FORWARDS = {"transformer": transformer_forward, "lstm": lstm_forward}


def forward(params, cfg: ModelConfig, windows, train=False, rng=None) -> Tensor:
    return FORWARDS[cfg.kind](params, cfg, windows, train, rng)


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

def naive_predict(window) -> int:
    ids = np.asarray(window, dtype=np.int64).reshape(-1)
    nz = np.flatnonzero(ids != PAD)
    return int(ids[nz[-1]]) if len(nz) else UNK


class NaivePredictor:
    """Repeats the most recent non-PAD token; all-PAD windows predict UNK."""

    kind = "naive"

    def __init__(self):
        self.all_pad_count = 0

    def predict_next(self, windows) -> np.ndarray:
        ids = _as_windows(windows)
        mask = ids != PAD
        has = mask.any(axis=1)
        self.all_pad_count += int((~has).sum())
        last = ids.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
        out = ids[np.arange(len(ids)), last]
        return np.where(has, out, UNK)


class NeuralPredictor:
    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.kind = cfg.kind

    def logits(self, windows, batch_size: int = 2048) -> np.ndarray:
        ids = _as_windows(windows)
        out = [forward(self.params, self.cfg, ids[i:i + batch_size]).value
               for i in range(0, len(ids), batch_size)]
        return np.concatenate(out, axis=0)

    def predict_next(self, windows) -> np.ndarray:
        z = self.logits(windows)
        z[:, PAD] = -np.inf
        # np.argmax returns the first maximum: ties go to the lowest id
        return np.argmax(z, axis=1)


def build_predictor(cfg: ModelConfig, params: Optional[dict] = None):
    if cfg.kind == "naive":
        return NaivePredictor()
    return NeuralPredictor(cfg, params if params is not None else init_params(cfg))


def rollout_horizon(model, windows, h: int) -> np.ndarray:
    """Greedy autoregressive decoding of ``h`` tokens per window.

    Returns (batch, h); a single 1-D window returns shape (h,).
    """
    if h < 1:
        raise ModelError("horizon must be >= 1")
    single = np.asarray(windows).ndim == 1
    ids = _as_windows(windows).copy()
    preds = np.empty((len(ids), h), dtype=np.int64)
    for step in range(h):
        nxt = np.asarray(model.predict_next(ids), dtype=np.int64)
        preds[:, step] = nxt
        ids = np.concatenate([ids[:, 1:], nxt[:, None]], axis=1)
    return preds[0] if single else preds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
#   b"LSEER" | u16 version | u32 header length | UTF-8 JSON header | f64 blob
#
# header: config, vocab fingerprint, meta, manifest [(name, shape, offset)]
# where offset counts float64 elements into the blob.

CHECKPOINT_MAGIC = b"LSEER"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    vocab_fingerprint: str
    meta: dict


def save_checkpoint(params: dict, cfg: ModelConfig, vocab: Vocabulary, meta: dict, path) -> None:
    manifest = []
    offset = 0
    for name, p in params.items():
        manifest.append([name, list(p.value.shape), offset])
        offset += p.value.size
    header = {
        "config": cfg.to_dict(),
        "vocab_fingerprint": vocab.fingerprint(),
        "meta": meta,
        "manifest": manifest,
        "n_values": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for p in params.values():
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, vocab: Optional[Vocabulary] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(CHECKPOINT_MAGIC) + 6
    if len(data) < head or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    version, hlen = struct.unpack_from("<HI", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < head + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    n_values = header["n_values"]
    expected = head + hlen + 8 * n_values
    if len(data) != expected:
        raise CheckpointError(f"checkpoint size {len(data)} != expected {expected} (truncated?)")
    if vocab is not None and vocab.fingerprint() != header["vocab_fingerprint"]:
        raise CheckpointError("vocabulary fingerprint mismatch")
    values = np.frombuffer(data, dtype="<f8", count=n_values, offset=head + hlen)
    params = {}
    for name, shape, off in header["manifest"]:
        size = int(np.prod(shape)) if shape else 1
        params[name] = Parameter(values[off:off + size].reshape(shape).astype(np.float64))
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, header["vocab_fingerprint"], header["meta"])
