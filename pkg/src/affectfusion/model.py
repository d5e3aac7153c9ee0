"""Fusion architecture: per-stream affine alignment with sinusoidal positional
encoding, channel concatenation with a learned projection back to the shared
width, a pre-norm transformer encoder, and three task heads (valence/arousal,
expression logits, action-unit logits).

Streams are identified by name; the configured stream order only fixes the
concatenation layout.  A frozen model is safe to share across readers, and
its checkpoint is a single self-describing binary file (see ``save``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, Tensor, as_tensor, concat, layernorm, softmax

__all__ = [
    "ModelConfig",
    "FusionModel",
    "positional_encoding",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"AFFUSE01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file malformed or inconsistent with its own header."""


def positional_encoding(t_max: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos table: row t, column 2i is sin(t / 10000^(2i/d)), 2i+1 the cos."""
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even for sin/cos pairing, got {d_model}")
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    pos = np.arange(t_max, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / d_model)
    table = np.empty((t_max, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the stream manifest.

    ``streams`` maps stream name to input dimension; order fixes the layout of
    the fused projection.  ``t_max`` bounds the window length (and sizes the
    positional table).  ``use_pe`` exists as a test hook to disable the
    positional term.
    """

    streams: tuple[tuple[str, int], ...]
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 1024
    dropout: float = 0.1
    t_max: int = 64
    use_pe: bool = True

    def __post_init__(self):
        if not self.streams:
            raise ValueError("at least one feature stream is required")
        names = [name for name, _ in self.streams]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate stream names in {names}")
        for name, dim in self.streams:
            if dim < 1:
                raise ValueError(f"stream {name!r} has non-positive dimension {dim}")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.t_max < 1 or self.n_layers < 1 or self.d_ff < 1:
            raise ValueError("t_max, n_layers and d_ff must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    def stream_dim(self, name: str) -> int:
        for n, d in self.streams:
            if n == name:
                return d
        raise KeyError(f"unknown stream {name!r}; configured: "
                       f"{', '.join(n for n, _ in self.streams)}")

    def to_dict(self) -> dict:
        return {
            "streams": [[n, d] for n, d in self.streams],
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "dropout": self.dropout,
            "t_max": self.t_max,
            "use_pe": self.use_pe,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(streams=tuple((str(n), int(dim)) for n, dim in d["streams"]),
                   d_model=int(d["d_model"]), n_heads=int(d["n_heads"]),
                   n_layers=int(d["n_layers"]), d_ff=int(d["d_ff"]),
                   dropout=float(d["dropout"]), t_max=int(d["t_max"]),
                   use_pe=bool(d["use_pe"]))


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_out, fan_in))


# Output arities are fixed by the task definitions: a VA pair, eight
# expression classes, twelve action units.
N_VA = 2
N_EXPR = 8
N_AU = 12


class FusionModel:
    """The trainable pipeline from raw per-stream features to task outputs."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.pe = positional_encoding(config.t_max, config.d_model)
        rng = np.random.default_rng(seed)
        d = config.d_model
        p: dict[str, Tensor] = {}

        def weight(name, fan_out, fan_in):
            p[name] = Tensor(_glorot(rng, fan_out, fan_in), requires_grad=True)

        def vector(name, size, fill=0.0):
            p[name] = Tensor(np.full(size, fill), requires_grad=True)

        for name, dim in config.streams:
            weight(f"affine.{name}.K", d, dim)
            vector(f"affine.{name}.c", d)
        weight("fuse.W", d, config.n_streams * d)
        for layer in range(config.n_layers):
            pre = f"enc{layer}"
            vector(f"{pre}.ln1.g", d, 1.0)
            vector(f"{pre}.ln1.b", d)
            for nm in ("wq", "wk", "wv", "wo"):
                weight(f"{pre}.attn.{nm}", d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                vector(f"{pre}.attn.{nm}", d)
            vector(f"{pre}.ln2.g", d, 1.0)
            vector(f"{pre}.ln2.b", d)
            weight(f"{pre}.ffn.w1", config.d_ff, d)
            vector(f"{pre}.ffn.b1", config.d_ff)
            weight(f"{pre}.ffn.w2", d, config.d_ff)
            vector(f"{pre}.ffn.b2", d)
        weight("head.va.w", N_VA, d)
        vector("head.va.b", N_VA)
        weight("head.expr.w", N_EXPR, d)
        vector("head.expr.b", N_EXPR)
        weight("head.au.w", N_AU, d)
        vector("head.au.b", N_AU)
        self.params = p

    # -- forward pieces -----------------------------------------------------

    def align(self, name: str, feats) -> Tensor:
        """Affine-project one stream to the shared width and add its positional rows."""
        key = f"affine.{name}.K"
        if key not in self.params:
            raise KeyError(f"unknown stream {name!r}; configured: "
                           f"{', '.join(n for n, _ in self.config.streams)}")
        x = as_tensor(feats)
        expected = self.config.stream_dim(name)
        if x.ndim != 2 or x.shape[1] != expected:
            raise ShapeError(f"stream {name!r} expects (T, {expected}), got {x.shape}")
        t = x.shape[0]
        if t > self.config.t_max:
            raise ShapeError(f"window length {t} exceeds t_max {self.config.t_max}")
        out = x @ self.params[key].t() + self.params[f"affine.{name}.c"]
        if self.config.use_pe:
            out = out + self.pe[:t]
        return out

    def fuse(self, aligned: list[Tensor]) -> Tensor:
        """Concatenate aligned streams per frame and project back to d_model."""
        if len(aligned) != self.config.n_streams:
            raise ShapeError(f"expected {self.config.n_streams} aligned streams, "
                             f"got {len(aligned)}")
        stacked = concat(aligned, axis=1) if len(aligned) > 1 else aligned[0]
        return stacked @ self.params["fuse.W"].t()

    def _dropout(self, x: Tensor, rng) -> Tensor:
        rate = self.config.dropout
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * keep

    def _attention(self, x: Tensor, layer: int, sink: list | None) -> Tensor:
        p = self.params
        pre = f"enc{layer}.attn"
        d, heads = self.config.d_model, self.config.n_heads
        dh = d // heads
        scale = 1.0 / np.sqrt(dh)
        q = x @ p[f"{pre}.wq"].t() + p[f"{pre}.bq"]
        k = x @ p[f"{pre}.wk"].t() + p[f"{pre}.bk"]
        v = x @ p[f"{pre}.wv"].t() + p[f"{pre}.bv"]
        ctx = []
        for h in range(heads):
            qs = _slice_cols(q, h * dh, dh)
            ks = _slice_cols(k, h * dh, dh)
            vs = _slice_cols(v, h * dh, dh)
            weights = softmax((qs @ ks.t()) * scale, axis=1)
            if sink is not None:
                sink.append(weights.data.copy())
            ctx.append(weights @ vs)
        merged = concat(ctx, axis=1) if heads > 1 else ctx[0]
        return merged @ p[f"{pre}.wo"].t() + p[f"{pre}.bo"]

    def encode(self, x: Tensor, train: bool = False,
               rng: np.random.Generator | None = None,
               attn_sink: list | None = None) -> Tensor:
        """Pre-norm encoder stack: x + MHA(LN(x)), then + FFN(LN(.))."""
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.d_model:
            raise ShapeError(f"encode expects (T, {self.config.d_model}), got {x.shape}")
        if x.shape[0] > self.config.t_max:
            raise ShapeError(f"window length {x.shape[0]} exceeds t_max {self.config.t_max}")
        drop = train and self.config.dropout > 0.0
        if drop and rng is None:
            raise ValueError("training forward with dropout requires an rng")
        p = self.params
        for layer in range(self.config.n_layers):
            pre = f"enc{layer}"
            h = layernorm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            a = self._attention(h, layer, attn_sink)
            if drop:
                a = self._dropout(a, rng)
            x = x + a
            h = layernorm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            f = (h @ p[f"{pre}.ffn.w1"].t() + p[f"{pre}.ffn.b1"]).relu()
            f = f @ p[f"{pre}.ffn.w2"].t() + p[f"{pre}.ffn.b2"]
            if drop:
                f = self._dropout(f, rng)
            x = x + f
        return x

    def heads(self, encoded: Tensor) -> dict[str, Tensor]:
        """Per-frame task outputs: VA through tanh, expression and AU logits raw."""
        p = self.params
        return {
            "va": (encoded @ p["head.va.w"].t() + p["head.va.b"]).tanh(),
            "expr": encoded @ p["head.expr.w"].t() + p["head.expr.b"],
            "au": encoded @ p["head.au.w"].t() + p["head.au.b"],
        }

    def forward(self, feats: dict, train: bool = False,
                rng: np.random.Generator | None = None,
                attn_sink: list | None = None) -> dict[str, Tensor]:
        names = [n for n, _ in self.config.streams]
        missing = [n for n in names if n not in feats]
        extra = [n for n in feats if n not in names]
        if missing or extra:
            raise ShapeError(f"feature streams do not match the model: "
                             f"missing={missing} unexpected={extra}")
        aligned = [self.align(n, feats[n]) for n in names]
        t0 = aligned[0].shape[0]
        if any(a.shape[0] != t0 for a in aligned):
            raise ShapeError("streams disagree on window length")
        encoded = self.encode(self.fuse(aligned), train=train, rng=rng,
                              attn_sink=attn_sink)
        return self.heads(encoded)

    # -- parameter management -------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names do not match the model")
        for name, arr in state.items():
            if arr.shape != self.params[name].data.shape:
                raise CheckpointError(
                    f"parameter {name!r}: shape {arr.shape} does not match "
                    f"{self.params[name].data.shape}")
            self.params[name].data[...] = arr

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(self, path, meta)


def _slice_cols(x: Tensor, start: int, length: int) -> Tensor:
    from .numerics import narrow
    return narrow(x, 1, start, length)


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, config JSON, then named float64 arrays.
# Layout (all integers little-endian):
#   8s    magic "AFFUSE01"
#   u32   format version (1)
#   u32   header length, followed by that many bytes of UTF-8 JSON
#         {"model": <config dict>, "meta": <caller dict>}
#   u32   parameter count, then per parameter:
#         u16 name length, name bytes, u8 rank, rank * u32 extents,
#         extent-product * f64 row-major values
# ---------------------------------------------------------------------------

def save_checkpoint(model: FusionModel, path, meta: dict | None = None) -> None:
    header = json.dumps({"model": model.config.to_dict(), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            for extent in p.data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    """Rebuild a model from its checkpoint; returns (model, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", view, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", view, 12)
    offset = 16
    header = json.loads(bytes(view[offset:offset + hlen]).decode("utf-8"))
    offset += hlen
    config = ModelConfig.from_dict(header["model"])
    model = FusionModel(config, seed=0)
    (count,) = struct.unpack_from("<I", view, offset)
    offset += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset:offset + nlen]).decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", view, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        state[name] = arr.astype(np.float64)
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    model.load_state(state)
    return model, header.get("meta", {})
