"""Multi-head factorized attention (MHFA) back-end.

Two softmax-weighted sums over encoder layers give a key stream and a value
stream.  Both are projected to ``D_cmp``; the key stream scored against
``H`` learned query vectors yields per-head attention over time, and each
head pools the full value stream with its weights.  The concatenated head
outputs are projected to an embedding and classified as spoof (index 0) or
bonafide (index 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as tn
from .dsu import DsuConfig, dsu_perturb
from .features import FeatureStack
from .tensor import Tensor

SPOOF, BONAFIDE = 0, 1
FRONTEND_PARAMS = ("gamma", "beta")


@dataclass
class MhfaConfig:
    L: int
    D: int
    H: int = 32
    D_cmp: int = 128
    E: int = 256
    dsu_enabled: bool = False
    dsu: DsuConfig = field(default_factory=DsuConfig)
    adapter_enabled: bool = False

    def __post_init__(self):
        if isinstance(self.dsu, Mapping):
            self.dsu = DsuConfig(**self.dsu)
        for name in ("L", "D", "H", "D_cmp", "E"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"MhfaConfig.{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MhfaParams:
    """Every trainable array of the back-end.

    The key projection has no bias: a bias there shifts all attention logits
    of a head by the same amount over time, which the time softmax ignores.
    """

    w_k: np.ndarray  # (L,)
    w_v: np.ndarray  # (L,)
    W_k: np.ndarray  # (D, D_cmp)
    W_v: np.ndarray  # (D, D_cmp)
    b_v: np.ndarray  # (D_cmp,)
    W_att: np.ndarray  # (D_cmp, H)
    W_fc: np.ndarray  # (H * D_cmp, E)
    b_fc: np.ndarray  # (E,)
    W_cls: np.ndarray  # (E, 2)
    b_cls: np.ndarray  # (2,)
    gamma: np.ndarray | None = None  # (L, D) front-end adapter scale
    beta: np.ndarray | None = None  # (L, D) front-end adapter shift

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.items())

    def replace(self, **arrays) -> "MhfaParams":
        return MhfaParams(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **arrays})

    def astype(self, dtype) -> "MhfaParams":
        return MhfaParams(**{k: np.array(v, dtype=dtype) for k, v in self.items()})

    def n_scalars(self) -> int:
        return int(sum(v.size for _, v in self.items()))

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.items()}


def init_params(cfg: MhfaConfig, rng: np.random.Generator, dtype=np.float32) -> MhfaParams:
    """Zero layer logits, N(0, 1/fan_in) matrices, zero biases, identity adapter."""

    def dense(fan_in, fan_out):
        return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)

    params = MhfaParams(
        w_k=np.zeros(cfg.L, dtype),
        w_v=np.zeros(cfg.L, dtype),
        W_k=dense(cfg.D, cfg.D_cmp),
        W_v=dense(cfg.D, cfg.D_cmp),
        b_v=np.zeros(cfg.D_cmp, dtype),
        W_att=dense(cfg.D_cmp, cfg.H),
        W_fc=dense(cfg.H * cfg.D_cmp, cfg.E),
        b_fc=np.zeros(cfg.E, dtype),
        W_cls=dense(cfg.E, 2),
        b_cls=np.zeros(2, dtype),
    )
    if cfg.adapter_enabled:
        params.gamma = np.ones((cfg.L, cfg.D), dtype)
        params.beta = np.zeros((cfg.L, cfg.D), dtype)
    return params


def aggregate_layers(x, w) -> Tensor:
    """Softmax(w)-weighted sum over the layer axis of ``x`` (..., L, T, D)."""
    if isinstance(x, FeatureStack):
        x = x.values
    x, w = tn.as_tensor(x), tn.as_tensor(w)
    if x.ndim < 3:
        raise tn.ShapeError(f"layer aggregation expects (..., L, T, D), got {x.shape}")
    if w.shape != (x.shape[-3],):
        raise tn.ShapeError(f"layer weights of shape {w.shape} for {x.shape[-3]} layers")
    return tn.weighted_sum(x, tn.softmax(w, axis=0), axis=-3)


@dataclass
class MhfaOutput:
    logits: Tensor  # (B, 2) or (2,)
    embedding: Tensor  # (B, E) or (E,)
    attention: Tensor  # (B, T, H) or (T, H)


def _batch_array(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, FeatureStack):
        return x.values[None], False
    if isinstance(x, Tensor):
        x = x.data
    arr = np.asarray(x)
    if arr.ndim == 3:
        return arr[None], False
    if arr.ndim == 4:
        return arr, True
    raise tn.ShapeError(f"expected (L, T, D) or (B, L, T, D) features, got {arr.shape}")


def mhfa_forward(
    x,
    params: MhfaParams | Mapping,
    cfg: MhfaConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> MhfaOutput:
    """Run the back-end on one stack or a batch of equally long stacks.

    ``params`` may be an :class:`MhfaParams` (treated as constants) or a
    mapping of name to :class:`Tensor` when gradients are wanted.  The DSU
    perturbation of the value stream only happens in ``mode == "train"``.
    """
    arr, batched = _batch_array(x)
    B, L, T, D = arr.shape
    if L != cfg.L or D != cfg.D:
        raise tn.ShapeError(f"input stage: features are L={L}, D={D} but model expects L={cfg.L}, D={cfg.D}")
    p = {k: tn.as_tensor(v) for k, v in (params.items() if isinstance(params, MhfaParams) else params.items())}
    X = Tensor(arr.astype(p["W_k"].dtype, copy=False))

    if cfg.adapter_enabled:
        if "gamma" not in p or "beta" not in p:
            raise tn.ShapeError("adapter stage: adapter enabled but gamma/beta missing")
        X = tn.add(tn.mul(X, tn.expand(p["gamma"], 1, T)), tn.expand(p["beta"], 1, T))

    k_feat = aggregate_layers(X, p["w_k"])  # (B, T, D)
    v_feat = aggregate_layers(X, p["w_v"])
    if cfg.dsu_enabled and mode == "train":
        v_feat = dsu_perturb(v_feat, cfg.dsu, rng, mode)

    K = tn.matmul(k_feat, p["W_k"])  # (B, T, D_cmp)
    V = tn.add(tn.matmul(v_feat, p["W_v"]), p["b_v"])
    A = tn.softmax(tn.matmul(K, p["W_att"]), axis=1)  # (B, T, H), normalised over time
    pooled = tn.matmul(tn.transpose(A, (0, 2, 1)), V)  # (B, H, D_cmp)
    flat = tn.reshape(pooled, (B, cfg.H * cfg.D_cmp))
    emb = tn.add(tn.matmul(flat, p["W_fc"]), p["b_fc"])
    logits = tn.add(tn.matmul(emb, p["W_cls"]), p["b_cls"])
    if not batched:
        return MhfaOutput(tn.reshape(logits, (2,)), tn.reshape(emb, (cfg.E,)), tn.reshape(A, (T, cfg.H)))
    return MhfaOutput(logits, emb, A)


def nll_loss(logits, labels) -> Tensor:
    """Cross-entropy of 2-way logits; labels use spoof=0, bonafide=1."""
    logits = tn.as_tensor(logits)
    if logits.ndim == 1:
        logits = tn.reshape(logits, (1, logits.shape[0]))
    return tn.nll(tn.log_softmax(logits, axis=-1), np.atleast_1d(labels))


def detection_scores(logits: Tensor | np.ndarray) -> np.ndarray:
    """Bonafide-minus-spoof logit difference (higher means more bonafide)."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    arr = arr.reshape(-1, 2)
    return arr[:, BONAFIDE] - arr[:, SPOOF]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MHFACKPT"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: MhfaParams, cfg: MhfaConfig, meta: dict | None = None) -> None:
    """Write magic, u64 header length, JSON header, then float32 blobs."""
    registry = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        registry.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": cfg.to_dict(), "params": registry, "meta": meta or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[MhfaParams, MhfaConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an MHFA checkpoint")
    (hlen,) = _LEN.unpack_from(raw, 8)
    start = 8 + _LEN.size
    header = json.loads(raw[start:start + hlen])
    body = raw[start + hlen:]
    arrays = {}
    for item in header["params"]:
        lo, n = item["offset"], item["nbytes"]
        if lo + n > len(body):
            raise CheckpointError(f"{path}: parameter {item['name']} runs past end of file")
        arrays[item["name"]] = np.frombuffer(body[lo:lo + n], dtype="<f4").reshape(item["shape"]).astype(np.float32)
    return MhfaParams(**arrays), MhfaConfig(**header["config"]), header.get("meta", {})
