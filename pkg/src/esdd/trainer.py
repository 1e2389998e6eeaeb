"""AdamW training with differential learning rates and warmup + cosine decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .features import Corpus, random_crop
from .mhfa import (
    BONAFIDE,
    FRONTEND_PARAMS,
    SPOOF,
    MhfaConfig,
    MhfaParams,
    init_params,
    mhfa_forward,
    nll_loss,
    save_checkpoint,
)
from .scoring import compute_eer, score_dataset
from .seeding import stream

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 8
    batch_size: int = 128
    base_lr: float = 5e-4
    final_lr: float = 1e-5
    warmup_epochs: int = 2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    frontend_lr_scale: float = 0.05
    seed: int = 0
    crop_frames: int = 200

    def __post_init__(self):
        if not 0 < self.final_lr <= self.base_lr:
            raise ConfigurationError("need 0 < final_lr <= base_lr")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < max_epochs")
        if not 0 < self.frontend_lr_scale <= 1:
            raise ConfigurationError("frontend_lr_scale must lie in (0, 1]")
        if self.batch_size < 1 or self.crop_frames < 1:
            raise ConfigurationError("batch_size and crop_frames must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamGroup:
    name: str
    names: list[str]
    lr_scale: float


def build_param_groups(params: MhfaParams, cfg: TrainConfig) -> tuple[ParamGroup, ParamGroup]:
    """Split into (backend, frontend); the adapter arrays form the front-end."""
    names = [k for k, _ in params.items()]
    front = [k for k in names if k in FRONTEND_PARAMS]
    back = [k for k in names if k not in FRONTEND_PARAMS]
    return ParamGroup("backend", back, 1.0), ParamGroup("frontend", front, cfg.frontend_lr_scale)


def lr_at_step(step: int, total_steps: int, warmup_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine annealing to ``final_lr``."""
    if step < warmup_steps:
        return cfg.base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: "MhfaParams | dict[str, np.ndarray]") -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float | dict[str, float],
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update with decoupled weight decay; returns new arrays.

    ``lr`` is either one rate or a per-parameter mapping.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {k!r}")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        rate = lr[k] if isinstance(lr, dict) else lr
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step = rate * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)) + rate * cfg.weight_decay * p
        new_p[k] = (p - step).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, OptimizerState(new_m, new_v, t)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    dev_eer: float | None
    lr_backend: float
    lr_frontend: float


@dataclass
class FitResult:
    params: MhfaParams
    best_params: MhfaParams
    best_dev_eer: float | None
    log: list[EpochLog] = field(default_factory=list)
    total_steps: int = 0


def _label_index(label: str) -> int:
    return BONAFIDE if label == "bonafide" else SPOOF


def fit(
    model_cfg: MhfaConfig,
    corpus: Corpus,
    cfg: TrainConfig,
    workdir: str | Path | None = None,
    params: MhfaParams | None = None,
    train_split: str = "train",
    dev_split: str | None = "dev",
) -> FitResult:
    """Train the back-end on ``train_split`` and track dev EER per epoch.

    Randomness comes from separate streams (init, shuffle, crop, dsu) derived
    from ``cfg.seed``.  With ``workdir`` the per-epoch log, the best-dev and
    the final checkpoints are written there.
    """
    train = corpus.split(train_split)
    if not train:
        raise ConfigurationError(f"split {train_split!r} is empty")
    if len({e.label for e in train}) < 2:
        raise ConfigurationError("training data must contain both bonafide and spoof utterances")
    dev = corpus.split(dev_split) if dev_split else []
    if dev and len({e.label for e in dev}) < 2:
        dev = []

    if params is None:
        params = init_params(model_cfg, stream(cfg.seed, "init"))
    shuffle_rng = stream(cfg.seed, "shuffle")
    crop_rng = stream(cfg.seed, "crop")
    dsu_rng = stream(cfg.seed, "dsu")

    backend, frontend = build_param_groups(params, cfg)
    scale = {k: backend.lr_scale for k in backend.names} | {k: frontend.lr_scale for k in frontend.names}
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    arrays = params.as_dict()
    state = OptimizerState.zeros_like(params)
    labels = np.array([_label_index(e.label) for e in train])
    step = 0
    history: list[EpochLog] = []
    best_eer, best_params = None, MhfaParams(**arrays)
    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "train_log.jsonl").write_text("")

    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(len(train))
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = np.stack([random_crop(corpus.stack(train[i]), cfg.crop_frames, crop_rng).values for i in idx])
            leaves = {k: tn.Tensor(a, requires_grad=True) for k, a in arrays.items()}
            out = mhfa_forward(batch, leaves, model_cfg, mode="train", rng=dsu_rng)
            loss = nll_loss(out.logits, labels[idx])
            grads = tn.backward(loss)
            g = {k: grads.of(t) for k, t in leaves.items()}
            lr = lr_at_step(step, total_steps, warmup_steps, cfg)
            arrays, state = adamw_step(arrays, g, state, {k: lr * s for k, s in scale.items()}, cfg)
            losses.append(loss.item())
            step += 1

        current = MhfaParams(**arrays)
        dev_eer = None
        if dev:
            dev_eer, _ = compute_eer(score_dataset(current, model_cfg, corpus, dev, cfg.crop_frames))
            if best_eer is None or dev_eer < best_eer:
                best_eer, best_params = dev_eer, current
                if workdir is not None:
                    save_checkpoint(workdir / "best.ckpt", current, model_cfg, {"epoch": epoch, "dev_eer": dev_eer})
        entry = EpochLog(epoch, float(np.mean(losses)), dev_eer, lr, lr * frontend.lr_scale)
        history.append(entry)
        log.info("epoch %d loss %.4f dev_eer %s lr %.3g", epoch, entry.mean_loss, dev_eer, lr)
        if workdir is not None:
            with open(workdir / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(entry)) + "\n")

    final = MhfaParams(**arrays)
    if best_eer is None:
        best_params = final
    if workdir is not None:
        save_checkpoint(workdir / "final.ckpt", final, model_cfg, {"epoch": cfg.max_epochs - 1})
    return FitResult(final, best_params, best_eer, history, total_steps)
