"""AdamW optimisation loop with seeded shuffling, loss logging and checkpoints.

All randomness is derived from ``(seed, epoch)`` for shuffling and
``(seed, step)`` for the reparameterisation noise, so a run resumed from any
checkpoint follows the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DataError, NonFiniteError
from .losses import KL_CONVENTION, NORM_CONVENTION, LossWeights, beta_schedule, total_loss
from .network import M3AE, ModelConfig
from .volume_io import load_checkpoint, save_checkpoint
from .warp import CONVENTION

log = logging.getLogger(__name__)

_SHUFFLE_STREAM = 0
_NOISE_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    warmup_epochs: int = 10
    checkpoint_every: int = 1
    grad_clip: float = 0.0

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("eps, weight_decay and grad_clip must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               cfg: TrainConfig) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay; returns the new parameter arrays.

    Raises NonFiniteError naming the parameter, before touching any state, if a
    gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
    t = state.step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p
        new[name] = (p - cfg.lr * update).astype(p.dtype, copy=False)
    state.step = t
    return new


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * s).astype(grads[k].dtype, copy=False)
    return norm


# -- checkpoints ---------------------------------------------------------


def save_model(path, model: M3AE, weights: LossWeights, train_cfg: TrainConfig | None = None,
               opt_state: OptimizerState | None = None) -> None:
    tensors = dict(model.state_dict())
    step = 0
    if opt_state is not None:
        step = opt_state.step
        for name, arr in opt_state.m.items():
            tensors[f"optim.m.{name}"] = arr
        for name, arr in opt_state.v.items():
            tensors[f"optim.v.{name}"] = arr
    meta = {
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "displacement_convention": CONVENTION,
        "kl_convention": KL_CONVENTION,
        "norm_convention": NORM_CONVENTION,
    }
    seed = train_cfg.seed if train_cfg else 0
    save_checkpoint(path, tensors, model.config.to_dict(), weights.to_dict(), seed, step, meta)


@dataclass
class LoadedModel:
    model: M3AE
    weights: LossWeights
    train_config: TrainConfig | None
    opt_state: OptimizerState
    step: int
    ignored: list[str]


def load_model(path, expect: ModelConfig | None = None, strict: bool = True, dtype=np.float32) -> LoadedModel:
    """Rebuild a model (and optimizer state) from a checkpoint.

    ``expect`` rejects checkpoints whose model config differs. With
    ``strict=False`` unknown tensors are skipped and listed in ``ignored``.
    """
    ck = load_checkpoint(path)
    config = ModelConfig.from_dict(ck["model_config"])
    if expect is not None and config != expect:
        diffs = [f"{k}: checkpoint={a!r} expected={b!r}"
                 for k, a, b in ((f.name, getattr(config, f.name), getattr(expect, f.name))
                                 for f in dataclasses.fields(ModelConfig)) if a != b]
        raise ConfigError(f"{path}: config mismatch ({'; '.join(diffs)})")
    tensors = ck["tensors"]
    if "buffer.template" not in tensors:
        raise CheckpointError(f"{path}: no template tensor")
    model = M3AE(config, template=tensors["buffer.template"], dtype=dtype)
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    expected = set(model.params) | {"buffer.template"}
    unknown = sorted(set(state) - expected)
    missing = sorted(expected - set(state))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    if unknown and strict:
        raise CheckpointError(f"{path}: unknown tensors {unknown} (load with strict=False to ignore)")
    model.load_state_dict({k: state[k] for k in expected})
    opt = OptimizerState(step=int(ck["step"]))
    for k, v in tensors.items():
        if k.startswith("optim.m."):
            opt.m[k[len("optim.m."):]] = v
        elif k.startswith("optim.v."):
            opt.v[k[len("optim.v."):]] = v
    tc = ck["meta"].get("train_config")
    return LoadedModel(model, LossWeights.from_dict(ck["loss_weights"]),
                       TrainConfig.from_dict(tc) if tc else None, opt, int(ck["step"]), unknown)


# -- training loop -------------------------------------------------------


@dataclass
class TrainResult:
    records: list[dict]
    step: int

    def epoch_means(self, key: str = "recon_l1") -> dict[int, float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.records:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _SHUFFLE_STREAM, epoch]).permutation(n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, _NOISE_STREAM, step])


def train(model: M3AE, volumes: np.ndarray, cfg: TrainConfig, weights: LossWeights, *,
          log_path=None, ckpt_path=None, opt_state: OptimizerState | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train ``model`` on ``volumes`` ([n, D, H, W]) until ``cfg.epochs`` or ``max_steps``.

    Passing the ``opt_state`` of a checkpoint resumes at its step counter.
    """
    cfg.validate()
    if not model.config.direct_output:
        weights.validate(model.config.levels)
    volumes = np.asarray(volumes, dtype=np.float32)
    if volumes.ndim != 4 or len(volumes) == 0:
        raise DataError(f"expected a non-empty [n, D, H, W] array, got shape {volumes.shape}")
    if tuple(volumes.shape[1:]) != model.config.resolution:
        raise DataError(f"data grid {volumes.shape[1:]} != model resolution {model.config.resolution}")

    n = len(volumes)
    per_epoch = math.ceil(n / cfg.batch_size)
    opt = opt_state if opt_state is not None else OptimizerState()
    step = opt.step
    records: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        for epoch in range(step // per_epoch, cfg.epochs):
            order = shuffle_order(cfg.seed, epoch, n)
            beta = beta_schedule(epoch, cfg.warmup_epochs, weights.beta)
            for b in range(step - epoch * per_epoch, per_epoch):
                if max_steps is not None and step >= max_steps:
                    if ckpt_path:
                        save_model(ckpt_path, model, weights, cfg, opt)
                    return TrainResult(records, step)
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x = Tensor(volumes[idx][:, None], dtype=model.dtype)
                model.zero_grad()
                kept = f"last good checkpoint kept at {ckpt_path}" if ckpt_path else "no checkpoint written"
                try:
                    _, trace, latent = model.forward(x, step_rng(cfg.seed, step))
                    bd = total_loss(x, trace, latent.mu, latent.logvar, weights, beta)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"step {step}: {exc}; {kept}") from exc
                if not math.isfinite(bd.total):
                    raise NonFiniteError(f"step {step}: loss became non-finite; {kept}")
                bd.tensor.backward()
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for k, p in model.params.items()}
                grad_norm = clip_gradients(grads, cfg.grad_clip)
                new = adamw_step({k: p.data for k, p in model.params.items()}, grads, opt, cfg)
                for k, p in model.params.items():
                    p.data = new[k]
                model.zero_grad()
                step = opt.step
                rec = {"step": step, "epoch": epoch, **bd.to_record(), "lr": cfg.lr,
                       "grad_norm": grad_norm, "wall_time": time.perf_counter() - t0}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
            log.info("epoch %d done: recon_l1 %.5f", epoch,
                     np.mean([r["recon_l1"] for r in records if r["epoch"] == epoch] or [float("nan")]))
            if ckpt_path and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                save_model(ckpt_path, model, weights, cfg, opt)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(records, step)


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
