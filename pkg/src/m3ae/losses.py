"""Training objective: beta-VAE ELBO plus per-level regularised reconstruction.

All norms are per-element means so the weights do not depend on grid size.
The KL term is summed over latent dimensions and averaged over the batch.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import autodiff as ad
from .autodiff import Tensor
from .cascade import CascadeTrace, LevelTransforms
from .errors import ConfigError
from .warp import divergence, spatial_gradient

KL_CONVENTION = "0.5 * mean_batch(sum_latent(mu^2 + sigma^2 - 1 - log sigma^2))"
NORM_CONVENTION = "per-element mean"

TERMS = ("interm_l1", "a_decay", "phi_grad", "phi_div", "phi_decay")
_GAMMA_FOR_TERM = dict(zip(TERMS, ("gamma1", "gamma2", "gamma3", "gamma4", "gamma5")))


@dataclass(frozen=True)
class LossWeights:
    """Loss scaling terms; gamma lists hold one entry per level, None where the term does not exist."""

    beta: float = 6.0
    gamma1: tuple = (0.25, 0.25, 0.5, None)
    gamma2: tuple = (0.6, 1.2, 1.2, 2.4)
    gamma3: tuple = (0.6, 1.2, 1.2, None)
    gamma4: tuple = (0.6, 1.2, 1.2, None)
    gamma5: tuple = (0.6, 1.2, 1.2, None)

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "gamma4", "gamma5"):
            vals = getattr(self, name)
            object.__setattr__(self, name, tuple(None if v is None else float(v) for v in vals))

    @property
    def levels(self) -> int:
        return len(self.gamma2)

    def validate(self, levels: int | None = None) -> "LossWeights":
        L = self.levels if levels is None else levels
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        for name in ("gamma1", "gamma2", "gamma3", "gamma4", "gamma5"):
            vals = getattr(self, name)
            if len(vals) != L:
                raise ConfigError(f"{name} has {len(vals)} entries, expected one per level ({L})")
            for i, v in enumerate(vals, start=1):
                exists = name == "gamma2" or i < L
                if v is None and exists:
                    raise ConfigError(f"{name}[level {i}] is missing")
                if v is not None and not exists:
                    raise ConfigError(f"{name}[level {i}] weights a term that does not exist at the last level")
                if v is not None and v < 0:
                    raise ConfigError(f"{name}[level {i}] must be >= 0, got {v}")
        return self

    def gamma(self, term: str, level: int) -> float | None:
        return getattr(self, _GAMMA_FOR_TERM[term])[level - 1]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)


FULL_WEIGHTS = LossWeights()


@dataclass
class LossBreakdown:
    recon_l1: float
    kl: float
    beta: float
    levels: list[dict] = field(default_factory=list)
    total: float = 0.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def weighted_sum(self, weights: LossWeights) -> float:
        s = self.recon_l1 + self.beta * self.kl
        for i, comps in enumerate(self.levels, start=1):
            for term, value in comps.items():
                if value is not None:
                    s += weights.gamma(term, i) * value
        return s

    def to_record(self) -> dict:
        rec = {"recon_l1": self.recon_l1, "kl": self.kl, "beta": self.beta, "total": self.total}
        for i, comps in enumerate(self.levels, start=1):
            for term, value in comps.items():
                if value is not None:
                    rec[f"level{i}.{term}"] = value
        return rec


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    inner = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.add(logvar, 1.0))
    return ad.scale(ad.sum(inner), 0.5 / mu.shape[0])


def elbo_loss(x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor, beta: float) -> tuple[Tensor, dict]:
    recon = ad.mean_abs(ad.sub(x, x_hat))
    kl = kl_divergence(mu, logvar)
    return ad.add(recon, ad.scale(kl, beta)), {"recon_l1": recon, "kl": kl}


def regrecon_loss(level: int, x: Tensor, trace: CascadeTrace, tr: LevelTransforms,
                  weights: LossWeights) -> tuple[Tensor | None, dict]:
    """Weighted intermediate-reconstruction and transform-regularisation terms of one level.

    The intermediate target is ``x`` average-pooled to the level's grid. The
    deformation penalties act on the decoder's raw (pre-integration) output.
    """
    L = len(trace.levels)
    if not 1 <= level <= L:
        raise ConfigError(f"level {level} out of range 1..{L}")
    comps: dict[str, Tensor | None] = dict.fromkeys(TERMS)
    if level < L:
        x_hat_i = trace.levels[level - 1]
        target = ad.avg_pool3d(x, 2 ** (L - level))
        comps["interm_l1"] = ad.mean_abs(ad.sub(target, x_hat_i))
        v = tr.velocity if tr.velocity is not None else tr.phi
        comps["phi_grad"] = ad.mean_sq(spatial_gradient(v))
        comps["phi_div"] = ad.mean_sq(divergence(v))
        comps["phi_decay"] = ad.mean_sq(v)
    comps["a_decay"] = ad.mean_sq(tr.A)
    total = None
    for term, value in comps.items():
        if value is None:
            continue
        g = weights.gamma(term, level)
        if g is None:
            raise ConfigError(f"no weight for {term} at level {level}")
        part = ad.scale(value, g)
        total = part if total is None else ad.add(total, part)
    return total, comps


def total_loss(x: Tensor, trace: CascadeTrace, mu: Tensor, logvar: Tensor,
               weights: LossWeights, beta: float) -> LossBreakdown:
    """ELBO plus the sum of all per-level terms, with every component recorded."""
    total, elbo = elbo_loss(x, trace.final, mu, logvar, beta)
    levels = []
    if trace.transforms:
        weights.validate(len(trace.transforms))
        for tr in trace.transforms:
            part, comps = regrecon_loss(tr.level, x, trace, tr, weights)
            total = ad.add(total, part)
            levels.append({k: (None if v is None else v.item()) for k, v in comps.items()})
    return LossBreakdown(
        recon_l1=elbo["recon_l1"].item(),
        kl=elbo["kl"].item(),
        beta=float(beta),
        levels=levels,
        total=total.item(),
        tensor=total,
    )


def beta_schedule(epoch: int, warmup_epochs: int, beta_final: float) -> float:
    """Linear KL warm-up from 0 to ``beta_final`` over ``warmup_epochs`` epochs."""
    if warmup_epochs < 1:
        raise ConfigError("warmup_epochs must be >= 1")
    return beta_final * min(1.0, epoch / warmup_epochs)
