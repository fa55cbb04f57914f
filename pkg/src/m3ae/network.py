"""Encoder and the two decoder backbones (deformation and intensity).

The decoders map halves of the latent code to per-level transform parameters
which the cascade applies to the fixed template. ``direct_output`` swaps them
for a single decoder that emits voxels, i.e. a plain beta-VAE.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cascade import CascadeTrace, LevelTransforms, level_shape, run_cascade
from .errors import ConfigError, ShapeError
from .warp import integrate_velocity


@dataclass(frozen=True)
class ModelConfig:
    base_grid: tuple[int, int, int] = (2, 3, 2)
    levels: int = 3
    channels: tuple[int, ...] = (32, 16, 8)
    latent_dim: int = 64
    slope: float = 0.2
    integrate: bool = True
    squaring_steps: int = 6
    direct_output: bool = False
    conv_impl: str = "im2col"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base_grid", tuple(int(b) for b in self.base_grid))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return level_shape(self.base_grid, self.levels)

    def validate(self) -> "ModelConfig":
        if len(self.base_grid) != 3 or min(self.base_grid) < 1:
            raise ConfigError(f"base_grid must be three positive ints, got {self.base_grid}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(f"channels has {len(self.channels)} entries but levels = {self.levels}")
        if min(self.channels) < 1:
            raise ConfigError("channels must be positive")
        if self.latent_dim < 2 or self.latent_dim % 2:
            raise ConfigError(f"latent_dim must be even and >= 2, got {self.latent_dim}")
        if not 0 <= self.slope <= 1:
            raise ConfigError(f"slope must be in [0, 1], got {self.slope}")
        if self.squaring_steps < 1:
            raise ConfigError("squaring_steps must be >= 1")
        if self.conv_impl not in ad.CONV_IMPLS:
            raise ConfigError(f"conv_impl must be one of {ad.CONV_IMPLS}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["base_grid"] = list(self.base_grid)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


FULL_MODEL = ModelConfig(base_grid=(5, 6, 5), levels=4, channels=(128, 64, 32, 16), latent_dim=512)
DESK_MODEL = ModelConfig()


@dataclass
class LatentCode:
    z: Tensor
    mu: Tensor
    logvar: Tensor
    eps: np.ndarray | None = None

    @property
    def z_phi(self) -> Tensor:
        half = self.z.shape[1] // 2
        return ad.narrow(self.z, 1, 0, half)

    @property
    def z_A(self) -> Tensor:
        half = self.z.shape[1] // 2
        return ad.narrow(self.z, 1, half, half)


class M3AE:
    """Metamorphic autoencoder (or its direct-output beta-VAE counterpart)."""

    def __init__(self, config: ModelConfig, template: np.ndarray | None = None, dtype=np.float32):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.init_seed)
        self._build()
        del self._rng
        if template is None:
            from .synthetic import make_template
            template = make_template(config.resolution)
        template = np.asarray(template)
        if template.ndim == 3:
            template = template[None, None]
        if tuple(template.shape[2:]) != config.resolution or template.shape[:2] != (1, 1):
            raise ShapeError(f"template shape {template.shape} does not match resolution {config.resolution}")
        self.template = Tensor(template, dtype=self.dtype)

    # -- construction ---------------------------------------------------

    def _param(self, name: str, shape: tuple[int, ...], fan_in: int, zero: bool = False) -> None:
        if zero:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / ((1.0 + self.config.slope ** 2) * fan_in))
            data = self._rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True, dtype=self.dtype, name=name)

    def _conv(self, name: str, cin: int, cout: int, zero: bool = False) -> None:
        self._param(f"{name}.weight", (cout, cin, 3, 3, 3), cin * 27, zero)
        self._param(f"{name}.bias", (cout,), 1, zero=True)

    def _linear(self, name: str, fin: int, fout: int) -> None:
        self._param(f"{name}.weight", (fout, fin), fin)
        self._param(f"{name}.bias", (fout,), 1, zero=True)

    def _build(self) -> None:
        cfg = self.config
        L, ch = cfg.levels, cfg.channels
        n_base = int(np.prod(cfg.base_grid))
        # encoder mirrors the decoder: channels reversed, full resolution first
        cin = 1
        for j in range(L):
            cout = ch[L - 1 - j]
            self._conv(f"encoder.down{j}.conv1", cin, cout)
            self._conv(f"encoder.down{j}.conv2", cout, cout)
            cin = cout
        self._linear("encoder.fc", ch[0] * n_base, 2 * cfg.latent_dim)

        if cfg.direct_output:
            self._backbone("decoder", cfg.latent_dim, L, head_channels=1, chained=False)
        else:
            half = cfg.latent_dim // 2
            if L > 1:
                self._backbone("decoder_phi", half, L - 1, head_channels=3, chained=True)
            self._backbone("decoder_a", half, L, head_channels=1, chained=True)

    def _backbone(self, prefix: str, zdim: int, n_blocks: int, head_channels: int, chained: bool) -> None:
        ch = self.config.channels
        self._linear(f"{prefix}.fc", zdim, ch[0] * int(np.prod(self.config.base_grid)))
        for i in range(n_blocks):
            if i == 0:
                cin = ch[0]
            else:
                cin = ch[i - 1] + (head_channels if chained else 0)
            self._conv(f"{prefix}.up{i}.conv1", cin, ch[i])
            self._conv(f"{prefix}.up{i}.conv2", ch[i], ch[i])
            if chained or i == n_blocks - 1:
                self._conv(f"{prefix}.up{i}.head", ch[i], head_channels, zero=True)

    # -- parameters -----------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.params.items()}
        state["buffer.template"] = self.template.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into the model; returns the names that were ignored."""
        expected = set(self.params) | {"buffer.template"}
        unknown = sorted(set(state) - expected)
        missing = sorted(expected - set(state))
        if strict and (unknown or missing):
            raise ShapeError(f"state mismatch: unknown {unknown}, missing {missing}")
        for name in expected & set(state):
            target = self.template if name == "buffer.template" else self.params[name]
            arr = np.asarray(state[name])
            if arr.shape != target.shape:
                raise ShapeError(f"state tensor {name}: shape {arr.shape} != model shape {target.shape}")
            target.data = np.ascontiguousarray(arr, dtype=self.dtype)
        return unknown

    # -- forward pieces -------------------------------------------------

    def _conv_apply(self, name: str, h: Tensor) -> Tensor:
        p = self.params
        return ad.conv3d(h, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, padding=1, impl=self.config.conv_impl)

    def _act(self, h: Tensor) -> Tensor:
        return ad.leaky_relu(h, self.config.slope)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior mean and log-variance, each [N, latent_dim]."""
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != cfg.resolution:
            raise ShapeError(f"encode: expected [N,1,{','.join(map(str, cfg.resolution))}], got {x.shape}")
        h = x
        for j in range(cfg.levels):
            h = self._act(self._conv_apply(f"encoder.down{j}.conv1", h))
            h = ad.resize_trilinear(h, 0.5)
            h = self._act(self._conv_apply(f"encoder.down{j}.conv2", h))
        h = ad.reshape(h, (x.shape[0], -1))
        out = ad.linear(h, self.params["encoder.fc.weight"], self.params["encoder.fc.bias"])
        Z = cfg.latent_dim
        return ad.narrow(out, 1, 0, Z), ad.narrow(out, 1, Z, Z)

    def reparameterize(self, mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> LatentCode:
        eps = rng.standard_normal(mu.shape).astype(self.dtype)
        z = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(eps, dtype=self.dtype)))
        return LatentCode(z=z, mu=mu, logvar=logvar, eps=eps)

    def _run_backbone(self, prefix: str, z: Tensor, n_blocks: int, chained: bool) -> list[Tensor]:
        cfg, p = self.config, self.params
        N = z.shape[0]
        h = self._act(ad.linear(z, p[f"{prefix}.fc.weight"], p[f"{prefix}.fc.bias"]))
        h = ad.reshape(h, (N, cfg.channels[0]) + cfg.base_grid)
        heads = []
        for i in range(n_blocks):
            h = self._act(self._conv_apply(f"{prefix}.up{i}.conv1", h))
            h = ad.resize_trilinear(h, 2)
            h = self._act(self._conv_apply(f"{prefix}.up{i}.conv2", h))
            if chained or i == n_blocks - 1:
                o = self._conv_apply(f"{prefix}.up{i}.head", h)
                heads.append(o)
                if chained and i < n_blocks - 1:
                    h = ad.concat([h, o], axis=1)
        return heads

    def _check_latent(self, z: Tensor) -> None:
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent must be [N,{self.config.latent_dim}], got {z.shape}")

    def decode(self, z: Tensor) -> list[LevelTransforms]:
        """Per-level transforms, coarse to fine."""
        cfg = self.config
        if cfg.direct_output:
            raise ConfigError("decode() yields transforms; a direct-output model has none (use generate)")
        self._check_latent(z)
        half = cfg.latent_dim // 2
        z_phi, z_a = ad.narrow(z, 1, 0, half), ad.narrow(z, 1, half, half)
        a_heads = self._run_backbone("decoder_a", z_a, cfg.levels, chained=True)
        v_heads = self._run_backbone("decoder_phi", z_phi, cfg.levels - 1, chained=True) if cfg.levels > 1 else []
        out = []
        for i in range(cfg.levels):
            if i < cfg.levels - 1:
                v = v_heads[i]
                phi = integrate_velocity(v, cfg.squaring_steps) if cfg.integrate else v
                out.append(LevelTransforms(level=i + 1, A=a_heads[i], phi=phi, velocity=v))
            else:
                out.append(LevelTransforms(level=i + 1, A=a_heads[i]))
        return out

    def generate(self, z: Tensor) -> CascadeTrace:
        """Decode ``z`` all the way to volumes."""
        if self.config.direct_output:
            self._check_latent(z)
            x_hat = self._run_backbone("decoder", z, self.config.levels, chained=False)[0]
            return CascadeTrace([x_hat])
        transforms = self.decode(z)
        return run_cascade(self.template, transforms)

    def forward(self, x: Tensor, rng: np.random.Generator) -> tuple[Tensor, CascadeTrace, LatentCode]:
        mu, logvar = self.encode(x)
        latent = self.reparameterize(mu, logvar, rng)
        trace = self.generate(latent.z)
        return trace.final, trace, latent

    __call__ = forward

    def reconstruct(self, x: np.ndarray | Tensor) -> CascadeTrace:
        """Deterministic reconstruction through the posterior mean."""
        with ad.no_grad():
            mu, _ = self.encode(x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype))
            return self.generate(mu)

    def sample(self, n: int, rng: np.random.Generator) -> CascadeTrace:
        """Volumes decoded from z ~ N(0, I)."""
        z = rng.standard_normal((n, self.config.latent_dim)).astype(self.dtype)
        with ad.no_grad():
            return self.generate(Tensor(z, dtype=self.dtype))
