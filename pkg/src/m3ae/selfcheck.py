"""Built-in numerical self-tests: gradient checks and warp invariants.

Shared by the ``selfcheck`` command and the test suite. Every check is
deterministic and runs in float64 on small inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cascade import CascadeTrace, LevelTransforms, run_cascade
from .gradcheck import GradCheckResult, check_gradients, project
from .losses import LossWeights, kl_divergence, regrecon_loss, total_loss
from .synthetic import make_template, smooth_noise
from .warp import compose_fields, divergence, integrate_velocity, spatial_gradient, warp

OP_RTOL = 1e-4
END_TO_END_RTOL = 1e-3


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _fractional_field(rng, shape, lo=0.15, hi=0.85) -> np.ndarray:
    """Displacements whose fractional parts stay away from the trilinear kinks."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    whole = rng.integers(-1, 2, size=shape)
    return whole + sign * mag


def _smooth(rng, res, channels, scale) -> np.ndarray:
    v = smooth_noise(rng, res, channels, 2)
    return scale * v / np.abs(v).max()


# -- gradient cases ------------------------------------------------------


def _conv_case(impl: str, stride: int, padding: int):
    rng = _rng(1)
    x, w, b = rng.normal(size=(2, 3, 5, 6, 4)), rng.normal(size=(4, 3, 3, 3, 3)), rng.normal(size=4)
    return (lambda t: project(ad.conv3d(t[0], t[1], t[2], stride, padding, impl)), [x, w, b])


def _two_level_cascade():
    rng = _rng(7)
    template = make_template((8, 12, 8))[None, None]
    A1, v1 = rng.normal(0, 0.1, size=(1, 1, 4, 6, 4)), _smooth(rng, (4, 6, 4), 3, 0.6)[None]
    A2 = rng.normal(0, 0.1, size=(1, 1, 8, 12, 8))
    x = np.clip(template + rng.normal(0, 0.05, size=template.shape), 0, 1)
    mu, lv = rng.normal(size=(1, 6)), rng.normal(0, 0.3, size=(1, 6))
    weights = LossWeights(beta=0.5, gamma1=(0.25, None), gamma2=(0.6, 2.4),
                          gamma3=(0.6, None), gamma4=(0.6, None), gamma5=(0.6, None))

    def fn(t):
        tpl = Tensor(template, dtype=np.float64)
        tr = [LevelTransforms(1, t[0], integrate_velocity(t[1], 6), t[1]), LevelTransforms(2, t[2])]
        trace = run_cascade(tpl, tr)
        return total_loss(Tensor(x, dtype=np.float64), trace, t[3], t[4], weights, weights.beta).tensor

    return fn, [A1, v1, A2, mu, lv]


def _loss_terms_case():
    rng = _rng(9)
    x = rng.uniform(0, 1, size=(2, 1, 8, 12, 8))
    xh = rng.uniform(0, 1, size=(2, 1, 4, 6, 4))
    A = rng.normal(0, 0.1, size=(2, 1, 4, 6, 4))
    v = rng.normal(0, 0.3, size=(2, 3, 4, 6, 4))
    weights = LossWeights(beta=1.0, gamma1=(0.25, None), gamma2=(0.6, 2.4),
                          gamma3=(0.6, None), gamma4=(1.2, None), gamma5=(0.6, None))

    def fn(t):
        trace = CascadeTrace([t[1], Tensor(np.zeros((2, 1, 8, 12, 8)), dtype=np.float64)])
        part, _ = regrecon_loss(1, Tensor(x, dtype=np.float64), trace, LevelTransforms(1, t[2], t[3], t[3]), weights)
        return part

    return fn, [x, xh, A, v], [1, 2, 3]


def gradient_cases() -> list[tuple[str, Callable, list, list | None, float, int | None]]:
    """(name, fn, inputs, wrt, rtol, max elements per input)."""
    rng = _rng(0)
    cases = []
    for impl in ad.CONV_IMPLS:
        for stride, padding in ((1, 1), (2, 1), (1, 0)):
            fn, inputs = _conv_case(impl, stride, padding)
            cases.append((f"conv3d[{impl},s{stride},p{padding}]", fn, inputs, None, OP_RTOL, 60))
    cases += [
        ("linear", lambda t: project(ad.linear(t[0], t[1], t[2])),
         [rng.normal(size=(3, 7)), rng.normal(size=(5, 7)), rng.normal(size=5)], None, OP_RTOL, None),
        ("leaky_relu", lambda t: project(ad.leaky_relu(t[0], 0.2)),
         [_fractional_field(rng, (2, 3, 4))], None, OP_RTOL, None),
        ("resize_up2", lambda t: project(ad.resize_trilinear(t[0], 2)),
         [rng.normal(size=(1, 2, 3, 4, 3))], None, OP_RTOL, None),
        ("resize_down2", lambda t: project(ad.resize_trilinear(t[0], 0.5)),
         [rng.normal(size=(1, 2, 4, 6, 4))], None, OP_RTOL, None),
        ("avg_pool3d", lambda t: project(ad.avg_pool3d(t[0], 2)),
         [rng.normal(size=(1, 2, 4, 6, 4))], None, OP_RTOL, None),
        ("warp[volume]", lambda t: project(warp(t[0], t[1])),
         [rng.normal(size=(2, 2, 4, 5, 4)), _fractional_field(rng, (2, 3, 4, 5, 4))], [0], OP_RTOL, None),
        ("warp[field]", lambda t: project(warp(t[0], t[1])),
         [rng.normal(size=(2, 2, 4, 5, 4)), _fractional_field(rng, (2, 3, 4, 5, 4))], [1], OP_RTOL, None),
        ("compose_fields", lambda t: project(compose_fields(t[0], t[1])),
         [rng.normal(0, 0.5, size=(1, 3, 4, 5, 4)), _fractional_field(rng, (1, 3, 4, 5, 4))], None, OP_RTOL, None),
        ("integrate_velocity", lambda t: project(integrate_velocity(t[0], 6)),
         [_smooth(rng, (5, 6, 5), 3, 0.8)[None]], None, OP_RTOL, None),
        ("spatial_gradient", lambda t: project(spatial_gradient(t[0])),
         [rng.normal(size=(1, 3, 4, 5, 3))], None, OP_RTOL, None),
        ("divergence", lambda t: project(divergence(t[0])),
         [rng.normal(size=(1, 3, 4, 5, 3))], None, OP_RTOL, None),
        ("kl_divergence", lambda t: kl_divergence(t[0], t[1]),
         [rng.normal(size=(3, 8)), rng.normal(0, 0.5, size=(3, 8))], None, OP_RTOL, None),
    ]
    fn, inputs, wrt = _loss_terms_case()
    cases.append(("level_loss_terms", fn, inputs, wrt, OP_RTOL, None))
    fn, inputs = _two_level_cascade()
    cases.append(("cascade_2level_end_to_end", fn, inputs, None, END_TO_END_RTOL, 40))
    return cases


def run_gradient_checks() -> list[CheckOutcome]:
    out = []
    for name, fn, inputs, wrt, rtol, cap in gradient_cases():
        t0 = time.perf_counter()
        res: GradCheckResult = check_gradients(fn, inputs, name, rtol=rtol, max_per_input=cap, wrt=wrt)
        out.append(CheckOutcome(name, res.passed,
                                f"max rel err {res.max_rel_err:.2e} (tol {rtol:.0e}, {res.n_checked} elements)",
                                time.perf_counter() - t0))
    return out


# -- warp invariants -----------------------------------------------------


def check_zero_field_identity() -> CheckOutcome:
    rng = _rng(3)
    vol = rng.normal(size=(2, 2, 5, 6, 7)).astype(np.float32)
    out = warp(Tensor(vol), Tensor(np.zeros((2, 3, 5, 6, 7), np.float32))).data
    ok = np.array_equal(out, vol)
    return CheckOutcome("warp_zero_field_identity", ok, "bitwise equal" if ok else "output differs from input")


def check_inverse_roundtrip(max_v: float = 0.5) -> CheckOutcome:
    """exp(v) composed with exp(-v) is close to the identity for smooth v."""
    rng = _rng(4)
    v = Tensor(_smooth(rng, (12, 14, 12), 3, max_v)[None], dtype=np.float64)
    with ad.no_grad():
        fwd = integrate_velocity(v, 6)
        bwd = integrate_velocity(ad.scale(v, -1.0), 6)
        err = float(np.abs(compose_fields(fwd, bwd).data).mean())
    tol = 0.1 * max_v
    return CheckOutcome("exp_inverse_roundtrip", err < tol, f"mean error {err:.2e} (tol {tol:.2e})")


def check_constant_additivity() -> CheckOutcome:
    """Composing constant displacements adds them away from the clamped boundary."""
    shape = (1, 3, 10, 11, 12)
    a = np.broadcast_to(np.array([0.3, -0.4, 0.25])[None, :, None, None, None], shape).copy()
    b = np.broadcast_to(np.array([-0.6, 0.7, 0.5])[None, :, None, None, None], shape).copy()
    with ad.no_grad():
        c = compose_fields(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    interior = (slice(None), slice(None), slice(2, -2), slice(2, -2), slice(2, -2))
    err = float(np.abs(c[interior] - (a + b)[interior]).max())
    return CheckOutcome("constant_field_additivity", err < 1e-12, f"max interior error {err:.2e}")


def run_warp_checks() -> list[CheckOutcome]:
    out = []
    for fn in (check_zero_field_identity, check_inverse_roundtrip, check_constant_additivity):
        t0 = time.perf_counter()
        res = fn()
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out


def run_all() -> list[CheckOutcome]:
    return run_gradient_checks() + run_warp_checks()
