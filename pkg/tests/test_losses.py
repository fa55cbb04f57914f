import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3ae.autodiff import Tensor
from m3ae.cascade import CascadeTrace, LevelTransforms, level_shape
from m3ae.config import load_config
from m3ae.errors import ConfigError
from m3ae.losses import LossWeights, beta_schedule, kl_divergence, regrecon_loss, total_loss

from loss_oracle import objective

# scaling terms of the full-size setting, levels 1..4 (None: term absent at that level)
FULL_GAMMAS = {
    "gamma1": (0.25, 0.25, 0.5, None),
    "gamma2": (0.6, 1.2, 1.2, 2.4),
    "gamma3": (0.6, 1.2, 1.2, None),
    "gamma4": (0.6, 1.2, 1.2, None),
    "gamma5": (0.6, 1.2, 1.2, None),
}


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def random_instance(seed, base=(2, 3, 2), L=4, n=2):
    rng = np.random.default_rng(seed)
    shapes = [level_shape(base, i) for i in range(1, L + 1)]
    x = rng.uniform(0, 1, size=(n, 1) + shapes[-1])
    levels = [rng.uniform(0, 1, size=(n, 1) + s) for s in shapes]
    As = [rng.normal(0, 0.1, size=(n, 1) + s) for s in shapes]
    vs = [rng.normal(0, 0.5, size=(n, 3) + s) for s in shapes[:-1]]
    mu = rng.normal(size=(n, 16))
    logvar = rng.normal(0, 0.5, size=(n, 16))
    return x, levels, As, vs, mu, logvar


def run_total(inst, weights, beta):
    x, levels, As, vs, mu, logvar = inst
    L = len(levels)
    trs = [LevelTransforms(i + 1, T(As[i]), T(vs[i]) if i < L - 1 else None, T(vs[i]) if i < L - 1 else None)
           for i in range(L)]
    trace = CascadeTrace([T(v) for v in levels], trs)
    return total_loss(T(x), trace, T(mu), T(logvar), weights, beta)


def test_full_preset_gammas_are_verbatim():
    w = load_config("full").loss
    assert w.beta == 6.0
    for name, vals in FULL_GAMMAS.items():
        assert getattr(w, name) == vals
    assert LossWeights() == w


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_total_loss_matches_oracle(seed):
    w = load_config("full").loss
    inst = random_instance(seed)
    got = run_total(inst, w, 3.7).total
    want = objective(*inst, 3.7, *(getattr(w, f"gamma{k}") for k in range(1, 6)))
    assert abs(got - want) <= 1e-6 * abs(want)


def test_breakdown_weighted_sum_matches_total():
    w = LossWeights()
    bd = run_total(random_instance(5), w, 2.0)
    assert bd.weighted_sum(w) == pytest.approx(bd.total, rel=1e-12)
    rec = bd.to_record()
    assert {"recon_l1", "kl", "beta", "total", "level1.phi_grad", "level4.a_decay"} <= set(rec)
    assert "level4.phi_grad" not in rec


def test_components_non_negative():
    bd = run_total(random_instance(6), LossWeights(), 6.0)
    assert bd.recon_l1 >= 0 and bd.kl >= 0
    for comps in bd.levels:
        assert all(v is None or v >= 0 for v in comps.values())


def test_kl_is_zero_at_prior():
    assert kl_divergence(T(np.zeros((4, 8))), T(np.zeros((4, 8)))).item() == 0.0
    # closed form for one dimension: 0.5 (mu^2 + s^2 - 1 - log s^2)
    got = kl_divergence(T([[1.0]]), T([[np.log(4.0)]])).item()
    assert got == pytest.approx(0.5 * (1 + 4 - 1 - np.log(4.0)))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["beta", "gamma1", "gamma2", "gamma3", "gamma4", "gamma5"]),
       st.integers(0, 2), st.floats(0.01, 2.0))
def test_increasing_any_weight_increases_loss(name, level, delta):
    inst = random_instance(11, L=3)
    base = LossWeights(beta=1.0, gamma1=(0.25, 0.5, None), gamma2=(0.6, 1.2, 2.4),
                       gamma3=(0.6, 1.2, None), gamma4=(0.6, 1.2, None), gamma5=(0.6, 1.2, None))
    kwargs = base.to_dict()
    if name == "beta":
        kwargs["beta"] += delta
    else:
        vals = list(kwargs[name])
        if vals[level] is None:
            return
        vals[level] += delta
        kwargs[name] = vals
    bumped = LossWeights.from_dict(kwargs)
    assert run_total(inst, bumped, bumped.beta).total > run_total(inst, base, base.beta).total


@pytest.mark.parametrize("epoch,expected", [(0, 0.0), (5, 3.0), (10, 6.0), (30, 6.0)])
def test_beta_schedule_points(epoch, expected):
    assert beta_schedule(epoch, 10, 6.0) == expected


def test_beta_schedule_rejects_bad_warmup():
    with pytest.raises(ConfigError):
        beta_schedule(1, 0, 6.0)


def test_weights_validation():
    LossWeights().validate(4)
    with pytest.raises(ConfigError, match="one per level"):
        LossWeights().validate(3)
    with pytest.raises(ConfigError, match="last level"):
        LossWeights(gamma1=(0.25, 0.25, 0.5, 0.1)).validate(4)
    with pytest.raises(ConfigError, match="missing"):
        LossWeights(gamma3=(0.6, None, 1.2, None)).validate(4)
    with pytest.raises(ConfigError):
        LossWeights(beta=-1.0).validate(4)


def test_regrecon_level_out_of_range():
    x, levels, As, vs, *_ = random_instance(3, L=2)
    trace = CascadeTrace([T(v) for v in levels])
    with pytest.raises(ConfigError, match="out of range"):
        regrecon_loss(3, T(x), trace, LevelTransforms(3, T(As[1])), LossWeights())
