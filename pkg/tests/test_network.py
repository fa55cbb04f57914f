import numpy as np
import pytest

from m3ae import autodiff as ad
from m3ae.autodiff import Tensor
from m3ae.cascade import level_shape, resample_only
from m3ae.errors import ConfigError, ShapeError
from m3ae.gradcheck import check_gradients
from m3ae.network import M3AE, FULL_MODEL, ModelConfig

SMALL = ModelConfig(base_grid=(2, 3, 2), levels=2, channels=(6, 4), latent_dim=8)


def x_batch(model, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0, 1, size=(n, 1) + model.config.resolution), dtype=model.dtype)


def test_desk_defaults():
    cfg = ModelConfig()
    assert cfg.resolution == (16, 24, 16)
    assert (cfg.levels, cfg.channels, cfg.latent_dim) == (3, (32, 16, 8), 64)


def test_full_size_shape_law():
    m = M3AE(FULL_MODEL)
    cfg = m.config
    assert cfg.latent_dim == 512 and cfg.resolution == (80, 96, 80)
    shapes = m.param_shapes()
    # latent splits into two halves of 256, each reshaped to [128, 5, 6, 5]
    for prefix in ("decoder_phi", "decoder_a"):
        assert shapes[f"{prefix}.fc.weight"] == (128 * 5 * 6 * 5, 256)
    assert shapes["encoder.fc.weight"] == (2 * 512, 128 * 5 * 6 * 5)
    assert [level_shape(cfg.base_grid, i) for i in range(1, 5)] == [(10, 12, 10), (20, 24, 20), (40, 48, 40), (80, 96, 80)]
    assert [shapes[f"decoder_a.up{i}.head.weight"][0] for i in range(4)] == [1, 1, 1, 1]
    assert [shapes[f"decoder_phi.up{i}.head.weight"][0] for i in range(3)] == [3, 3, 3]
    assert "decoder_phi.up3.conv1.weight" not in shapes


def test_two_level_desk_bottleneck():
    m = M3AE(ModelConfig(base_grid=(2, 3, 2), levels=2, channels=(8, 4), latent_dim=32), dtype=np.float64)
    mu, logvar = m.encode(x_batch(m))
    assert mu.shape == logvar.shape == (2, 32)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(levels=2, channels=(8,)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(latent_dim=7).validate()
    with pytest.raises(ConfigError):
        ModelConfig(conv_impl="fft").validate()


def test_zero_heads_reproduce_template():
    m = M3AE(SMALL, dtype=np.float64)
    z = Tensor(np.random.default_rng(0).normal(size=(3, 8)), dtype=np.float64)
    trs = m.decode(z)
    assert all(not t.A.data.any() for t in trs)
    assert all(not t.phi.data.any() for t in trs[:-1]) and trs[-1].phi is None
    base = resample_only(m.template, 2).data
    np.testing.assert_array_equal(m.generate(z).final.data, np.repeat(base, 3, axis=0))


@pytest.mark.parametrize("direct", [False, True])
def test_forward_output_shape(direct):
    m = M3AE(ModelConfig(direct_output=direct))
    x = x_batch(m)
    x_hat, trace, latent = m.forward(x, np.random.default_rng(0))
    assert x_hat.shape == x.shape
    assert latent.z.shape == (2, 64)
    assert len(trace.levels) == (1 if direct else 3)


def test_encoder_identical_across_modes():
    a = M3AE(SMALL, dtype=np.float64)
    b = M3AE(ModelConfig(**{**SMALL.to_dict(), "direct_output": True}), dtype=np.float64)
    x = x_batch(a)
    for (ma, la), (mb, lb) in [(a.encode(x), b.encode(x))]:
        assert np.array_equal(ma.data, mb.data) and np.array_equal(la.data, lb.data)
    assert set(b.params) & {"decoder_a.fc.weight", "decoder_phi.fc.weight"} == set()


def test_encode_is_deterministic():
    m = M3AE(ModelConfig())
    x = x_batch(m)
    a, b = m.encode(x), m.encode(x)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_zero_variance_forward_is_deterministic():
    m = M3AE(SMALL, dtype=np.float64)
    mu = Tensor(np.zeros((2, 8)), dtype=np.float64)
    lv = Tensor(np.full((2, 8), -np.inf), dtype=np.float64)
    ad.set_debug(False)
    a = m.reparameterize(mu, lv, np.random.default_rng(0)).z.data
    b = m.reparameterize(mu, lv, np.random.default_rng(1)).z.data
    assert np.array_equal(a, b) and not a.any()


def test_latent_dimension_checked():
    m = M3AE(SMALL)
    with pytest.raises(ShapeError, match="latent"):
        m.generate(Tensor(np.zeros((1, 6), np.float32)))
    with pytest.raises(ShapeError, match="encode"):
        m.encode(Tensor(np.zeros((1, 1, 8, 12, 9), np.float32)))


def test_direct_output_has_no_transforms():
    m = M3AE(ModelConfig(direct_output=True))
    with pytest.raises(ConfigError):
        m.decode(Tensor(np.zeros((1, 64), np.float32)))


def _perturbed(model, seed=0, scale=0.05):
    """Give the zero-initialised heads small random weights so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if ".head." in name:
            p.data = rng.normal(0, scale, size=p.shape).astype(p.dtype)
    return model


def test_reconstruction_gradient_wrt_latent_matches_finite_differences():
    m = _perturbed(M3AE(ModelConfig(base_grid=(2, 3, 2), levels=2, channels=(4, 4), latent_dim=8), dtype=np.float64))
    x = x_batch(m, n=1, seed=3)
    z0 = np.random.default_rng(4).normal(size=(1, 8))

    def fn(t):
        return ad.mean_abs(ad.sub(x, m.generate(t[0]).final))

    res = check_gradients(fn, [z0], "recon_wrt_z", rtol=1e-3)
    assert res.passed, str(res)


def test_loss_gradient_wrt_parameters_matches_finite_differences():
    from m3ae.losses import LossWeights, total_loss

    cfg = ModelConfig(base_grid=(2, 3, 2), levels=2, channels=(4, 4), latent_dim=8)
    m = _perturbed(M3AE(cfg, dtype=np.float64))
    x = x_batch(m, n=2, seed=5)
    w = LossWeights(beta=0.5, gamma1=(0.25, None), gamma2=(0.6, 2.4), gamma3=(0.6, None),
                    gamma4=(0.6, None), gamma5=(0.6, None))
    names = sorted(m.params)

    def fn(t):
        for name, tensor in zip(names, t):
            m.params[name] = tensor
        _, trace, lat = m.forward(x, np.random.default_rng(0))
        return total_loss(x, trace, lat.mu, lat.logvar, w, w.beta).tensor

    inputs = [m.params[n].data.copy() for n in names]
    # small steps: near-zero displacements put samples close to the trilinear kinks at integer positions
    res = check_gradients(fn, inputs, "total_loss_wrt_params", eps=1e-6, rtol=1e-3, max_per_input=4)
    assert res.passed, str(res)


def test_state_dict_roundtrip():
    a = M3AE(SMALL)
    b = M3AE(ModelConfig(**{**SMALL.to_dict(), "init_seed": 5}))
    assert not np.array_equal(a.params["encoder.fc.weight"].data, b.params["encoder.fc.weight"].data)
    b.load_state_dict(a.state_dict())
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    with pytest.raises(ShapeError):
        b.load_state_dict({"bogus": np.zeros(1)})


def test_config_dict_roundtrip():
    cfg = ModelConfig(levels=2, channels=(8, 4), latent_dim=16, direct_output=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"nonsense": 1})


def test_sampling_is_seeded():
    m = _perturbed(M3AE(SMALL))
    a = m.sample(3, np.random.default_rng(9)).final.data
    b = m.sample(3, np.random.default_rng(9)).final.data
    assert np.array_equal(a, b)
