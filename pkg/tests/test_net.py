import numpy as np
import pytest

from rmsdepth import autodiff as ad
from rmsdepth.errors import ConfigError, ShapeError
from rmsdepth.losses import composite_loss
from rmsdepth.net import DEFAULT_TIERS, UNIFORM_FILM, MvspNet, NetConfig, NetMode, Tier
from rmsdepth.radar import RadarReturn, encode_radar, init_point_encoder, scatter_winners


def batch(seed, B=2, H=64, W=64, n=10):
    r = np.random.default_rng(seed)
    images = r.random((B, H, W, 1))
    rets = [[RadarReturn(u=int(r.integers(W)), v=int(r.integers(H)), d=float(r.uniform(1, 70)))
             for _ in range(n)] for _ in range(B)]
    return images, rets


def perturb(net, seed, scale=0.05):
    r = np.random.default_rng(seed)
    for p in net.params.values():
        p.data = p.data + scale * r.normal(size=p.data.shape)


def test_encoder_shapes():
    net = MvspNet(NetConfig())
    for H, W in [(64, 64), (96, 64)]:
        feats = net.encode_image(np.zeros((1, H, W, 1)))
        assert [f.shape[1:3] for f in feats] == [(H // 2 ** (i + 1), W // 2 ** (i + 1)) for i in range(5)]
        assert [f.shape[3] for f in feats] == list(net.cfg.widths)


def test_indivisible_shape_rejected():
    net = MvspNet(NetConfig())
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 48, 64, 1)), [[]])


def test_returns_per_image_required():
    net = MvspNet(NetConfig())
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 64, 64, 1)), [[]])


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        NetConfig(widths=(8, 8))
    with pytest.raises(ValueError):
        NetConfig(mode="sideways")


def test_config_round_trip():
    cfg = NetConfig(tiers=UNIFORM_FILM, mode="readout")
    back = NetConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_radar_collision_keeps_nearest():
    rets = [RadarReturn(u=4, v=4, d=30.0), RadarReturn(u=5, v=5, d=12.0), RadarReturn(u=20, v=2, d=50.0)]
    kept, cells = scatter_winners(rets, (64, 64), stride=2)
    assert [r.d for r in kept] == [50.0, 12.0]
    assert cells.tolist() == [1 * 32 + 10, 2 * 32 + 2]


def test_radar_map_empty_cells_zero():
    p = {k: ad.const(v) for k, v in init_point_encoder(np.random.default_rng(0), 8, 4).items()}
    p["b2"] = ad.const(np.ones(4))
    out = encode_radar([[RadarReturn(u=10, v=6, d=20.0)], []], (16, 16), 80.0, p).data
    assert out.shape == (2, 8, 8, 4)
    nz = np.any(out != 0, axis=-1)
    assert nz.sum() == 1 and nz[0, 3, 5]


def test_head_starts_at_log_midpoint():
    net = MvspNet(NetConfig())
    images, rets = batch(0)
    pred = net.predict(images, rets)
    assert np.allclose(pred, np.sqrt(0.5 * 80.0), rtol=1e-12)


def test_output_range_after_perturbation():
    net = MvspNet(NetConfig())
    perturb(net, 1, scale=0.5)
    pred = net.predict(*batch(1))
    assert pred.min() >= 0.5 and pred.max() <= 80.0
    assert np.all(np.isfinite(pred))


@pytest.mark.parametrize("mode", list(NetMode))
def test_zero_init_parity_all_modes(mode):
    net = MvspNet(NetConfig(mode=mode))
    # give the head and trunk random values so the comparison is not trivially constant
    for name, p in net.params.items():
        if name.startswith(("head", "enc", "up", "merge")):
            p.data = p.data + 0.1 * np.random.default_rng(len(name)).normal(size=p.data.shape)
    images, rets = batch(2)
    a = net.predict(images, rets, mode)
    b = net.predict(images, rets, NetMode.IMAGE_ONLY)
    assert np.max(np.abs(a - b)) == 0.0


def test_zero_returns_equal_radar_ablated_after_perturbation():
    net = MvspNet(NetConfig())
    perturb(net, 3)
    images, _ = batch(3)
    a = net.predict(images, [[], []])
    b = net.predict_ablated(images)
    assert np.max(np.abs(a - b)) == 0.0


def test_negative_control_breaks_parity():
    net = MvspNet(NetConfig(zero_init_radar=False))
    perturb(net, 4)
    images, rets = batch(4)
    assert np.max(np.abs(net.predict(images, rets) - net.predict(images, rets, "image_only"))) > 0


def test_uniform_film_differs_from_default():
    a = MvspNet(NetConfig(tiers=UNIFORM_FILM))
    b = MvspNet(NetConfig())
    assert not any(k.startswith("L4.0.") for k in a.params)
    assert any(k.startswith("L4.0.row_fwd.") for k in b.params)
    assert any(k.startswith("L2.0.win.") for k in b.params)


def test_token_accounting():
    net = MvspNet(NetConfig())
    images, rets = batch(5, B=2, n=6)
    counts = net.token_counts(images, rets)
    assert counts["L0"] == counts["L1"] == 0
    # two coarse layers, four directions, two images
    assert counts["L4"] == 2 * 4 * 2 * 2 * 2
    assert counts["L3"] == 2 * 4 * 2 * 4 * 4
    assert 0 < counts["L2"] <= 2 * 6 * 64
    assert net.token_counts(images, [[], []])["L2"] == 0
    assert net.token_counts(images, [[], []], "image_only")["L2"] == 0
    film_only = MvspNet(NetConfig(tiers=UNIFORM_FILM)).token_counts(images, rets)
    assert sum(film_only.values()) == 0


def test_windowed_tokens_grow_with_returns():
    net = MvspNet(NetConfig())
    images, _ = batch(6, B=1)
    r = np.random.default_rng(6)
    counts = []
    for n in (5, 20, 80):
        rets = [[RadarReturn(u=int(r.integers(64)), v=int(r.integers(64)), d=10.0) for _ in range(n)]]
        counts.append(net.token_counts(images, rets)["L2"])
    assert counts[0] < counts[1] < counts[2]


def test_state_dict_round_trip():
    a = MvspNet(NetConfig())
    perturb(a, 7)
    b = MvspNet(NetConfig(), seed=99)
    b.load_state_dict(a.state_dict())
    images, rets = batch(7)
    assert np.array_equal(a.predict(images, rets), b.predict(images, rets))
    with pytest.raises(ConfigError):
        b.load_state_dict({"nope": np.zeros(1)})


def test_network_gradient_small():
    cfg = NetConfig(widths=(2, 2, 2, 2, 2), d_state=2, radar_hidden=3, radar_dim=2, coarse_layers=1,
                    window=2, zero_init_radar=False)
    net = MvspNet(cfg, seed=1)
    perturb(net, 8, scale=0.2)
    images, rets = batch(8, B=1, H=32, W=32, n=3)
    main = np.random.default_rng(9).uniform(2.0, 60.0, (1, 32, 32))

    def loss():
        return composite_loss(net.forward(images, rets), main)[0]

    _, grads = ad.grad_of(net.params, loss)
    r = np.random.default_rng(10)
    h = 1e-5
    for name in ("L4.0.col_bwd.W_C_rad", "L2.0.win.W_dt_rad", "L0.film.W_beta", "rproj3.W",
                 "radar.W1", "enc2.W", "head.W"):
        p = net.params[name]
        flat = p.data.reshape(-1)
        i = int(r.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        fp = float(loss().data)
        flat[i] = old - h
        fm = float(loss().data)
        flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = grads[name].reshape(-1)[i]
        assert abs(ana - num) <= 1e-5 * max(abs(ana), abs(num), 1e-8) + 1e-10, name


def test_tier_enum_values():
    assert DEFAULT_TIERS == (Tier.FILM, Tier.FILM, Tier.WINDOWED, Tier.FULL, Tier.FULL)
