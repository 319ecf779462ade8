import numpy as np
import pytest

from rmsdepth import autodiff as ad
from rmsdepth.errors import ShapeError
from rmsdepth.modulation import (
    FilmParams,
    PreScanFusionParams,
    film,
    film_flops_per_pixel,
    pre_scan_blend,
)


def feats(seed, shape=(2, 4, 4, 3)):
    r = np.random.default_rng(seed)
    return r.normal(size=shape), r.normal(size=shape)


def as_vars(p):
    return {k: ad.const(v) for k, v in vars(p).items()}


def test_film_zero_init_is_identity():
    img, rad = feats(0)
    out = film(as_vars(FilmParams.init(3)), ad.const(img), ad.const(rad))
    assert np.array_equal(out.data, img)


def test_film_closed_form():
    img, rad = feats(1)
    r = np.random.default_rng(2)
    p = FilmParams(W_gamma=r.normal(size=(3, 3)), W_beta=r.normal(size=(3, 3)))
    out = film(as_vars(p), ad.const(img), ad.const(rad)).data
    expect = (1.0 + rad @ p.W_gamma.T) * img + rad @ p.W_beta.T
    assert np.allclose(out, expect, atol=1e-12)


def test_film_zero_radar_is_identity_for_any_weights():
    img, _ = feats(3)
    r = np.random.default_rng(4)
    p = FilmParams(W_gamma=r.normal(size=(3, 3)), W_beta=r.normal(size=(3, 3)))
    out = film(as_vars(p), ad.const(img), ad.const(np.zeros_like(img)))
    assert np.array_equal(out.data, img)


def test_pre_scan_blend_zero_init_is_identity():
    img, rad = feats(5)
    p = PreScanFusionParams.init(3, np.random.default_rng(0))
    out = pre_scan_blend(as_vars(p), ad.const(img), ad.const(rad))
    assert np.array_equal(out.data, img)


def test_pre_scan_blend_zero_radar_gate_is_half():
    img, _ = feats(6)
    r = np.random.default_rng(7)
    p = PreScanFusionParams(W_conf=r.normal(size=(1, 3)), W_mix=r.normal(size=(3, 6)))
    out = pre_scan_blend(as_vars(p), ad.const(img), ad.const(np.zeros_like(img))).data
    assert np.allclose(out, img + 0.5 * (img @ p.W_mix[:, :3].T), atol=1e-12)


def test_shape_mismatch_rejected():
    img, rad = feats(8)
    with pytest.raises(ShapeError):
        film(as_vars(FilmParams.init(3)), ad.const(img), ad.const(rad[..., :2]))


def test_film_flops():
    assert film_flops_per_pixel(16) == 2 * 256 + 32
