"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-5
REL_TOL = 1e-5
DENOM_FLOOR = 1e-8


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    build: Callable[[dict[str, ad.Var]], ad.Var],
    arrays: dict[str, np.ndarray],
    h: float = FD_STEP,
) -> dict[str, float]:
    """Compare tape gradients of ``build(vars)`` against central differences.

    Returns the worst per-component relative error for every named input.
    """
    params = {k: ad.param(v, name=k) for k, v in arrays.items()}
    _, grads = ad.grad_of(params, lambda: build(params))

    def f() -> float:
        return float(build(params).data)

    return {k: rel_error(grads[k], numeric_grad(f, params[k].data, h)) for k in params}


def tape_ops(build: Callable[[dict[str, ad.Var]], ad.Var], arrays: dict[str, np.ndarray]) -> set[str]:
    """Names of the tape nodes recorded while building the loss."""
    params = {k: ad.param(v, name=k) for k, v in arrays.items()}
    with ad.Tape() as tape:
        build(params)
    return {n.op for n in tape.nodes}


# -- small instances covering every recorded op -------------------------------------------


def _proj(v: ad.Var, seed: int = 0) -> ad.Var:
    # fixed random projection so every output element reaches the loss
    w = np.random.default_rng(seed).normal(size=v.shape)
    return ad.sum_(v * w)


def _signed(r, shape, lo=0.2, hi=1.5):
    return r.uniform(lo, hi, size=shape) * r.choice([-1.0, 1.0], size=shape)


def _ssm_arrays(r, prefix, D, N):
    from .scan import SsmParams

    sp = SsmParams.init(D, N, r, zero_init_radar=False)
    return {f"{prefix}{k}": np.array(v, dtype=float) for k, v in sp.items()}


def _ssm_vars(v, prefix):
    n = len(prefix)
    return {k[n:]: x for k, x in v.items() if k.startswith(prefix)}


def op_cases() -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    """Named ``(build, arrays)`` pairs; every instance keeps B<=2, L<=8, D<=4, N<=4."""
    from .geometry import ScatterKernel, four_direction_scan, make_windows, windowed_rms
    from .losses import composite_loss
    from .modulation import film, pre_scan_blend
    from .radar import RadarReturn, encode_radar
    from .scan import ModulationMode, rms_scan

    r = np.random.default_rng(1234)
    cases = {
        "add": (lambda v: _proj(v["a"] + v["b"]), {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4,))}),
        "sub": (lambda v: _proj(v["a"] - v["b"]), {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 1))}),
        "mul": (lambda v: _proj(v["a"] * v["b"]), {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 3))}),
        "matmul": (lambda v: _proj(v["a"] @ v["b"]), {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 3))}),
        "linear": (lambda v: _proj(ad.linear(v["x"], v["W"], v["b"])),
                   {"x": r.normal(size=(2, 3, 4)), "W": r.normal(size=(4, 4)), "b": r.normal(size=4)}),
        "conv_s1": (lambda v: _proj(ad.conv2d(v["x"], v["W"], v["b"])),
                    {"x": r.normal(size=(2, 5, 4, 2)), "W": r.normal(size=(3, 3, 2, 3)), "b": r.normal(size=3)}),
        "conv_s2": (lambda v: _proj(ad.conv2d(v["x"], v["W"], v["b"], stride=2)),
                    {"x": r.normal(size=(1, 6, 4, 2)), "W": r.normal(size=(3, 3, 2, 2)), "b": r.normal(size=2)}),
        "conv_1x1": (lambda v: _proj(ad.conv2d(v["x"], v["W"])),
                     {"x": r.normal(size=(1, 3, 3, 4)), "W": r.normal(size=(1, 1, 4, 2))}),
        "softplus": (lambda v: _proj(ad.softplus(v["x"])), {"x": 3 * r.normal(size=(4, 3))}),
        "sigmoid": (lambda v: _proj(ad.sigmoid(v["x"])), {"x": 3 * r.normal(size=(4, 3))}),
        "tanh": (lambda v: _proj(ad.tanh(v["x"])), {"x": r.normal(size=(4, 3))}),
        "exp": (lambda v: _proj(ad.exp(v["x"])), {"x": r.normal(size=(4, 3))}),
        "log": (lambda v: _proj(ad.log(v["x"])), {"x": r.uniform(0.5, 3.0, size=(4, 3))}),
        "abs": (lambda v: _proj(ad.abs_(v["x"])), {"x": _signed(r, (4, 3))}),
        "relu": (lambda v: _proj(ad.relu(v["x"])), {"x": _signed(r, (4, 3))}),
        "square": (lambda v: _proj(ad.square(v["x"])), {"x": r.normal(size=(4, 3))}),
        "clip": (lambda v: _proj(ad.clip(v["x"], -0.5, 0.5)), {"x": 0.6 * _signed(r, (4, 3))}),
        "huber": (lambda v: _proj(ad.huber(v["x"], 1.0)), {"x": 2.5 * _signed(r, (5, 3))}),
        "layer_norm": (lambda v: _proj(ad.layer_norm(v["x"], v["g"], v["b"])),
                       {"x": r.normal(size=(2, 3, 4)), "g": r.normal(size=4), "b": r.normal(size=4)}),
        "upsample2": (lambda v: _proj(ad.upsample2(v["x"])), {"x": r.normal(size=(1, 2, 3, 2))}),
        "avg_pool": (lambda v: _proj(ad.avg_pool(v["x"], 2)), {"x": r.normal(size=(2, 4, 4, 3))}),
        "concat": (lambda v: _proj(ad.concat([v["a"], v["b"]], axis=-1)),
                   {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 2))}),
        "getitem": (lambda v: _proj(v["x"][:, 1:] - v["x"][:, :-1]), {"x": r.normal(size=(3, 5))}),
        "take_scatter": (
            lambda v: _proj(ad.scatter_rows(ad.take_rows(v["x"], np.array([[0, 2, 2], [3, 1, 0]])) * 1.5,
                                            np.array([[1, 1, 0], [2, 3, 3]]), 4)),
            {"x": r.normal(size=(4, 3))},
        ),
        "mean_reshape_transpose": (
            lambda v: ad.mean(ad.transpose(ad.reshape(v["x"], (3, 2, 2)), (2, 0, 1))
                              * np.arange(12.0).reshape(2, 3, 2)),
            {"x": r.normal(size=(4, 3))},
        ),
        "film": (lambda v: _proj(film(v, v["img"], v["rad"])),
                 {"W_gamma": r.normal(size=(3, 3)), "W_beta": r.normal(size=(3, 3)),
                  "img": r.normal(size=(1, 2, 2, 3)), "rad": r.normal(size=(1, 2, 2, 3))}),
        "pre_scan_blend": (lambda v: _proj(pre_scan_blend(v, v["img"], v["rad"])),
                           {"W_conf": r.normal(size=(1, 3)), "W_mix": r.normal(size=(3, 6)),
                            "img": r.normal(size=(1, 2, 2, 3)), "rad": r.normal(size=(1, 2, 2, 3))}),
    }

    rets = [[RadarReturn(u=1, v=2, d=20.0), RadarReturn(u=6, v=5, d=35.0), RadarReturn(u=7, v=5, d=9.0)]]
    cases["radar_encoder"] = (
        lambda v: _proj(encode_radar(rets, (8, 8), 80.0, v)),
        {"W1": r.normal(size=(4, 3)), "b1": r.normal(size=4), "W2": r.normal(size=(2, 4)), "b2": r.normal(size=2)},
    )

    D, N = 3, 2
    for mode in ModulationMode:
        arrays = _ssm_arrays(r, "p.", D, N)
        arrays.update(xi=r.normal(size=(2, 5, D)), xr=r.normal(size=(2, 5, D)))
        cases[f"rms_scan_{mode.value}"] = (
            lambda v, mode=mode: _proj(rms_scan(_ssm_vars(v, "p."), v["xi"], v["xr"], mode)), arrays)

    arrays = {}
    for i in range(4):
        arrays.update(_ssm_arrays(r, f"d{i}.", 2, 2))
    arrays.update(img=r.normal(size=(1, 2, 3, 2)), rad=r.normal(size=(1, 2, 3, 2)),
                  gamma=r.uniform(0.5, 1.5, 2), beta=r.normal(size=2))
    cases["four_direction_scan"] = (
        lambda v: _proj(four_direction_scan([_ssm_vars(v, f"d{i}.") for i in range(4)], v["img"], v["rad"],
                                            ModulationMode.JOINT, norm=(v["gamma"], v["beta"]))),
        arrays,
    )

    arrays = _ssm_arrays(r, "w.", 2, 2)
    arrays.update(img=r.normal(size=(2, 4, 4, 2)), rad=r.normal(size=(2, 4, 4, 2)))
    wins = [make_windows([(1, 1), (2, 3)], (4, 4), 1, 2), make_windows([(3, 0)], (4, 4), 1, 2)]
    cases["windowed_rms"] = (
        lambda v: _proj(windowed_rms(_ssm_vars(v, "w."), v["img"], v["rad"], wins,
                                     ScatterKernel.for_window(2), ModulationMode.JOINT)),
        arrays,
    )

    main = np.where(r.random((2, 4, 5)) < 0.85, r.uniform(1.0, 70.0, (2, 4, 5)), 0.0)
    sparse = np.where(r.random((2, 4, 5)) < 0.4, r.uniform(1.0, 70.0, (2, 4, 5)), 0.0)
    pred = r.uniform(1.0, 70.0, (2, 4, 5))
    # keep residuals clear of the Huber knee and of zero, where the loss is not smooth
    pred = np.where(np.abs(np.abs(pred - main) - 5.0) < 0.1, pred + 0.3, pred)
    cases["composite_loss_main_only"] = (lambda v: composite_loss(v["pred"], main)[0], {"pred": pred})
    cases["composite_loss_with_sparse"] = (lambda v: composite_loss(v["pred"], main, sparse)[0],
                                           {"pred": pred.copy()})
    return cases
