"""Composite depth-completion objective and evaluation metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import UntrainableSampleError

HUBER_DELTA_M = 5.0
EVAL_RANGES = (50.0, 70.0, 80.0)


@dataclass(frozen=True)
class DepthNorm:
    d_min: float = 0.5
    d_max: float = 80.0

    def __post_init__(self):
        if not 0.0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")

    @property
    def log_span(self) -> float:
        return float(np.log(self.d_max) - np.log(self.d_min))

    @property
    def log_mid(self) -> float:
        return float(np.sqrt(self.d_min * self.d_max))


@dataclass(frozen=True)
class LossWeights:
    lam_log: float = 1.0
    lam_lin: float = 1.0
    lam_grad: float = 0.5
    lam_sparse: float = 1.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")


def log_normalize(d, norm: DepthNorm):
    """Affine-in-log map of ``[d_min, d_max]`` onto ``[-1, 1]``. Accepts arrays or Vars."""
    if isinstance(d, ad.Var):
        d = ad.clip(d, norm.d_min, norm.d_max)
        return ad.log(d) * (2.0 / norm.log_span) + (-2.0 * np.log(norm.d_min) / norm.log_span - 1.0)
    d = np.clip(np.asarray(d, dtype=np.float64), norm.d_min, norm.d_max)
    return 2.0 * (np.log(d) - np.log(norm.d_min)) / norm.log_span - 1.0


def log_denormalize(t, norm: DepthNorm):
    if isinstance(t, ad.Var):
        return ad.exp(t * (0.5 * norm.log_span) + (np.log(norm.d_min) + 0.5 * norm.log_span))
    t = np.asarray(t, dtype=np.float64)
    return np.exp(np.log(norm.d_min) + 0.5 * (t + 1.0) * norm.log_span)


def huber_value(r, delta: float = HUBER_DELTA_M):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def _masked_mean(x: ad.Var, mask: np.ndarray) -> ad.Var:
    n = float(mask.sum())
    return ad.sum_(x * mask.astype(np.float64)) * (1.0 / max(n, 1.0))


def composite_loss(
    pred: ad.Var,
    main: np.ndarray,
    sparse: np.ndarray | None = None,
    weights: LossWeights = LossWeights(),
    norm: DepthNorm = DepthNorm(),
    main_mask: np.ndarray | None = None,
    sparse_mask: np.ndarray | None = None,
) -> tuple[ad.Var, dict[str, float]]:
    """Weighted sum of log-L1, Huber, gradient-L1 and sparse-L1 terms.

    Targets mark invalid pixels with zero unless explicit masks are given.
    Returns the scalar loss Var and a per-term breakdown in floats.
    """
    pred = ad.const(pred)
    main = np.asarray(main, dtype=np.float64)
    mmask = (main > 0) if main_mask is None else np.asarray(main_mask, dtype=bool)
    if not mmask.any():
        raise UntrainableSampleError("main target has no valid pixel")
    if sparse is not None:
        sparse = np.asarray(sparse, dtype=np.float64)
        smask = (sparse > 0) if sparse_mask is None else np.asarray(sparse_mask, dtype=bool)
    else:
        smask = None

    t_pred = log_normalize(pred, norm)
    t_main = log_normalize(np.where(mmask, main, norm.d_min), norm)

    if smask is not None:
        t_sparse = log_normalize(np.where(smask, sparse, norm.d_min), norm)
        l_log = _masked_mean(ad.abs_(t_pred - t_sparse), smask)
        l_sparse = _masked_mean(ad.abs_(pred - np.where(smask, sparse, 0.0)), smask) * (1.0 / norm.d_max)
    else:
        l_log = _masked_mean(ad.abs_(t_pred - t_main), mmask)
        l_sparse = ad.const(0.0)

    l_lin = _masked_mean(ad.huber(pred - np.where(mmask, main, 0.0), HUBER_DELTA_M), mmask) * (
        1.0 / norm.d_max
    )

    err = t_pred - t_main
    gx = ad.abs_(err[..., :, 1:] - err[..., :, :-1])
    gy = ad.abs_(err[..., 1:, :] - err[..., :-1, :])
    mx = mmask[..., :, 1:] & mmask[..., :, :-1]
    my = mmask[..., 1:, :] & mmask[..., :-1, :]
    n_pairs = max(float(mx.sum() + my.sum()), 1.0)
    l_grad = (ad.sum_(gx * mx.astype(np.float64)) + ad.sum_(gy * my.astype(np.float64))) * (1.0 / n_pairs)

    total = (
        l_log * weights.lam_log
        + l_lin * weights.lam_lin
        + l_grad * weights.lam_grad
        + l_sparse * weights.lam_sparse
    )
    breakdown = {
        "total": float(total.data),
        "log": float(l_log.data),
        "lin": float(l_lin.data),
        "grad": float(l_grad.data),
        "sparse": float(l_sparse.data),
    }
    return total, breakdown


def range_key(r: float) -> str:
    return f"0-{r:g}"


def eval_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    ranges=EVAL_RANGES,
    clamp: tuple[float, float] = (0.5, 80.0),
) -> dict:
    """MAE/RMSE in millimetres and iMAE/iRMSE in 1/km, one block per depth range.

    Pixels with ``gt`` in ``(0, R]`` enter range ``R``; predictions are clamped
    before any metric. Ranges without ground truth are listed under ``skipped``.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), *clamp)
    g = np.asarray(gt, dtype=np.float64)
    report = {"ranges": {}, "skipped": [], "clamp": list(clamp)}
    for r in ranges:
        m = (g > 0) & (g <= r)
        n = int(m.sum())
        if n == 0:
            report["skipped"].append(range_key(r))
            continue
        e = p[m] - g[m]
        ie = 1.0 / p[m] - 1.0 / g[m]
        report["ranges"][range_key(r)] = {
            "MAE": float(np.mean(np.abs(e)) * 1000.0),
            "RMSE": float(np.sqrt(np.mean(e * e)) * 1000.0),
            "iMAE": float(np.mean(np.abs(ie)) * 1000.0),
            "iRMSE": float(np.sqrt(np.mean(ie * ie)) * 1000.0),
            "n": n,
        }
    return report


def range_masks(gt: np.ndarray, ranges=EVAL_RANGES) -> dict[str, np.ndarray]:
    g = np.asarray(gt)
    return {range_key(r): (g > 0) & (g <= r) for r in ranges}
