"""Radar returns and the per-point radar encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

MAX_RETURNS = 512


@dataclass(frozen=True)
class RadarReturn:
    u: int  # pixel column
    v: int  # pixel row
    d: float  # metric range, metres
    v_src: int | None = None  # row before height-ambiguity jitter, when known

    def normalized(self, H: int, W: int, d_max: float) -> tuple[float, float, float]:
        return (self.v / H, self.u / W, self.d / d_max)


def filter_returns(returns: Sequence[RadarReturn], H: int, W: int) -> list[RadarReturn]:
    return [r for r in returns if 0 <= r.u < W and 0 <= r.v < H][:MAX_RETURNS]


def init_point_encoder(rng: np.random.Generator, hidden: int, out: int) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(3), (hidden, 3)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (out, hidden)),
        "b2": np.zeros(out),
    }


def scatter_winners(returns: Sequence[RadarReturn], frame: tuple[int, int], stride: int = 2):
    """Pick one return per stride-cell, the nearest (smallest ``d``) winning collisions.

    Returns ``(kept_returns, flat_cell_index)``.
    """
    H, W = frame
    Wc = W // stride
    best: dict[int, tuple[float, int]] = {}
    for i, r in enumerate(returns):
        cell = (r.v // stride) * Wc + (r.u // stride)
        if cell not in best or r.d < best[cell][0]:
            best[cell] = (r.d, i)
    cells = sorted(best)
    return [returns[best[c][1]] for c in cells], np.array(cells, dtype=np.int64)


def encode_radar(
    returns_per_item: Sequence[Sequence[RadarReturn]],
    frame: tuple[int, int],
    d_max: float,
    p: dict,
    stride: int = 2,
) -> ad.Var:
    """Per-point MLP on the normalized triple, scattered onto the stride-2 grid.

    Output is ``[B, H/2, W/2, Dr]`` with empty cells exactly zero.
    """
    H, W = frame
    Hc, Wc = H // stride, W // stride
    Dr = p["W2"].shape[0]
    B = len(returns_per_item)
    triples, cells = [], []
    for b, rets in enumerate(returns_per_item):
        kept, idx = scatter_winners(filter_returns(rets, H, W), frame, stride)
        triples.extend(r.normalized(H, W, d_max) for r in kept)
        cells.append(idx + b * Hc * Wc)
    if not triples:
        return ad.const(np.zeros((B, Hc, Wc, Dr)))
    x = ad.const(np.asarray(triples, dtype=np.float64))
    hdn = ad.relu(ad.linear(x, p["W1"], p["b1"]))
    feats = ad.linear(hdn, p["W2"], p["b2"])
    flat = ad.scatter_rows(feats, np.concatenate(cells), B * Hc * Wc)
    return ad.reshape(flat, (B, Hc, Wc, Dr))
