"""2-D scan orderings, radar-centred windows and Gaussian scatter-back."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .scan import ModulationMode, rms_scan


class ScanDirection(enum.Enum):
    ROW_FWD = "row_fwd"
    ROW_BWD = "row_bwd"
    COL_FWD = "col_fwd"
    COL_BWD = "col_bwd"


DIRECTIONS = tuple(ScanDirection)


class TokenCounter:
    """Counts scanned tokens per label while active (``with counter:``)."""

    _active: list["TokenCounter"] = []

    def __init__(self):
        self.counts: Counter = Counter()

    def __enter__(self):
        TokenCounter._active.append(self)
        return self

    def __exit__(self, *exc):
        TokenCounter._active.remove(self)
        return False

    @classmethod
    def add(cls, label: str, n: int):
        for c in cls._active:
            c.counts[label] += int(n)


def direction_perm(H: int, W: int, direction: ScanDirection) -> np.ndarray:
    """Flat row-major cell index visited at each sequence position."""
    ids = np.arange(H * W).reshape(H, W)
    direction = ScanDirection(direction)
    if direction is ScanDirection.ROW_FWD:
        return ids.reshape(-1)
    if direction is ScanDirection.ROW_BWD:
        return ids.reshape(-1)[::-1].copy()
    if direction is ScanDirection.COL_FWD:
        return ids.T.reshape(-1)
    return ids.T.reshape(-1)[::-1].copy()


def order_tokens(grid: np.ndarray, direction: ScanDirection) -> np.ndarray:
    H, W = grid.shape[:2]
    return grid.reshape(H * W, *grid.shape[2:])[direction_perm(H, W, direction)]


def unorder_tokens(tokens: np.ndarray, H: int, W: int, direction: ScanDirection) -> np.ndarray:
    out = np.empty_like(tokens)
    out[direction_perm(H, W, direction)] = tokens
    return out.reshape(H, W, *tokens.shape[1:])


def _permute(x: ad.Var, perm: np.ndarray) -> ad.Var:
    inv = np.argsort(perm)
    return ad.record("permute", x.data[:, perm], (x,), lambda g: (g[:, inv],))


def four_direction_scan(
    dir_params: Sequence[dict],
    img: ad.Var,
    rad: ad.Var | None,
    mode: ModulationMode,
    norm: tuple[ad.Var, ad.Var] | None = None,
    label: str = "full",
) -> ad.Var:
    """Sum of four directional scans, layer-normalized, plus the input residual.

    ``img``/``rad`` are ``[B, H, W, D]``. ``dir_params`` holds one parameter
    dict per :data:`DIRECTIONS` entry.
    """
    B, H, W, D = img.shape
    flat = ad.reshape(img, (B, H * W, D))
    rflat = None if rad is None else ad.reshape(rad, (B, H * W, D))
    total = None
    for direction, p in zip(DIRECTIONS, dir_params):
        perm = direction_perm(H, W, direction)
        xi = _permute(flat, perm)
        xr = None if rflat is None else _permute(rflat, perm)
        y = _permute(rms_scan(p, xi, xr, mode), np.argsort(perm))
        total = y if total is None else total + y
        TokenCounter.add(label, B * H * W)
    if norm is None:
        norm = (ad.const(np.ones(D)), ad.const(np.zeros(D)))
    merged = ad.layer_norm(total, *norm)
    return img + ad.reshape(merged, (B, H, W, D))


@dataclass(frozen=True)
class Window:
    center: tuple[int, int]
    extent: int
    clip: tuple[int, int, int, int]  # row0, row1, col0, col1; half-open

    @property
    def size(self) -> int:
        r0, r1, c0, c1 = self.clip
        return (r1 - r0) * (c1 - c0)

    def serpentine(self) -> list[tuple[int, int]]:
        r0, r1, c0, c1 = self.clip
        cells = []
        for k, r in enumerate(range(r0, r1)):
            cols = range(c0, c1) if k % 2 == 0 else range(c1 - 1, c0 - 1, -1)
            cells.extend((r, c) for c in cols)
        return cells


class WindowList(list):
    """List of windows that also remembers how many returns fell outside the level grid."""

    skipped: int = 0


def make_windows(returns, level_shape: tuple[int, int], stride: int, w: int) -> WindowList:
    """One window per distinct level cell hit by a return.

    ``returns`` holds objects with integer ``v`` (row) and ``u`` (col) in
    full-resolution pixels, or plain ``(row, col)`` pairs.
    """
    H, W = level_shape
    half = w // 2
    out = WindowList()
    seen = set()
    for ret in returns:
        row, col = (ret.v, ret.u) if hasattr(ret, "v") else ret
        cr, cc = int(row) // stride, int(col) // stride
        if not (0 <= cr < H and 0 <= cc < W) or row < 0 or col < 0:
            out.skipped += 1
            continue
        if (cr, cc) in seen:
            continue
        seen.add((cr, cc))
        clip = (max(0, cr - half), min(H, cr - half + w), max(0, cc - half), min(W, cc - half + w))
        out.append(Window(center=(cr, cc), extent=w, clip=clip))
    return out


@dataclass(frozen=True)
class ScatterKernel:
    """Unnormalized Gaussian with unit centre weight; ``weights[w//2, w//2] == 1``."""

    w: int
    sigma: float

    @classmethod
    def for_window(cls, w: int, sigma_ratio: float = 2.5) -> "ScatterKernel":
        return cls(w=w, sigma=w / sigma_ratio)

    def weight(self, dr, dc):
        return np.exp(-(np.square(dr) + np.square(dc)) / (2.0 * self.sigma ** 2))

    @property
    def weights(self) -> np.ndarray:
        off = np.arange(self.w) - self.w // 2
        return self.weight(off[:, None], off[None, :])


def _window_tables(windows_per_item, H, W, kernel):
    rows_idx, rows_wt = [], []
    for b, windows in enumerate(windows_per_item):
        base = b * H * W
        for win in windows:
            cells = win.serpentine()
            r = np.array([c[0] for c in cells])
            c = np.array([c[1] for c in cells])
            rows_idx.append(base + r * W + c)
            rows_wt.append(kernel.weight(r - win.center[0], c - win.center[1]))
    if not rows_idx:
        return None, None
    Lmax = max(len(i) for i in rows_idx)
    idx = np.zeros((len(rows_idx), Lmax), dtype=np.int64)
    wt = np.zeros((len(rows_idx), Lmax))
    for k, (i, w8) in enumerate(zip(rows_idx, rows_wt)):
        idx[k, : len(i)] = i
        idx[k, len(i):] = i[0]
        wt[k, : len(i)] = w8
    return idx, wt


def windowed_rms(
    params: dict,
    img: ad.Var,
    rad: ad.Var | None,
    windows,
    kernel: ScatterKernel,
    mode: ModulationMode,
    label: str = "windowed",
) -> ad.Var:
    """Scan each window in serpentine order and blend results back with Gaussian weights.

    ``windows`` is a list of windows per batch item (a flat list of
    :class:`Window` is accepted for a batch of one). Overlaps are resolved as a
    Gaussian-weighted average; pixels outside every window pass through.
    Windows are padded at the tail to a common length, which leaves the causal
    outputs of the real tokens untouched.
    """
    B, H, W, D = img.shape
    if windows and isinstance(windows[0], Window):
        windows = [windows]
    windows = list(windows) + [[]] * (B - len(windows))
    idx, wt = _window_tables(windows, H, W, kernel)
    if idx is None:
        return img
    TokenCounter.add(label, int(np.count_nonzero(wt)))
    flat = ad.reshape(img, (B * H * W, D))
    xi = ad.take_rows(flat, idx)
    xr = None if rad is None else ad.take_rows(ad.reshape(rad, (B * H * W, D)), idx)
    y = rms_scan(params, xi, xr, mode)
    accum = ad.scatter_rows(y * wt[..., None], idx, B * H * W)
    wsum = np.zeros(B * H * W)
    np.add.at(wsum, idx.reshape(-1), wt.reshape(-1))
    scale = np.where(wsum > 0, 1.0 / np.where(wsum > 0, wsum, 1.0), 0.0)
    return img + ad.reshape(accum * scale[:, None], (B, H, W, D))
