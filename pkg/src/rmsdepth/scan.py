"""Selective state-space scan with radar modulation of the step size and readout.

Layout conventions: token streams are ``[B, L, D]``, state is ``[B, D, N]`` and
linear maps are stored ``[out, in]`` so a projection is ``x @ W.T``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import NonFiniteError, ShapeError, StaleResidualsError

ZOH_SERIES_EPS = 1e-6
GATE_BIAS_INIT = -2.0


class ModulationMode(str, enum.Enum):
    IMAGE_ONLY = "image_only"
    HORIZON = "horizon"
    READOUT = "readout"
    JOINT = "joint"

    @property
    def modulates_dt(self) -> bool:
        return self in (ModulationMode.HORIZON, ModulationMode.JOINT)

    @property
    def modulates_c(self) -> bool:
        return self in (ModulationMode.READOUT, ModulationMode.JOINT)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmParams:
    """Parameters of one radar-modulated scan layer.

    ``A`` is stored as ``log_A`` with ``A = -exp(log_A)`` so every entry stays
    strictly negative under unconstrained optimizer updates.
    """

    log_A: np.ndarray  # [D, N]
    W_dt_img: np.ndarray  # [D, D]
    dt_bias: np.ndarray  # [D]
    W_B: np.ndarray  # [N, D]
    W_C_img: np.ndarray  # [N, D]
    W_dt_rad: np.ndarray  # [D, D]
    W_C_rad: np.ndarray  # [N, D]
    W_g: np.ndarray  # [1, D]
    b_g: np.ndarray  # shape ()

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.log_A)

    @property
    def d_model(self) -> int:
        return self.log_A.shape[0]

    @property
    def d_state(self) -> int:
        return self.log_A.shape[1]

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def items(self):
        return [(name, getattr(self, name)) for name in self.names()]

    def copy(self) -> "SsmParams":
        return SsmParams(**{k: np.array(v, copy=True) for k, v in self.items()})

    def zeros_like(self) -> "SsmParams":
        return SsmParams(**{k: np.zeros_like(v) for k, v in self.items()})

    @classmethod
    def from_A(cls, A, **kw) -> "SsmParams":
        A = np.asarray(A, dtype=np.float64)
        if np.any(A >= 0):
            raise ValueError("A must be strictly negative")
        D, N = A.shape
        base = cls.init(D, N, rng=np.random.default_rng(0))
        base = replace(base, log_A=np.log(-A))
        return replace(base, **{k: np.asarray(v, dtype=np.float64) for k, v in kw.items()})

    @classmethod
    def init(
        cls,
        d_model: int,
        d_state: int,
        rng: np.random.Generator,
        zero_init_radar: bool = True,
        strict_paper: bool = False,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ) -> "SsmParams":
        D, N = d_model, d_state
        scale = 1.0 / np.sqrt(D)
        log_A = np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1)))
        if strict_paper:
            dt_bias = np.zeros(D)
        else:
            dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=D))
            dt_bias = inverse_softplus(dt)
        W_dt_img = rng.normal(0.0, scale, (D, D))
        W_B = rng.normal(0.0, scale, (N, D))
        W_C_img = rng.normal(0.0, scale, (N, D))
        if zero_init_radar:
            W_dt_rad = np.zeros((D, D))
            W_C_rad = np.zeros((N, D))
            W_g = np.zeros((1, D))
        else:
            W_dt_rad = rng.normal(0.0, scale, (D, D))
            W_C_rad = rng.normal(0.0, scale, (N, D))
            W_g = rng.normal(0.0, scale, (1, D))
        return cls(
            log_A=log_A,
            W_dt_img=W_dt_img,
            dt_bias=dt_bias,
            W_B=W_B,
            W_C_img=W_C_img,
            W_dt_rad=W_dt_rad,
            W_C_rad=W_C_rad,
            W_g=W_g,
            b_g=np.array(GATE_BIAS_INIT),
        )


@dataclass
class TokenStreams:
    x_img: np.ndarray  # [B, L, D]
    x_rad: np.ndarray | None = None  # [B, L, D]; may be omitted for image-only scans

    def __post_init__(self):
        self.x_img = np.asarray(self.x_img)
        if self.x_img.ndim != 3:
            raise ShapeError(f"x_img must be [B, L, D], got shape {self.x_img.shape}")
        if self.x_rad is not None:
            self.x_rad = np.asarray(self.x_rad)
            if self.x_rad.shape != self.x_img.shape:
                raise ShapeError(
                    f"x_img {self.x_img.shape} and x_rad {self.x_rad.shape} differ in shape"
                )
        for name in ("x_img", "x_rad"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} contains non-finite values")

    def radar(self) -> np.ndarray:
        return np.zeros_like(self.x_img) if self.x_rad is None else self.x_rad


@dataclass
class Selection:
    Delta: np.ndarray  # [B, L, D]
    B: np.ndarray  # [B, L, N]
    C: np.ndarray  # [B, L, N]
    alpha: np.ndarray  # [B, L, 1]
    pre_dt: np.ndarray  # pre-softplus step size
    dt_rad: np.ndarray | None  # W_dt_rad x_rad, only for horizon-modulating modes


@dataclass
class ScanSaved:
    mode: ModulationMode
    streams: TokenStreams
    params: SsmParams
    sel: Selection
    abar: np.ndarray  # [B, L, D, N]
    bfac: np.ndarray  # ZOH input factor without B: [B, L, D, N]
    small: np.ndarray  # series-guard mask
    hs: np.ndarray  # [B, L, D, N]


@dataclass
class ScanOutput:
    y: np.ndarray
    h_final: np.ndarray
    saved: ScanSaved | None = None


def _check_params(params: SsmParams, D: int):
    if params.log_A.ndim != 2 or params.log_A.shape[0] != D:
        raise ShapeError(f"A has shape {params.log_A.shape}, token width is {D}")
    N = params.d_state
    expected = {
        "W_dt_img": (D, D),
        "dt_bias": (D,),
        "W_B": (N, D),
        "W_C_img": (N, D),
        "W_dt_rad": (D, D),
        "W_C_rad": (N, D),
        "W_g": (1, D),
        "b_g": (),
    }
    for name, shape in expected.items():
        got = np.shape(getattr(params, name))
        if got != shape:
            raise ShapeError(f"{name} has shape {got}, expected {shape}")


def compute_selection(
    params: SsmParams, streams: TokenStreams, mode: ModulationMode
) -> Selection:
    mode = ModulationMode(mode)
    x = streams.x_img
    _check_params(params, x.shape[-1])
    pre_dt = x @ params.W_dt_img.T + params.dt_bias
    Bsel = x @ params.W_B.T
    Csel = x @ params.W_C_img.T
    dt_rad = None
    if streams.x_rad is None:
        alpha = np.broadcast_to(sigmoid(params.b_g), x.shape[:-1] + (1,)).copy()
    else:
        alpha = sigmoid(streams.x_rad @ params.W_g.T + params.b_g)
    if mode.modulates_dt:
        r = streams.radar()
        dt_rad = r @ params.W_dt_rad.T
        pre_dt = pre_dt + alpha * dt_rad
    if mode.modulates_c:
        Csel = Csel + streams.radar() @ params.W_C_rad.T
    return Selection(
        Delta=softplus(pre_dt), B=Bsel, C=Csel, alpha=alpha, pre_dt=pre_dt, dt_rad=dt_rad
    )


def _zoh_factors(A, dt):
    z = dt * A
    small = np.abs(z) < ZOH_SERIES_EPS
    abar = np.exp(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = np.expm1(z) / A
    bfac = np.where(small, dt * (1.0 + 0.5 * z), exact)
    return abar, bfac, small


def zoh_discretize(A_entry, dt, b):
    """Exact zero-order-hold discretization of ``h' = A h + b x`` over a step ``dt``.

    Returns ``(abar, bbar)`` with ``abar = exp(dt*A)`` and
    ``bbar = (exp(dt*A) - 1) / A * b``, elementwise over broadcastable inputs.
    Below ``|dt*A| < 1e-6`` the input term switches to its two-term series.
    """
    A_entry = np.asarray(A_entry, dtype=np.float64)
    abar, bfac, _ = _zoh_factors(A_entry, np.asarray(dt, dtype=np.float64))
    abar = abar * np.ones_like(bfac)
    out_b = bfac * b
    if np.ndim(out_b) == 0:
        return float(abar), float(out_b)
    return abar, out_b


def _discretize(params: SsmParams, sel: Selection):
    A = params.A
    abar, bfac, small = _zoh_factors(A[None, None], sel.Delta[..., None])
    return abar, bfac, small


def scan_from_selection(A, Delta, Bsel, Csel, x):
    """Sequential recurrence for already-computed selection tensors.

    Returns ``(y, hs)``; ``hs`` holds every hidden state ``[B, L, D, N]``.
    """
    abar, bfac, _ = _zoh_factors(np.asarray(A)[None, None], np.asarray(Delta)[..., None])
    bbar = bfac * np.asarray(Bsel)[:, :, None, :]
    return _recurrence(abar, bbar, np.asarray(Csel), np.asarray(x))


def _recurrence(abar, bbar, Csel, x):
    Bn, L, D, N = abar.shape
    hs = np.empty((Bn, L, D, N), dtype=np.result_type(abar, x))
    h = np.zeros((Bn, D, N), dtype=hs.dtype)
    for t in range(L):
        h = abar[:, t] * h + bbar[:, t] * x[:, t, :, None]
        hs[:, t] = h
    y = np.einsum("bldn,bln->bld", hs, Csel)
    return y, hs


def selective_scan_fwd(
    params: SsmParams, streams: TokenStreams, mode: ModulationMode, keep: bool = True
) -> ScanOutput:
    mode = ModulationMode(mode)
    sel = compute_selection(params, streams, mode)
    abar, bfac, small = _discretize(params, sel)
    bbar = bfac * sel.B[:, :, None, :]
    y, hs = _recurrence(abar, bbar, sel.C, streams.x_img)
    saved = None
    if keep:
        saved = ScanSaved(
            mode=mode, streams=streams, params=params, sel=sel,
            abar=abar, bfac=bfac, small=small, hs=hs,
        )
    return ScanOutput(y=y, h_final=hs[:, -1].copy() if hs.shape[1] else np.zeros(hs.shape[:1] + hs.shape[2:], hs.dtype), saved=saved)


def _same(a, b) -> bool:
    if a is b:
        return True
    if a is None or b is None:
        return False
    return np.shape(a) == np.shape(b) and np.array_equal(a, b)


def selective_scan_bwd(
    params: SsmParams,
    streams: TokenStreams,
    mode: ModulationMode,
    saved: ScanSaved,
    grad_y: np.ndarray,
):
    """Vector-Jacobian product of :func:`selective_scan_fwd`.

    Returns ``(grad_params, grad_x_img, grad_x_rad)`` where ``grad_params`` is
    an :class:`SsmParams` of gradients (``log_A`` holds the gradient with
    respect to the log-parameterized rates).
    """
    mode = ModulationMode(mode)
    if saved is None or saved.mode != mode:
        raise StaleResidualsError("residuals were saved for a different modulation mode")
    if not (_same(saved.streams.x_img, streams.x_img) and _same(saved.streams.x_rad, streams.x_rad)):
        raise StaleResidualsError("residuals were saved for different token streams")
    if not all(_same(a, b) for (_, a), (_, b) in zip(saved.params.items(), params.items())):
        raise StaleResidualsError("residuals were saved for different parameters")
    gy = np.asarray(grad_y)
    x = streams.x_img
    if gy.shape != x.shape:
        raise ShapeError(f"grad_y shape {gy.shape} != output shape {x.shape}")

    sel, abar, bfac, small, hs = saved.sel, saved.abar, saved.bfac, saved.small, saved.hs
    A = params.A
    Bn, L, D, N = hs.shape

    gC = np.einsum("bld,bldn->bln", gy, hs)
    gh_direct = gy[..., None] * sel.C[:, :, None, :]
    gh = np.empty_like(hs)
    carry = np.zeros((Bn, D, N), dtype=hs.dtype)
    for t in range(L - 1, -1, -1):
        g = gh_direct[:, t] + carry
        gh[:, t] = g
        carry = abar[:, t] * g
    h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
    g_abar = gh * h_prev
    g_bbar = gh * x[..., None]
    bbar = bfac * sel.B[:, :, None, :]
    gx_img = np.einsum("bldn,bldn->bld", gh, bbar)
    gB = np.einsum("bldn,bldn->bln", g_bbar, bfac)
    g_bfac = g_bbar * sel.B[:, :, None, :]

    dt = sel.Delta[..., None]
    z = dt * A
    dbfac_ddt = np.where(small, 1.0 + z, abar)
    with np.errstate(divide="ignore", invalid="ignore"):
        dbfac_dA = np.where(small, 0.5 * dt * dt, (dt * abar - bfac) / A)
    g_dt = np.sum(g_abar * A * abar + g_bfac * dbfac_ddt, axis=-1)
    gA = np.sum(g_abar * dt * abar + g_bfac * dbfac_dA, axis=(0, 1))

    g_pre = g_dt * sigmoid(sel.pre_dt)
    grads = params.zeros_like()
    grads.log_A = gA * A
    grads.W_dt_img = np.einsum("bld,ble->de", g_pre, x)
    grads.dt_bias = g_pre.sum(axis=(0, 1))
    gx_img = gx_img + g_pre @ params.W_dt_img
    grads.W_B = np.einsum("bln,bld->nd", gB, x)
    gx_img = gx_img + gB @ params.W_B
    grads.W_C_img = np.einsum("bln,bld->nd", gC, x)
    gx_img = gx_img + gC @ params.W_C_img

    gx_rad = np.zeros_like(x) if streams.x_rad is None else np.zeros_like(streams.x_rad)
    r = streams.radar()
    if mode.modulates_dt:
        alpha = sel.alpha
        g_u = g_pre * alpha
        g_alpha = np.sum(g_pre * sel.dt_rad, axis=-1, keepdims=True)
        g_q = g_alpha * alpha * (1.0 - alpha)
        grads.W_dt_rad = np.einsum("bld,ble->de", g_u, r)
        grads.W_g = np.einsum("blo,ble->oe", g_q, r)
        grads.b_g = np.array(g_q.sum())
        gx_rad = gx_rad + g_u @ params.W_dt_rad + g_q @ params.W_g
    if mode.modulates_c:
        grads.W_C_rad = np.einsum("bln,bld->nd", gC, r)
        gx_rad = gx_rad + gC @ params.W_C_rad
    return grads, gx_img, gx_rad


def selective_scan_chunked(
    params: SsmParams, streams: TokenStreams, mode: ModulationMode, chunk: int = 64
) -> ScanOutput:
    """Blocked evaluation of the same recurrence.

    Inside a block of ``K`` tokens the state is the closed-form sum
    ``h_t = exp(S_t - S_0) h_0 + sum_j exp(S_t - S_j) bbar_j x_j`` with ``S`` the
    running sum of ``dt*A``; blocks are chained sequentially, so the cost is
    ``O(L * K)`` per channel and state.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    if chunk == 1:
        return selective_scan_fwd(params, streams, mode, keep=False)
    mode = ModulationMode(mode)
    sel = compute_selection(params, streams, mode)
    x = streams.x_img
    A = params.A.astype(x.dtype, copy=False)
    Bn, L, D = x.shape
    N = A.shape[1]
    ys = np.empty((Bn, L, D), dtype=x.dtype)
    h = np.zeros((Bn, D, N), dtype=x.dtype)
    tri = None
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        K = e - s
        dt = sel.Delta[:, s:e, :, None]
        z = dt * A
        _, bfac, _ = _zoh_factors(A, dt)
        u = bfac * sel.B[:, s:e, None, :] * x[:, s:e, :, None]  # [B,K,D,N]
        S = np.cumsum(z, axis=1)
        if tri is None or tri.shape[0] != K:
            tri = np.tril(np.ones((K, K), dtype=bool))
        diff = S[:, :, None] - S[:, None, :]  # [B,K(t),K(j),D,N]
        decay = np.where(tri[None, :, :, None, None], np.exp(np.minimum(diff, 0.0)), 0.0)
        hk = np.einsum("btjdn,bjdn->btdn", decay, u) + np.exp(S) * h[:, None]
        ys[:, s:e] = np.einsum("btdn,btn->btd", hk, sel.C[:, s:e])
        h = hk[:, -1]
    return ScanOutput(y=ys, h_final=h, saved=None)


def rms_scan(p: dict, x_img, x_rad, mode: ModulationMode):
    """Tape-aware scan. ``p`` maps :class:`SsmParams` field names to Vars.

    The hand-derived backward is registered as a single tape node so the time
    loop never appears on the tape.
    """
    from . import autodiff as ad

    names = SsmParams.names()
    has_rad = x_rad is not None
    inputs = [p[n] for n in names] + [x_img] + ([x_rad] if has_rad else [])
    keep = ad._tape() is not None

    def fwd(*arrs):
        params = SsmParams(*arrs[: len(names)])
        streams = TokenStreams(arrs[len(names)], arrs[len(names) + 1] if has_rad else None)
        out = selective_scan_fwd(params, streams, mode, keep=keep)
        return out.y, (params, streams, out.saved)

    def bwd(res, g):
        params, streams, saved = res
        grads, gxi, gxr = selective_scan_bwd(params, streams, mode, saved, g)
        out = [getattr(grads, n) for n in names] + [gxi]
        if has_rad:
            out.append(gxr)
        return out

    return ad.custom_vjp("rms_scan", fwd, bwd, *inputs)
