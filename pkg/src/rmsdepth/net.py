"""Desk-scale depth-completion network with a three-tier fusion decoder."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .geometry import DIRECTIONS, ScatterKernel, TokenCounter, four_direction_scan, make_windows, windowed_rms
from .losses import DepthNorm, log_denormalize
from .modulation import FilmParams, PreScanFusionParams, film, pre_scan_blend
from .radar import encode_radar, init_point_encoder
from .scan import ModulationMode, SsmParams

N_LEVELS = 5


class Tier(str, enum.Enum):
    FILM = "film"
    WINDOWED = "windowed"
    FULL = "full"


class NetMode(str, enum.Enum):
    IMAGE_ONLY = "image_only"
    HORIZON = "horizon"
    READOUT = "readout"
    JOINT = "joint"
    JOINT_PRESCAN = "joint_prescan"

    @property
    def scan_mode(self) -> ModulationMode:
        if self is NetMode.JOINT_PRESCAN:
            return ModulationMode.JOINT
        return ModulationMode(self.value)

    @property
    def uses_radar_features(self) -> bool:
        return self is not NetMode.IMAGE_ONLY


DEFAULT_TIERS = (Tier.FILM, Tier.FILM, Tier.WINDOWED, Tier.FULL, Tier.FULL)
UNIFORM_FILM = (Tier.FILM,) * N_LEVELS


@dataclass
class NetConfig:
    widths: tuple[int, ...] = (8, 12, 16, 16, 16)
    d_state: int = 4
    radar_hidden: int = 16
    radar_dim: int = 8
    in_channels: int = 1
    tiers: tuple[Tier, ...] = DEFAULT_TIERS
    mode: NetMode = NetMode.JOINT
    window: int = 8
    sigma_ratio: float = 2.5
    coarse_layers: int = 2
    d_min: float = 0.5
    d_max: float = 80.0
    zero_init_radar: bool = True
    strict_paper: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.tiers = tuple(Tier(t) for t in self.tiers)
        self.mode = NetMode(self.mode)
        if len(self.widths) != N_LEVELS or len(self.tiers) != N_LEVELS:
            raise ConfigError(f"need {N_LEVELS} widths and {N_LEVELS} tiers")
        DepthNorm(self.d_min, self.d_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiers"] = [t.value for t in self.tiers]
        d["mode"] = self.mode.value
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def level_stride(level: int) -> int:
    return 2 ** (level + 1)


@dataclass
class ScenePyramid:
    c: list[ad.Var]
    r: list[ad.Var | None] = field(default_factory=list)


class MvspNet:
    """Parameters live in ``self.params`` (name -> Var), populated in a fixed order."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.norm = DepthNorm(cfg.d_min, cfg.d_max)
        self.kernel = ScatterKernel.for_window(cfg.window, cfg.sigma_ratio)
        self.params: dict[str, ad.Var] = {}
        rng = np.random.default_rng(seed)
        w = cfg.widths

        cin = cfg.in_channels
        for i in range(N_LEVELS):
            self._conv(f"enc{i}", rng, 3, cin, w[i])
            cin = w[i]
        for name, arr in init_point_encoder(rng, cfg.radar_hidden, cfg.radar_dim).items():
            self._add(f"radar.{name}", arr)
        for i in range(N_LEVELS):
            self._add(f"rproj{i}.W", rng.normal(0.0, 1.0 / np.sqrt(cfg.radar_dim), (w[i], cfg.radar_dim)))
        for i in range(N_LEVELS - 1):
            self._conv(f"up{i}", rng, 3, w[i + 1], w[i])
            self._conv(f"merge{i}", rng, 1, 2 * w[i], w[i])
        for i, tier in enumerate(cfg.tiers):
            self._tier_params(i, tier, rng)
        self._conv("head", rng, 3, w[0] + cfg.in_channels, 1, zero=True)

    # -- parameter construction ----------------------------------------------------

    def _add(self, name: str, arr):
        self.params[name] = ad.param(arr, name=name)

    def _conv(self, name, rng, k, cin, cout, zero=False):
        W = np.zeros((k, k, cin, cout)) if zero else rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), (k, k, cin, cout))
        self._add(f"{name}.W", W)
        self._add(f"{name}.b", np.zeros(cout))

    def _ssm(self, prefix, rng, d):
        sp = SsmParams.init(d, self.cfg.d_state, rng, zero_init_radar=self.cfg.zero_init_radar,
                            strict_paper=self.cfg.strict_paper)
        for name, arr in sp.items():
            self._add(f"{prefix}.{name}", arr)

    def _tier_params(self, i, tier, rng):
        d = self.cfg.widths[i]
        if tier is Tier.FILM:
            fp = FilmParams.init(d)
            if not self.cfg.zero_init_radar:
                fp = FilmParams(*(rng.normal(0.0, 0.1, (d, d)) for _ in range(2)))
            self._add(f"L{i}.film.W_gamma", fp.W_gamma)
            self._add(f"L{i}.film.W_beta", fp.W_beta)
            return
        layers = self.cfg.coarse_layers if tier is Tier.FULL else 1
        for k in range(layers):
            pre = f"L{i}.{k}"
            if tier is Tier.FULL:
                for direction in DIRECTIONS:
                    self._ssm(f"{pre}.{direction.value}", rng, d)
                self._add(f"{pre}.ln.gamma", np.ones(d))
                self._add(f"{pre}.ln.beta", np.zeros(d))
            else:
                self._ssm(f"{pre}.win", rng, d)
            if self.cfg.mode is NetMode.JOINT_PRESCAN:
                pf = PreScanFusionParams.init(d, rng)
                self._add(f"{pre}.blend.W_conf", pf.W_conf)
                self._add(f"{pre}.blend.W_mix", pf.W_mix)

    def group(self, prefix: str) -> dict[str, ad.Var]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward ------------------------------------------------------------------------

    def _conv_apply(self, name, x, stride=1):
        return ad.conv2d(x, self.params[f"{name}.W"], self.params[f"{name}.b"], stride=stride)

    def encode_image(self, images) -> list[ad.Var]:
        x = ad.const(images)
        H, W = x.shape[1:3]
        if H % 32 or W % 32:
            raise ShapeError(f"image size {H}x{W} must be divisible by 32")
        feats = []
        for i in range(N_LEVELS):
            x = ad.relu(self._conv_apply(f"enc{i}", x, stride=2))
            feats.append(x)
        return feats

    def radar_pyramid(self, returns_per_item, frame) -> list[ad.Var]:
        rmap = encode_radar(returns_per_item, frame, self.cfg.d_max, self.group("radar"))
        return [
            ad.linear(ad.avg_pool(rmap, 2 ** i), self.params[f"rproj{i}.W"])
            for i in range(N_LEVELS)
        ]

    def pyramid(self, images, returns_per_item, mode: NetMode) -> ScenePyramid:
        c = self.encode_image(images)
        if mode.uses_radar_features:
            r = self.radar_pyramid(returns_per_item, images.shape[1:3])
        else:
            r = [None] * N_LEVELS
        return ScenePyramid(c=c, r=r)

    def _fuse(self, i, x, r, returns_per_item, mode: NetMode):
        tier = self.cfg.tiers[i]
        label = f"L{i}"
        if tier is Tier.FILM:
            return x if r is None else film(self.group(f"L{i}.film"), x, r)
        scan_mode = mode.scan_mode
        layers = self.cfg.coarse_layers if tier is Tier.FULL else 1
        for k in range(layers):
            pre = f"L{i}.{k}"
            x_in = x
            if mode is NetMode.JOINT_PRESCAN and r is not None:
                x_in = pre_scan_blend(self.group(f"{pre}.blend"), x, r)
            if tier is Tier.FULL:
                dir_params = [self.group(f"{pre}.{d.value}") for d in DIRECTIONS]
                norm = (self.params[f"{pre}.ln.gamma"], self.params[f"{pre}.ln.beta"])
                y = four_direction_scan(dir_params, x_in, r, scan_mode, norm=norm, label=label)
            else:
                shape = x.shape[1:3]
                windows = [make_windows(rets, shape, level_stride(i), self.cfg.window)
                           for rets in returns_per_item]
                y = windowed_rms(self.group(f"{pre}.win"), x_in, r, windows, self.kernel,
                                 scan_mode, label=label)
            x = y if x_in is x else x + (y - x_in)
        return x

    def decode(self, pyr: ScenePyramid, images, returns_per_item, mode: NetMode) -> ad.Var:
        f = self._fuse(4, pyr.c[4], pyr.r[4], returns_per_item, mode)
        for i in range(N_LEVELS - 2, -1, -1):
            u = ad.relu(self._conv_apply(f"up{i}", ad.upsample2(f)))
            m = ad.relu(self._conv_apply(f"merge{i}", ad.concat([u, pyr.c[i]], axis=-1)))
            f = self._fuse(i, m, pyr.r[i], returns_per_item, mode)
        top = ad.concat([ad.upsample2(f), ad.const(images)], axis=-1)
        z = self._conv_apply("head", top)
        t = ad.tanh(ad.reshape(z, z.shape[:3]))
        return ad.clip(log_denormalize(t, self.norm), self.cfg.d_min, self.cfg.d_max)

    def forward(self, images, returns_per_item, mode: NetMode | str | None = None) -> ad.Var:
        """Predict metric depth ``[B, H, W]`` from images ``[B, H, W, C]`` and per-item returns."""
        mode = self.cfg.mode if mode is None else NetMode(mode)
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if len(returns_per_item) != images.shape[0]:
            raise ShapeError("need one list of radar returns per image")
        pyr = self.pyramid(images, returns_per_item, mode)
        return self.decode(pyr, images, returns_per_item, mode)

    def predict(self, images, returns_per_item, mode=None) -> np.ndarray:
        return self.forward(images, returns_per_item, mode).data

    def predict_ablated(self, images) -> np.ndarray:
        """Radar-ablated forward: image-only selection and no returns at all."""
        images = np.asarray(images, dtype=np.float64)
        B = 1 if images.ndim == 3 else images.shape[0]
        return self.predict(images, [[] for _ in range(B)], NetMode.IMAGE_ONLY)

    def token_counts(self, images, returns_per_item, mode=None) -> dict[str, int]:
        with TokenCounter() as counter:
            self.forward(images, returns_per_item, mode)
        return {f"L{i}": counter.counts.get(f"L{i}", 0) for i in range(N_LEVELS)}

    # -- state ---------------------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
