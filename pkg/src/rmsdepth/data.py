"""Deterministic synthetic radar-camera scenes and their on-disk format.

Scenes are piecewise-planar depth maps (a ground plane plus slanted boxes)
scaled by a per-scene metric factor. The rendered image only sees the
unscaled geometry, so the image fixes relative depth and the radar returns
fix the metric scale.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .radar import MAX_RETURNS, RadarReturn

MAGIC = b"RMSDSET\x00"
TRAILER = b"RMSDEND\x00"
FORMAT_VERSION = 1
_RETURN_DTYPE = np.dtype([("u", "<i4"), ("v", "<i4"), ("v_src", "<i4"), ("d", "<f4")])


@dataclass(frozen=True)
class SceneConfig:
    H: int = 64
    W: int = 64
    n_planes: int = 4
    n_returns: int = 40
    radar_noise_m: float = 0.2
    main_noise: float = 0.05
    d_min: float = 0.5
    d_max: float = 80.0
    sparse_frac: float = 0.05
    main_dropout: float = 0.1
    v_jitter_px: float = 1.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    object_scale_range: tuple[float, float] = (1.0, 1.0)  # extra per-box factor the image cannot see

    def validate(self):
        if self.H <= 0 or self.W <= 0 or self.H % 32 or self.W % 32:
            raise ConfigError(f"H and W must be positive multiples of 32, got {self.H}x{self.W}")
        if not 0 <= self.n_returns <= MAX_RETURNS:
            raise ConfigError(f"n_returns must lie in [0, {MAX_RETURNS}]")
        if self.n_planes < 0 or self.radar_noise_m < 0 or self.main_noise < 0:
            raise ConfigError("n_planes and noise levels must be nonnegative")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")
        if not 0 <= self.sparse_frac <= 1 or not 0 <= self.main_dropout < 1:
            raise ConfigError("sparse_frac and main_dropout must be fractions")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for k in ("scale_range", "object_scale_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Scene:
    seed: int
    depth_gt: np.ndarray  # [H, W] float32, metres
    image: np.ndarray  # [H, W, 1] float32
    returns: list[RadarReturn] = field(default_factory=list)
    sparse_gt: np.ndarray | None = None  # [H, W] float32, 0 = no sample
    main_gt: np.ndarray | None = None  # [H, W] float32, 0 = dropped

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth_gt.shape

    @property
    def sparse_mask(self) -> np.ndarray:
        return self.sparse_gt > 0

    @property
    def main_mask(self) -> np.ndarray:
        return self.main_gt > 0

    def check(self, d_min: float, d_max: float):
        H, W = self.shape
        if self.depth_gt.min() < d_min or self.depth_gt.max() > d_max:
            raise DatasetFormatError(f"scene {self.seed}: depth outside [{d_min}, {d_max}]")
        if len(self.returns) > MAX_RETURNS:
            raise DatasetFormatError(f"scene {self.seed}: more than {MAX_RETURNS} returns")
        for r in self.returns:
            if not (0 <= r.u < W and 0 <= r.v < H):
                raise DatasetFormatError(f"scene {self.seed}: return outside the image")

    def equals(self, other: "Scene") -> bool:
        return (
            self.seed == other.seed
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("depth_gt", "image", "sparse_gt", "main_gt")
            )
            and self.returns == other.returns
        )


def _smooth_field(rng, H, W, cells=8):
    coarse = rng.normal(size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    rows = np.stack([np.interp(xs, np.arange(cells + 1), coarse[i]) for i in range(cells + 1)])
    return np.stack([np.interp(ys, np.arange(cells + 1), rows[:, j]) for j in range(W)], axis=1)


def _canonical_geometry(rng, cfg: SceneConfig):
    H, W = cfg.H, cfg.W
    v = (np.arange(H)[:, None] + 0.5) / H * np.ones((1, W))
    u = (np.arange(W)[None, :] + 0.5) / W * np.ones((H, 1))
    horizon = rng.uniform(0.3, 0.5)
    far = 40.0
    near = rng.uniform(2.5, 4.0)
    with np.errstate(divide="ignore"):
        ground = np.where(v > horizon, near * (1.0 - horizon) / np.maximum(v - horizon, 1e-9), far)
    canon = np.minimum(ground, far)
    albedo = np.where(v > horizon, 0.45, 0.8)
    factor = np.ones((H, W))
    for _ in range(cfg.n_planes):
        cu, cv = rng.uniform(0.1, 0.9), rng.uniform(0.25, 0.75)
        hu, hv = rng.uniform(0.06, 0.22), rng.uniform(0.06, 0.25)
        d0 = np.exp(rng.uniform(np.log(4.0), np.log(30.0)))
        gu, gv = rng.uniform(-0.6, 0.6, size=2) * d0
        plane = np.maximum(d0 + gu * (u - cu) + gv * (v - cv), 1.5)
        inside = (np.abs(u - cu) < hu) & (np.abs(v - cv) < hv) & (plane < canon)
        canon = np.where(inside, plane, canon)
        albedo = np.where(inside, rng.uniform(0.25, 0.95), albedo)
        lo, hi = cfg.object_scale_range
        if hi > lo:
            factor = np.where(inside, np.exp(rng.uniform(np.log(lo), np.log(hi))), factor)
    return canon, albedo, factor


def _render(rng, canon, albedo):
    dzdv, dzdu = np.gradient(canon)
    n = np.stack([-dzdu, -dzdv, np.full_like(canon, 1.5)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    light = np.array([0.4, -0.5, 0.77])
    light /= np.linalg.norm(light)
    shade = np.clip(n @ light, 0.0, 1.0)
    att = np.exp(-canon / 25.0)
    img = albedo * (0.3 + 0.7 * shade) * att + 0.5 * (1.0 - att)
    return img + rng.normal(0.0, 0.02, img.shape)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Same seed and config give a bitwise-identical scene."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W = cfg.H, cfg.W
    canon, albedo, factor = _canonical_geometry(rng, cfg)
    scale = np.exp(rng.uniform(*np.log(cfg.scale_range)))
    depth = np.clip(scale * factor * canon, cfg.d_min, cfg.d_max).astype(np.float32)
    image = _render(rng, canon, albedo).astype(np.float32)[..., None]

    gy, gx = np.gradient(np.log(depth.astype(np.float64)))
    edge = np.hypot(gx, gy)
    prob = 1.0 + 4.0 * edge / max(edge.max(), 1e-12)
    prob /= prob.sum()
    picks = rng.choice(H * W, size=cfg.n_returns, replace=False, p=prob.reshape(-1))
    returns = []
    for flat in picks:
        row, col = divmod(int(flat), W)
        d = float(depth[row, col]) + cfg.radar_noise_m * rng.normal()
        d = float(np.float32(np.clip(d, cfg.d_min, cfg.d_max)))
        jitter = int(np.rint(cfg.v_jitter_px * rng.normal()))
        returns.append(RadarReturn(u=col, v=int(np.clip(row + jitter, 0, H - 1)), d=d, v_src=row))

    noise = 1.0 + cfg.main_noise * _smooth_field(rng, H, W)
    main = np.clip(depth * noise, cfg.d_min, cfg.d_max)
    main = np.where(rng.random((H, W)) < cfg.main_dropout, 0.0, main).astype(np.float32)
    sparse = np.where(rng.random((H, W)) < cfg.sparse_frac, depth, 0.0).astype(np.float32)
    return Scene(seed=int(seed), depth_gt=depth, image=image, returns=returns,
                 sparse_gt=sparse, main_gt=main)


def scene_seeds(base_seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(n)]


def generate_dataset(n: int, base_seed: int, cfg: SceneConfig = SceneConfig()) -> list[Scene]:
    return [generate_scene(s, cfg) for s in scene_seeds(base_seed, n)]


# -- file format -----------------------------------------------------------------


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_dataset(path, scenes: list[Scene], cfg: SceneConfig) -> Path:
    """Write the binary dataset and its JSON manifest; returns the manifest path."""
    path = Path(path)
    cfg_json = json.dumps(asdict(cfg), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg_json)), cfg_json,
             struct.pack("<I", len(scenes))]
    for sc in scenes:
        H, W = sc.shape
        C = sc.image.shape[-1]
        table = np.array([(r.u, r.v, -1 if r.v_src is None else r.v_src, r.d) for r in sc.returns],
                         dtype=_RETURN_DTYPE)
        parts += [
            struct.pack("<qIII", sc.seed, H, W, C),
            _f32(sc.depth_gt), _f32(sc.image), _f32(sc.main_gt), _f32(sc.sparse_gt),
            struct.pack("<I", len(table)), table.tobytes(),
        ]
    parts.append(TRAILER)
    path.write_bytes(b"".join(parts))
    manifest = {
        "format": "rmsdepth-synth",
        "version": FORMAT_VERSION,
        "cfg": asdict(cfg),
        "seeds": [sc.seed for sc in scenes],
        "data_file": path.name,
    }
    mpath = manifest_path(path)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(
                f"truncated dataset: wanted {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def read_dataset(path) -> tuple[list[Scene], SceneConfig]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise DatasetFormatError("not an rmsdepth dataset (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"dataset format version {version}, expected {FORMAT_VERSION}")
    cfg = SceneConfig.from_dict(json.loads(r.take(cfg_len)))
    (n,) = r.unpack("<I")
    scenes = []
    for _ in range(n):
        seed, H, W, C = r.unpack("<qIII")
        depth = r.f32((H, W))
        image = r.f32((H, W, C))
        main = r.f32((H, W))
        sparse = r.f32((H, W))
        (n_ret,) = r.unpack("<I")
        table = np.frombuffer(r.take(n_ret * _RETURN_DTYPE.itemsize), dtype=_RETURN_DTYPE)
        returns = [
            RadarReturn(u=int(t["u"]), v=int(t["v"]), d=float(t["d"]),
                        v_src=None if t["v_src"] < 0 else int(t["v_src"]))
            for t in table
        ]
        sc = Scene(seed=seed, depth_gt=depth, image=image, returns=returns,
                   sparse_gt=sparse, main_gt=main)
        sc.check(cfg.d_min, cfg.d_max)
        scenes.append(sc)
    if r.take(len(TRAILER)) != TRAILER:
        raise DatasetFormatError("dataset trailer missing or corrupt")
    if r.pos != len(r.buf):
        raise DatasetFormatError("trailing bytes after dataset trailer")
    return scenes, cfg


def regenerate_from_manifest(path) -> tuple[list[Scene], SceneConfig]:
    """Rebuild scenes from a manifest's config and seed list, without the tensor file."""
    m = json.loads(Path(path).read_text())
    if m.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"manifest version {m.get('version')}, expected {FORMAT_VERSION}")
    cfg = SceneConfig.from_dict(m["cfg"])
    return [generate_scene(s, cfg) for s in m["seeds"]], cfg
