"""Training and evaluation loops shared by the CLI and the experiment scripts."""
from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Scene, SceneConfig, generate_dataset, read_dataset, regenerate_from_manifest
from .errors import ConfigError, NonFiniteError
from .losses import DepthNorm, LossWeights, composite_loss, eval_metrics, range_key
from .net import MvspNet, NetConfig

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    path: str | None = None  # dataset file or manifest; generated when None
    n_scenes: int = 240
    n_val: int = 40
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 30
    batch: int = 8
    seed: int = 0
    deterministic: bool = True
    lr0: float = 2e-3
    lr_step_frac: float = 0.1  # absolute decrement per period, as a fraction of lr0
    lr_every: int = 10
    lr_floor_frac: float = 0.5
    out_dir: str = "runs/default"

    def schedule(self) -> ad.StepDecaySchedule:
        return ad.StepDecaySchedule(self.lr0, self.lr_step_frac * self.lr0, self.lr_every,
                                    self.lr_floor_frac)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        data = dict(d.pop("data", {}))
        data["scene"] = SceneConfig.from_dict(data.get("scene", {}))
        return cls(
            data=DataConfig(**data),
            net=NetConfig.from_dict(d.pop("net", {})),
            weights=LossWeights(**d.pop("weights", {})),
            **d,
        )


def load_scenes(dc: DataConfig) -> list[Scene]:
    if dc.path is None:
        return generate_dataset(dc.n_scenes, dc.seed, dc.scene)
    p = Path(dc.path)
    if p.name.endswith(".json"):
        return regenerate_from_manifest(p)[0]
    return read_dataset(p)[0]


def split(scenes: list[Scene], n_val: int) -> tuple[list[Scene], list[Scene]]:
    if not 0 < n_val < len(scenes):
        raise ConfigError(f"n_val={n_val} must leave both splits nonempty ({len(scenes)} scenes)")
    return scenes[:-n_val], scenes[-n_val:]


def batch_arrays(scenes: list[Scene]):
    images = np.stack([s.image for s in scenes]).astype(np.float64)
    return images, [s.returns for s in scenes]


def single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def predict_scenes(net: MvspNet, scenes: list[Scene], batch: int = 16, mode=None) -> np.ndarray:
    out = []
    for i in range(0, len(scenes), batch):
        images, rets = batch_arrays(scenes[i:i + batch])
        out.append(net.predict(images, rets, mode))
    return np.concatenate(out)


def evaluate(net: MvspNet, scenes: list[Scene], mode=None) -> dict:
    """Metrics against the dense ground truth of each scene, pooled over pixels."""
    pred = predict_scenes(net, scenes, mode=mode)
    gt = np.stack([s.depth_gt for s in scenes]).astype(np.float64)
    return eval_metrics(pred, gt, clamp=(0.5, 80.0))


def train_step(net: MvspNet, opt: ad.AdamState, scenes: list[Scene], weights: LossWeights) -> dict:
    images, rets = batch_arrays(scenes)
    main = np.stack([s.main_gt for s in scenes]).astype(np.float64)
    sparse = np.stack([s.sparse_gt for s in scenes]).astype(np.float64)
    norm = DepthNorm(net.cfg.d_min, net.cfg.d_max)
    breakdown = {}

    def loss_fn():
        pred = net.forward(images, rets)
        loss, parts = composite_loss(pred, main, sparse, weights, norm)
        breakdown.update(parts)
        return loss

    value, grads = ad.grad_of(net.params, loss_fn)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss became non-finite ({value})")
    ad.adam_step(opt, net.params, grads)
    return breakdown


def model_checkpoint(net: MvspNet, opt: ad.AdamState | None, meta: dict) -> tuple[dict, dict]:
    tensors = {f"param.{k}": v for k, v in net.state_dict().items()}
    if opt is not None:
        tensors.update({f"adam.m.{k}": v for k, v in opt.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in opt.v.items()})
        meta = dict(meta, adam={"step": opt.step, "lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps})
    return tensors, dict(meta, net=net.cfg.to_dict(), version=__version__)


def load_model(path) -> tuple[MvspNet, dict]:
    tensors, meta = load_checkpoint(path)
    net = MvspNet(NetConfig.from_dict(meta["net"]))
    net.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    return net, meta


def train_run(cfg: RunConfig, scenes: list[Scene] | None = None, out_dir=None) -> dict:
    """Train per ``cfg``; writes config, per-epoch log and checkpoints into the run directory.

    Returns a summary with the best validation MAE@80 and its epoch.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if scenes is None:
        scenes = load_scenes(cfg.data)
    train_set, val_set = split(scenes, cfg.data.n_val)
    (out / "data_seeds.json").write_text(json.dumps([s.seed for s in scenes]) + "\n")

    net = MvspNet(cfg.net, seed=cfg.seed)
    opt = ad.AdamState.for_params(net.params, lr=cfg.lr0)
    sched = cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    log_path = out / "log.jsonl"
    log_path.write_text("")
    key80 = range_key(80.0)
    best = {"mae80": float("inf"), "epoch": -1}
    guard = single_thread() if cfg.deterministic else contextlib.nullcontext()
    with guard:
        for epoch in range(cfg.epochs):
            opt.lr = sched.lr_at(epoch)
            order = rng.permutation(len(train_set))
            sums: dict[str, float] = {}
            n_batches = 0
            for i in range(0, len(order), cfg.batch):
                batch = [train_set[j] for j in order[i:i + cfg.batch]]
                try:
                    parts = train_step(net, opt, batch, cfg.weights)
                except NonFiniteError:
                    log.error("non-finite loss at epoch %d; last good checkpoint kept in %s", epoch, out)
                    raise
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            val = evaluate(net, val_set)
            mae80 = val["ranges"].get(key80, {}).get("MAE", float("inf"))
            record = {
                "epoch": epoch,
                "lr": opt.lr,
                "train": {k: v / max(n_batches, 1) for k, v in sums.items()},
                "val": val["ranges"],
            }
            with log_path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            tensors, meta = model_checkpoint(net, opt, {"epoch": epoch, "val_mae80": mae80})
            save_checkpoint(out / "last.ckpt", tensors, meta)
            if mae80 < best["mae80"]:
                best = {"mae80": mae80, "epoch": epoch}
                save_checkpoint(out / "best.ckpt", tensors, meta)
            log.info("epoch %d lr %.2e loss %.4f val MAE@80 %.1f mm", epoch, opt.lr,
                     record["train"].get("total", float("nan")), mae80)
    summary = dict(best, final_mae80=mae80, epochs=cfg.epochs, out_dir=str(out))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
