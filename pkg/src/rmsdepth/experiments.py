"""Experiment drivers shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

ABLATION_ARMS = {
    # arm -> (net mode, tier layout)
    "image_only": ("image_only", "default"),
    "uniform_film": ("joint", "uniform_film"),
    "horizon": ("horizon", "default"),
    "readout": ("readout", "default"),
    "joint_prescan": ("joint_prescan", "default"),
    "joint": ("joint", "default"),
}
TABLE_ARMS = ("uniform_film", "horizon", "readout", "joint_prescan", "joint")
ARM_LABELS = {
    "image_only": "Image only",
    "uniform_film": "Uniform FiLM",
    "horizon": "Horizon modulation",
    "readout": "Readout modulation",
    "joint_prescan": "RMS + pre-scan fusion",
    "joint": "Joint modulation",
}


def tier_layout(name: str):
    from .net import DEFAULT_TIERS, UNIFORM_FILM

    layouts = {"default": DEFAULT_TIERS, "uniform_film": UNIFORM_FILM}
    if name not in layouts:
        raise ConfigError(f"unknown tier layout {name!r}; choose from {sorted(layouts)}")
    return layouts[name]



def scan_timing(L: int, D: int, N: int, trials: int, seed: int = 0) -> list[float]:
    from .scan import ModulationMode, SsmParams, TokenStreams, selective_scan_fwd

    rng = np.random.default_rng(seed)
    params = SsmParams.init(D, N, rng, zero_init_radar=False)
    streams = TokenStreams(rng.normal(size=(1, L, D)), rng.normal(size=(1, L, D)))
    selective_scan_fwd(params, streams, ModulationMode.JOINT, keep=False)  # warm-up
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        selective_scan_fwd(params, streams, ModulationMode.JOINT, keep=False)
        times.append(time.perf_counter() - t0)
    return times


def scaling_ratio(L: int = 4096, D: int = 32, N: int = 8, trials: int = 20) -> dict:
    """Median wall-clock of the scan at ``2L`` over ``L``, trials interleaved."""
    short, long_ = [], []
    for i in range(trials):
        short += scan_timing(L, D, N, 1, seed=i)
        long_ += scan_timing(2 * L, D, N, 1, seed=i)
    med_s, med_l = float(np.median(short)), float(np.median(long_))
    return {"L": L, "D": D, "N": N, "trials": trials, "median_s": {str(L): med_s, str(2 * L): med_l},
            "ratio": med_l / med_s}


def parity_check(n: int, seed: int = 0, zero_init_radar: bool = True) -> dict:
    """Joint vs ImageOnly outputs of freshly initialised networks over random seeds and shapes."""
    from .net import MvspNet, NetConfig, NetMode
    from .radar import RadarReturn

    rng = np.random.default_rng(seed)
    worst, cases = 0.0, []
    for k in range(n):
        H = int(rng.choice([32, 64]))
        W = int(rng.choice([32, 64]))
        B = int(rng.integers(1, 3))
        widths = tuple(int(x) for x in rng.choice([2, 4, 6], size=5))
        cfg = NetConfig(widths=widths, d_state=int(rng.integers(1, 4)), radar_dim=4, radar_hidden=6,
                        coarse_layers=1, window=int(rng.choice([2, 4])), zero_init_radar=zero_init_radar)
        net = MvspNet(cfg, seed=int(rng.integers(2**31)))
        # random head so the output actually depends on the features
        net.params["head.W"].data = rng.normal(0.0, 0.3, net.params["head.W"].data.shape)
        images = rng.random((B, H, W, 1))
        rets = [[RadarReturn(u=int(rng.integers(W)), v=int(rng.integers(H)), d=float(rng.uniform(1, 79)))
                 for _ in range(int(rng.integers(0, 30)))] for _ in range(B)]
        a = net.predict(images, rets, NetMode.JOINT)
        b = net.predict(images, rets, NetMode.IMAGE_ONLY)
        diff = float(np.max(np.abs(a - b)))
        worst = max(worst, diff)
        cases.append({"shape": [B, H, W], "widths": list(widths), "diff": diff})
    return {"n": n, "max_abs_diff": worst, "zero_init_radar": zero_init_radar, "cases": cases}


def fallback_check(ckpt, n: int = 4, seed: int = 0) -> dict:
    """Trained checkpoint: empty radar input against the radar-ablated forward pass."""
    from .data import generate_dataset
    from .train import batch_arrays, load_model

    net, _ = load_model(ckpt)
    scenes = generate_dataset(n, seed)
    images, _ = batch_arrays(scenes)
    a = net.predict(images, [[] for _ in scenes])
    b = net.predict_ablated(images)
    return {"checkpoint": str(ckpt), "n": n, "max_abs_diff": float(np.max(np.abs(a - b)))}


def run_ablation(base, arms, out_dir: Path, scenes=None) -> dict:
    """Train each arm on the same data and seed; returns per-arm validation metrics."""
    from .net import MvspNet
    from .train import evaluate, load_model, load_scenes, split, train_run

    if scenes is None:
        scenes = load_scenes(base.data)
    rows = {}
    for arm in arms:
        mode, layout = ABLATION_ARMS[arm]
        cfg = replace(base, net=replace(base.net, mode=mode, tiers=tier_layout(layout)),
                      out_dir=str(out_dir / arm))
        summary = train_run(cfg, scenes)
        net, _ = load_model(Path(cfg.out_dir) / "best.ckpt")
        val = evaluate(net, split(scenes, base.data.n_val)[1])
        rows[arm] = {"label": ARM_LABELS[arm], "best_epoch": summary["epoch"],
                     "params": MvspNet(cfg.net).n_parameters(), "val": val["ranges"]}
    return rows


def ablation_table(rows: dict) -> str:
    keys = ["0-50", "0-70", "0-80"]
    head = "| Variant | " + " | ".join(f"MAE@{k[2:]} | RMSE@{k[2:]}" for k in keys) + " | Params |"
    sep = "|" + "---|" * (1 + 2 * len(keys) + 1)
    lines = [head, sep]
    for arm, row in rows.items():
        cells = []
        for k in keys:
            m = row["val"].get(k)
            cells += [f"{m['MAE']:.1f}", f"{m['RMSE']:.1f}"] if m else ["-", "-"]
        lines.append(f"| {row['label']} | " + " | ".join(cells) + f" | {row['params']} |")
    return "\n".join(lines)


ORDERING_ARMS = ("image_only", "uniform_film", "joint")


def ordering_experiment(base, out_dir, arms=ORDERING_ARMS, scenes=None) -> dict:
    """Train the ordering arms on shared data; returns best validation MAE@80 (mm) per arm."""
    from .losses import range_key

    rows = run_ablation(base, arms, Path(out_dir), scenes=scenes)
    key = range_key(80.0)
    return {arm: rows[arm]["val"][key]["MAE"] for arm in arms}
