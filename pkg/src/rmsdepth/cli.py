"""Command-line entry points: gen-data, train, eval, bench, parity, ablate.

Exit codes: 0 ok, 1 invariant violation, 2 usage error. ``RMSDEPTH_THREADS``
caps BLAS/OpenMP threads; it is applied before numpy is imported.
"""
from __future__ import annotations

import os
import sys

THREADS_ENV = "RMSDEPTH_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    if "numpy" not in sys.modules:
        for var in _THREAD_VARS:
            os.environ[var] = n
    else:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=int(n))


_apply_thread_env()

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .errors import ConfigError, RmsError  # noqa: E402
from .experiments import (  # noqa: E402
    ABLATION_ARMS,
    TABLE_ARMS,
    ablation_table,
    fallback_check,
    parity_check,
    run_ablation,
    scaling_ratio,
    tier_layout,
)

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("rmsdepth")


class UsageError(Exception):
    pass


def _emit(obj, path: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


# -- run configuration ----------------------------------------------------------------


_TOP_FIELDS = ("epochs", "batch", "seed", "lr0", "deterministic", "out_dir")


class _Flags:
    """Adds options whose metavar is the last component of a dotted config path."""

    def __init__(self, parser):
        self.parser = parser

    def add_argument(self, *names, **kw):
        if "dest" in kw and "action" not in kw and "choices" not in kw:
            kw.setdefault("metavar", kw["dest"].rsplit(".", 1)[-1].upper())
        return self.parser.add_argument(*names, **kw)


def add_run_flags(parser: argparse.ArgumentParser):
    """Flags mirror ``RunConfig`` fields; unset flags leave the config untouched."""
    p = _Flags(parser)
    p.add_argument("--config", help="RunConfig JSON (e.g. a run directory's config.json)")
    p.add_argument("--config-wins", action="store_true",
                   help="let values from --config override explicit flags")
    p.add_argument("--data", dest="data.path", help="dataset file or manifest; generated when absent")
    p.add_argument("--n-scenes", dest="data.n_scenes", type=int)
    p.add_argument("--n-val", dest="data.n_val", type=int)
    p.add_argument("--data-seed", dest="data.seed", type=int)
    p.add_argument("--returns", dest="data.scene.n_returns", type=int)
    p.add_argument("--radar-noise", dest="data.scene.radar_noise_m", type=float)
    p.add_argument("--size", dest="data.scene.H", type=int, help="square image side")
    p.add_argument("--mode", dest="net.mode",
                   choices=["image_only", "horizon", "readout", "joint", "joint_prescan"])
    p.add_argument("--tiers", dest="net.tiers", choices=["default", "uniform_film"])
    p.add_argument("--window", dest="net.window", type=int)
    p.add_argument("--nonzero-radar-init", dest="net.zero_init_radar", action="store_const", const=False)
    p.add_argument("--strict-paper", dest="net.strict_paper", action="store_const", const=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--nondeterministic", dest="deterministic", action="store_const", const=False)
    p.add_argument("--out", dest="out_dir")


def _set(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _flat(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        else:
            out[key] = v
    return out


def build_run_config(args: argparse.Namespace):
    from .train import RunConfig

    base = RunConfig().to_dict()
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    flags = {k: v for k, v in vars(args).items() if v is not None and ("." in k or k in _TOP_FIELDS)}
    if "net.tiers" in flags:
        flags["net.tiers"] = [t.value for t in tier_layout(flags["net.tiers"])]
    if "data.scene.H" in flags:
        flags["data.scene.W"] = flags["data.scene.H"]
    layers = [_flat(file_cfg), flags] if not args.config_wins else [flags, _flat(file_cfg)]
    merged = base
    for layer in layers:
        for k, v in layer.items():
            _set(merged, k, v)
    try:
        return RunConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run configuration: {exc}") from exc


# -- subcommands -------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import SceneConfig, generate_dataset, write_dataset

    cfg = SceneConfig(H=args.size, W=args.size, n_returns=args.returns, radar_noise_m=args.radar_noise)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    scenes = generate_dataset(args.n, args.seed, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mpath = write_dataset(out, scenes, cfg)
    _emit({"data": str(out), "manifest": str(mpath), "n_scenes": len(scenes)}, None)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train_run

    cfg = build_run_config(args)
    summary = train_run(cfg)
    _emit(summary, None)
    return EXIT_OK


def render_depth(depth: np.ndarray, path: Path, d_max: float) -> float:
    """Write a jet-coloured PNG of ``depth`` clipped to ``[0, d_max]``; returns the rendered max."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    clipped = np.clip(depth, 0.0, d_max)
    plt.imsave(path, clipped, cmap="jet", vmin=0.0, vmax=d_max)
    return float(clipped.max())


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, load_scenes, predict_scenes, split

    net, meta = load_model(args.ckpt)
    run_cfg = build_run_config(args)
    scenes = load_scenes(run_cfg.data)
    if args.split != "all":
        train_set, val_set = split(scenes, run_cfg.data.n_val)
        scenes = val_set if args.split == "val" else train_set
    mode = args.eval_mode
    report = evaluate(net, scenes, mode)
    report.update(checkpoint=str(args.ckpt), split=args.split, n_scenes=len(scenes),
                  mode=mode or net.cfg.mode.value, epoch=meta.get("epoch"))
    for block in report["ranges"].values():
        if not all(np.isfinite(v) for v in block.values()):
            _emit(report, args.report)
            return EXIT_VIOLATION
    if args.render:
        rdir = Path(args.render)
        rdir.mkdir(parents=True, exist_ok=True)
        pred = predict_scenes(net, scenes[: args.n_render], mode=mode)
        maxima = [render_depth(p, rdir / f"pred_{s.seed}.png", net.cfg.d_max)
                  for p, s in zip(pred, scenes)]
        report["render"] = {"dir": str(rdir), "count": len(maxima), "max_rendered_m": max(maxima),
                            "colormap": "jet", "clip_m": [0.0, net.cfg.d_max]}
    _emit(report, args.report)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .data import SceneConfig, generate_dataset
    from .geometry import TokenCounter
    from .net import MvspNet, NetConfig, N_LEVELS

    report = {"scaling": scaling_ratio(args.L, args.D, args.N, args.trials)}
    lo, hi = args.ratio_band
    report["scaling"]["band"] = [lo, hi]
    report["scaling"]["ok"] = lo <= report["scaling"]["ratio"] <= hi

    net = MvspNet(NetConfig(), seed=0)
    scenes = generate_dataset(args.batch, 0, SceneConfig())
    images = np.stack([s.image for s in scenes]).astype(np.float64)
    rets = [s.returns for s in scenes]
    t0 = time.perf_counter()
    counts = net.token_counts(images, rets)
    report["tiers"] = {f"L{i}": {"tier": net.cfg.tiers[i].value, "tokens": counts[f"L{i}"]}
                       for i in range(N_LEVELS)}
    report["forward_s"] = time.perf_counter() - t0

    per_level = {}
    for i in range(N_LEVELS):
        per_level[f"L{i}"] = 0.0
    # wall-clock per level: time each fusion call through the token counter labels
    orig = net._fuse

    def timed(i, *a, **kw):
        t = time.perf_counter()
        out = orig(i, *a, **kw)
        per_level[f"L{i}"] += time.perf_counter() - t
        return out

    net._fuse = timed
    net.predict(images, rets)
    net._fuse = orig
    for k, v in per_level.items():
        report["tiers"][k]["fuse_s"] = v

    windowed = {}
    r = np.random.default_rng(1)
    from .radar import RadarReturn

    for n in args.return_counts:
        rr = [[RadarReturn(u=int(r.integers(64)), v=int(r.integers(64)), d=10.0) for _ in range(n)]
              for _ in range(args.batch)]
        with TokenCounter() as tc:
            net.forward(images, rr)
        windowed[str(n)] = tc.counts.get("L2", 0)
    report["windowed_tokens_vs_returns"] = windowed
    zero_ok = windowed.get("0", 0) == 0
    report["zero_return_windowed_ok"] = zero_ok
    _emit(report, args.report)
    return EXIT_OK if report["scaling"]["ok"] and zero_ok else EXIT_VIOLATION


def cmd_parity(args) -> int:
    report = parity_check(args.n, args.seed, zero_init_radar=not args.negative_control)
    if not args.verbose:
        report.pop("cases")
    if args.ckpt:
        report["fallback"] = fallback_check(args.ckpt)
    ok = report["max_abs_diff"] == 0.0 and report.get("fallback", {}).get("max_abs_diff", 0.0) == 0.0
    report["ok"] = ok
    _emit(report, args.report)
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_ablate(args) -> int:
    base = build_run_config(args)
    arms = args.arms or list(TABLE_ARMS)
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise UsageError(f"unknown arms {unknown}; choose from {sorted(ABLATION_ARMS)}")
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(base, arms, out)
    table = ablation_table(rows)
    (out / "ablation.md").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(table)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmsdepth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=240)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--returns", type=int, default=40)
    g.add_argument("--radar-noise", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=["val", "train", "all"], default="val")
    e.add_argument("--eval-mode", choices=["image_only", "horizon", "readout", "joint", "joint_prescan"])
    e.add_argument("--report")
    e.add_argument("--render", help="directory for depth PNGs")
    e.add_argument("--n-render", type=int, default=4)
    add_run_flags(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="scaling and token-count benchmark")
    b.add_argument("--L", type=int, default=4096)
    b.add_argument("--D", type=int, default=32)
    b.add_argument("--N", type=int, default=8)
    b.add_argument("--trials", type=int, default=20)
    b.add_argument("--ratio-band", type=float, nargs=2, default=(1.6, 2.6))
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--return-counts", type=int, nargs="+", default=[0, 10, 20, 40, 80])
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)

    q = sub.add_parser("parity", help="zero-init parity and image-only fallback checks")
    q.add_argument("--n", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--negative-control", action="store_true", help="non-zero radar init; expect failure")
    q.add_argument("--ckpt", help="also check the image-only fallback on this checkpoint")
    q.add_argument("--report")
    q.set_defaults(func=cmd_parity)

    a = sub.add_parser("ablate", help="train and compare fusion variants")
    a.add_argument("--arms", nargs="+", help=f"subset of {sorted(ABLATION_ARMS)}")
    add_run_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RmsError as exc:
        print(f"invariant violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
