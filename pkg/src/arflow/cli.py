"""Command-line entry point: ``arflow {train,eval,demo-transform,gradcheck,plot}``."""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataeval as de
from .network import CheckpointError, FlowNetwork, NetConfig, load_checkpoint, save_checkpoint
from .training import (ConfigError, TrainConfig, TrainingDivergedError, build_dataclass, config_to_text, fit,
                       metrics_to_csv, parse_config_text, read_metrics)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 200
    val_scenes: int = 50
    image_size: int = 64
    data_seed: int = 1

    def __post_init__(self):
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise ConfigError("need at least one training and one validation scene")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")


def _net_config(values: dict[str, str], image_channels: int = 3) -> NetConfig:
    values = dict(values)
    values.setdefault("in_channels", str(image_channels))
    if "levels" in values and "encoder_widths" not in values:
        values["encoder_widths"] = ",".join(["16"] + ["32"] * (int(values["levels"]) - 1))
    return build_dataclass(NetConfig, values)


def load_run_config(path: str | None, overrides: dict[str, str]) -> tuple[TrainConfig, NetConfig, DataConfig]:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides)
    known = set()
    for cls in (TrainConfig, NetConfig, DataConfig):
        known |= {f for f in cls.__dataclass_fields__}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return build_dataclass(TrainConfig, values), _net_config(values), build_dataclass(DataConfig, values)


def _scene_frames(scenes):
    return np.stack([s.frame1 for s in scenes]), np.stack([s.frame2 for s in scenes])


def make_datasets(data: DataConfig):
    """Training and validation scenes, each drawn from its own seed stream."""
    spec = de.SceneSpec(height=data.image_size, width=data.image_size)
    train_seq, val_seq = np.random.SeedSequence(data.data_seed).spawn(2)
    train = [de.generate_scene(spec, np.random.default_rng(s)) for s in train_seq.spawn(data.train_scenes)]
    val = [de.generate_scene(spec, np.random.default_rng(s)) for s in val_seq.spawn(data.val_scenes)]
    return train, val


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    flags = _overrides(args.set or [])
    if args.pretrain_steps is not None:
        flags["pretrain_steps"] = str(args.pretrain_steps)
    if args.steps is not None:
        flags["steps"] = str(args.steps)
        if args.steps == 0 and args.pretrain_steps is None:
            flags["pretrain_steps"] = "0"  # --steps 0 alone means no training at all
    cfg, net_cfg, data = load_run_config(args.config, flags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg, net_cfg, data) + f"seed = {args.seed}\n")
    if args.resume:
        net = load_checkpoint(args.resume, dtype=net_cfg.dtype)
        if replace(net.cfg, dtype=net_cfg.dtype) != net_cfg:
            print(f"note: using architecture stored in {args.resume}", file=sys.stderr)
    else:
        net = FlowNetwork(net_cfg, seed=args.seed)
    train, val = make_datasets(data)

    def validate(n):
        return de.evaluate(n, val).values["ALL"]

    metrics = (out / "metrics.csv").open("w")
    metrics.write(metrics_to_csv([]))

    def on_row(row):
        metrics.write(metrics_to_csv([row]).split("\n", 1)[1])
        metrics.flush()
        if row["val_aepe"] is not None and not args.quiet:
            print(f"step {row['step']:>6}  L_all {row['L_all']:.4f}  val AEPE {row['val_aepe']:.4f}", flush=True)

    try:
        result = fit(net, _scene_frames(train), cfg, seed=args.seed, validate=validate, on_row=on_row)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        save_checkpoint(net, out / "checkpoint.arfw")
        return EXIT_DIVERGED
    finally:
        metrics.close()
    save_checkpoint(result.net, out / "checkpoint.arfw")
    report = de.evaluate(result.net, val)
    report.to_csv(out / "report.csv")
    print(report.table())
    return EXIT_OK


def parse_scene_spec(text: str) -> tuple[de.SceneSpec, int, int, str]:
    """``count=50,seed=2,size=64,kind=random`` plus any SceneSpec field."""
    values = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"scene spec entries are key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    try:
        count = int(values.pop("count", "50"))
        seed = int(values.pop("seed", "2"))
        size = values.pop("size", None)
    except ValueError as exc:
        raise ConfigError(f"bad scene spec: {exc}") from exc
    kind = values.pop("kind", "random")
    if kind not in ("random", "static"):
        raise ConfigError(f"scene kind must be random or static, got {kind!r}")
    if size is not None:
        values.setdefault("height", size)
        values.setdefault("width", size)
    unknown = set(values) - set(de.SceneSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown scene keys: {', '.join(sorted(unknown))}")
    spec = build_dataclass(de.SceneSpec, values)
    try:
        spec.validate()
    except de.ConfigError as exc:
        raise ConfigError(str(exc)) from exc
    if count < 1:
        raise ConfigError("count must be >= 1")
    return spec, count, seed, kind


def cmd_eval(args) -> int:
    spec, count, seed, kind = parse_scene_spec(args.scenes)
    net = load_checkpoint(args.ckpt)
    rng = np.random.default_rng(seed)
    if kind == "static":
        scenes = [de.static_scene(spec, rng) for _ in range(count)]
    else:
        scenes = [de.generate_scene(spec, rng) for _ in range(count)]
    report = de.evaluate(net, scenes)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(args.report)
    print(report.table())
    return EXIT_OK


def _occ_rgb(occ: np.ndarray) -> np.ndarray:
    return np.repeat(occ.astype(np.float64)[..., None], 3, axis=-1)


def cmd_demo_transform(args) -> int:
    from .transform import (AppearanceRanges, OcclusionRanges, SpatialRanges, TransformRanges, augment_pair,
                            sample_augmentation, transform_flow, transform_occlusion)

    rng = np.random.default_rng(args.seed)
    spec = de.SceneSpec(height=args.size, width=args.size)
    scene = de.generate_scene(spec, rng)
    ranges = TransformRanges(
        spatial=SpatialRanges(args.rotation, args.translation, (1.0, args.zoom_max)),
        appearance=AppearanceRanges(),
        occlusion=OcclusionRanges(crop_fraction=args.crop_fraction, max_mask=args.max_mask),
        use_appearance=not args.no_appearance)
    aug = sample_augmentation(rng, ranges, (args.size, args.size))
    a, b, _ = augment_pair(scene.frame1, scene.frame2, aug, rng)
    flow_t = transform_flow(scene.flow, aug.transform, aug.extent)
    occ_t, _ = transform_occlusion(scene.occlusion, flow_t, aug.transform, aug.extent)
    vmax = max(float(np.hypot(*scene.flow.transpose(2, 0, 1)).max()), 1e-6)
    top = [scene.frame1, scene.frame2, de.flow_to_color(scene.flow, vmax), _occ_rgb(scene.occlusion)]
    bottom = [a, b, de.flow_to_color(flow_t, vmax), _occ_rgb(occ_t)]
    h, w = scene.frame1.shape[:2]
    gap = 2
    canvas = np.ones((2 * h + gap, 4 * w + 3 * gap, 3))
    for row, panels in enumerate((top, bottom)):
        for col, img in enumerate(panels):
            img = img if img.shape[-1] == 3 else np.repeat(img, 3, axis=-1)
            y0, x0 = row * (h + gap), col * (w + gap)
            canvas[y0:y0 + img.shape[0], x0:x0 + img.shape[1]] = img
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    de.save_png(out / "demo.png", canvas)
    names = ("frame1", "frame2", "flow", "occlusion")
    for tag, panels in (("original", top), ("transformed", bottom)):
        for name, img in zip(names, panels):
            de.save_png(out / f"{tag}_{name}.png", img)
    (out / "transform.txt").write_text("".join(f"{k} = {v}\n" for k, v in aug.as_dict().items()))
    print(f"wrote {out / 'demo.png'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import FD_RTOL, run_suites

    results = run_suites(seed=args.seed)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<26} rel.err {r.max_rel_error:.2e}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed (tolerance {FD_RTOL:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    print(f"all {len(results)} checks within {FD_RTOL:g}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics(args.metrics)
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("L_ph", "L_sm", "L_aug", "L_all"):
        ax1.plot(steps, [r[key] for r in rows], label=key, linewidth=1)
    ax1.set_xlabel("step")
    ax1.set_yscale("symlog", linthresh=1e-3)
    ax1.legend()
    val = [(r["step"], r["val_aepe"]) for r in rows if r["val_aepe"] is not None]
    if val:
        ax2.plot(*zip(*val), marker="o")
    ax2.set_xlabel("step")
    ax2.set_ylabel("validation AEPE (px)")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arflow", description="Unsupervised optical flow with augmentation consistency.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetic scenes")
    t.add_argument("--config", help="flat key = value configuration file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--pretrain-steps", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on synthetic scenes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenes", default="count=50,seed=2", help="e.g. count=50,seed=2,size=64,kind=static")
    e.add_argument("--report", help="CSV path for the report")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo-transform", help="render original and transformed views side by side")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--rotation", type=float, default=15.0)
    d.add_argument("--translation", type=float, default=0.1)
    d.add_argument("--zoom-max", type=float, default=1.5)
    d.add_argument("--crop-fraction", type=float, default=0.85)
    d.add_argument("--max-mask", type=int, default=3)
    d.add_argument("--no-appearance", action="store_true")
    d.set_defaults(func=cmd_demo_transform)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="plot a metrics CSV")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def _thread_limit():
    raw = os.environ.get("ARFLOW_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, de.ConfigError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
