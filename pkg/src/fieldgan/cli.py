"""Command-line entry points: train, render, interpolate, mesh, gen-data, eval, bench."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from .autodiff import no_grad
from .checkpoint import load_checkpoint
from .config import parse_config, parse_config_dict, to_train_config
from .data import (Dataset, load_dataset, make_dataset, pose_from_angles, sample_pose,
                   save_dataset, save_png)
from .errors import FieldGANError
from .hypernet import generate_modulations, interpolate_latents, sample_latent
from .meshing import density_grid, marching_cubes, write_obj
from .metrics import MetricReport, image_stats, kid_report
from .render import render_image
from .training import TrainState, init_train_state, render_batch, train_loop


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("HNG_WORKERS")
    return max(1, int(env)) if env else 1


def _latent_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), stream]))


def _dataset_from_config(rc) -> Dataset:
    d = rc.data
    if d["source"] == "png_dir":
        return load_dataset(d["manifest"])
    randomize = tuple(k for k, on in (("color", d["randomize_color"]),
                                      ("size", d["randomize_size"])) if on)
    return make_dataset(d["n_scenes"], rc.poses, randomize=randomize,
                        size=d["image_size"], seed=rc.seed,
                        primitive=d["primitive"], background=tuple(d["background"]))


def _load_state(args) -> TrainState:
    if not args.checkpoint:
        raise IOError("this command needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def cmd_train(args) -> int:
    rc = parse_config(args.config)
    tc = to_train_config(rc)
    if args.steps is not None:
        from dataclasses import replace

        tc = replace(tc, total_steps=args.steps)
    dataset = _dataset_from_config(rc)
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    out_dir = args.out or "run"
    state = train_loop(tc, dataset, state=state, out_dir=out_dir)
    print(f"trained to step {state.step}; checkpoint in {out_dir}")
    return 0


def cmd_render(args) -> int:
    state = _load_state(args)
    out_dir = args.out or "renders"
    os.makedirs(out_dir, exist_ok=True)
    cfg = state.cfg
    workers = _workers(args)
    if args.sweep:
        z = sample_latent(_latent_rng(args.seed), cfg.gen_cfg.z_dim)
        with no_grad():
            mods = generate_modulations(z, state.gen_params)
        step = 2.0 * math.pi / args.sweep_steps
        for i in range(args.sweep_steps):
            pose = pose_from_angles(i * step, 0.0, cfg.pose_dist)
            with no_grad():
                img = render_image(pose, state.field_params, mods, cfg.render_cfg,
                                   workers=workers)
            save_png(img.data, os.path.join(out_dir, f"sweep_{i:03d}.png"))
        print(f"wrote {args.sweep_steps} sweep frames to {out_dir}")
        return 0
    for i in range(args.n):
        rng = _latent_rng(args.seed, stream=i)
        z = sample_latent(rng, cfg.gen_cfg.z_dim)
        pose = sample_pose(cfg.pose_dist, rng)
        with no_grad():
            mods = generate_modulations(z, state.gen_params)
            img = render_image(pose, state.field_params, mods, cfg.render_cfg,
                               workers=workers)
        save_png(img.data, os.path.join(out_dir, f"sample_{i:03d}.png"))
    print(f"wrote {args.n} samples to {out_dir}")
    return 0


def render_latent(state: TrainState, z: np.ndarray, pose=None, workers: int = 1):
    cfg = state.cfg
    pose = pose or pose_from_angles(0.0, 0.0, cfg.pose_dist)
    with no_grad():
        mods = generate_modulations(z, state.gen_params)
        return render_image(pose, state.field_params, mods, cfg.render_cfg,
                            workers=workers).data


def cmd_interpolate(args) -> int:
    state = _load_state(args)
    out_dir = args.out or "interp"
    os.makedirs(out_dir, exist_ok=True)
    cfg = state.cfg
    z0 = sample_latent(_latent_rng(args.seed), cfg.gen_cfg.z_dim)
    z1 = sample_latent(_latent_rng(args.seed2), cfg.gen_cfg.z_dim)
    steps = args.steps or 9
    pose = pose_from_angles(0.0, 0.0, cfg.pose_dist)
    frames = []
    for i, z in enumerate(interpolate_latents(z0, z1, steps)):
        img = render_latent(state, z, pose, workers=_workers(args))
        frames.append(img)
        save_png(img, os.path.join(out_dir, f"frame_{i:03d}.png"))
    save_png(np.concatenate(frames, axis=1), os.path.join(out_dir, "strip.png"))
    print(f"wrote {steps} frames and strip.png to {out_dir}")
    return 0


def cmd_mesh(args) -> int:
    state = _load_state(args)
    out = args.out or "mesh.obj"
    if os.path.isdir(out):
        out = os.path.join(out, "mesh.obj")
    z = sample_latent(_latent_rng(args.seed), state.cfg.gen_cfg.z_dim)
    with no_grad():
        mods = generate_modulations(z, state.gen_params)
    grid = density_grid(state.field_params, mods, state.cfg.field_cfg, args.grid_res)
    mesh = marching_cubes(grid, tau=args.tau)
    write_obj(mesh, out)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh)} triangles to {out}")
    return 0


def cmd_gen_data(args) -> int:
    rc = parse_config(args.config) if args.config else parse_config_dict({})
    if args.n is not None:
        rc.data["n_scenes"] = args.n
    out_dir = args.out or "dataset"
    ds = _dataset_from_config(rc)
    manifest = save_dataset(ds, out_dir)
    print(f"wrote {len(ds)} images and {manifest}")
    return 0


def _sample_images(state: TrainState, n: int, seed: int) -> list[np.ndarray]:
    cfg = state.cfg
    out = []
    batch = 8
    for lo in range(0, n, batch):
        count = min(batch, n - lo)
        rng = _latent_rng(seed, stream=1000 + lo)
        z = sample_latent(rng, cfg.gen_cfg.z_dim, batch=count)
        poses = [sample_pose(cfg.pose_dist, rng) for _ in range(count)]
        seeds = rng.integers(0, 2**63, size=count)
        with no_grad():
            mods = generate_modulations(z, state.gen_params)
            imgs = render_batch(poses, state.field_params, mods, cfg.render_cfg,
                                seeds).data
        out.extend(imgs[i] for i in range(count))
    return out


def cmd_eval(args) -> int:
    state = _load_state(args)
    if args.config:
        rc = parse_config(args.config)
        dataset = _dataset_from_config(rc)
        n_eval = rc.metrics["eval_samples"]
        downsample = rc.metrics["kid_downsample"]
    else:
        raise IOError("eval needs --config to locate the dataset")
    fakes = _sample_images(state, n_eval, args.seed)
    reals = [it.image for it in dataset.items]
    report = kid_report(reals, fakes, downsample_to=downsample)
    mean_r, var_r = image_stats(reals)
    mean_f, var_f = image_stats(fakes)
    stats = MetricReport(name="channel_stats", value=float(np.abs(mean_r - mean_f).max()),
                         n_real=len(reals), n_fake=len(fakes),
                         config={"real_mean": mean_r.tolist(), "fake_mean": mean_f.tolist(),
                                 "real_var": var_r.tolist(), "fake_var": var_f.tolist()})
    lines = [report.to_json(), stats.to_json()]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def bench_renderer(state: TrainState, size: int, worker_counts, repeats: int = 2) -> dict:
    """Throughput in ray-samples/second per worker count, plus bit-identity."""
    from dataclasses import replace

    cfg = replace(state.cfg.render_cfg, width=size, height=size)
    z = sample_latent(_latent_rng(0), state.cfg.gen_cfg.z_dim)
    with no_grad():
        mods = generate_modulations(z, state.gen_params)
    pose = pose_from_angles(0.7, 0.2, state.cfg.pose_dist)
    results = {}
    images = {}
    for w in worker_counts:
        with no_grad():
            render_image(pose, state.field_params, mods, cfg, workers=w)  # warmup
            t0 = time.time()
            for _ in range(repeats):
                img = render_image(pose, state.field_params, mods, cfg, workers=w)
            dt = (time.time() - t0) / repeats
        images[w] = img.data
        results[w] = size * size * cfg.samples_per_ray / dt
    base = images[worker_counts[0]]
    identical = all(np.array_equal(base, images[w]) for w in worker_counts)
    return {"ray_samples_per_s": {str(w): round(v, 1) for w, v in results.items()},
            "bit_identical_across_workers": bool(identical),
            "image_size": size, "samples_per_ray": cfg.samples_per_ray}


def cmd_bench(args) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    else:
        rc = parse_config_dict({"field": {"hidden_width": 64, "hidden_layers": 2},
                                "generator": {"z_dim": 32, "trunk_width": 128}})
        state = init_train_state(to_train_config(rc))
    workers = _workers(args)
    counts = [1] + ([workers] if workers > 1 else [2, 4])
    report = bench_renderer(state, args.size, counts)
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldgan",
                                description="Train and sample a hypernetwork GAN "
                                            "over radiance fields.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--checkpoint", help="checkpoint file")
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--seed", type=int, default=0, help="latent/draw seed")
        sp.add_argument("--workers", type=int, default=None,
                        help="render workers (env HNG_WORKERS as fallback)")

    sp = sub.add_parser("train", help="run the adversarial loop")
    common(sp)
    sp.add_argument("--steps", type=int, default=None, help="override total_steps")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("render", help="render samples or a pose sweep")
    common(sp)
    sp.add_argument("--n", type=int, default=8, help="number of random samples")
    sp.add_argument("--sweep", action="store_true",
                    help="render one latent from a single-axis circle")
    sp.add_argument("--sweep-steps", type=int, default=72)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("interpolate", help="render a linear latent path")
    common(sp)
    sp.add_argument("--seed2", type=int, default=1, help="seed of the far endpoint")
    sp.add_argument("--steps", type=int, default=9)
    sp.set_defaults(fn=cmd_interpolate)

    sp = sub.add_parser("mesh", help="extract an OBJ isosurface for a latent")
    common(sp)
    sp.add_argument("--grid-res", type=int, default=64)
    sp.add_argument("--tau", type=float, default=10.0)
    sp.set_defaults(fn=cmd_mesh)

    sp = sub.add_parser("gen-data", help="write a procedural dataset + manifest")
    common(sp)
    sp.add_argument("--n", type=int, default=None, help="number of scenes")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("eval", help="kernel score and channel stats vs a dataset")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="renderer throughput single vs multi worker")
    common(sp)
    sp.add_argument("--size", type=int, default=64)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FieldGANError, IOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
