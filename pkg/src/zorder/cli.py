"""Command-line entry point wiring every stage together.

Subcommands: ``gen-data`` (synthetic scenes), ``train`` (rectified-flow
training with a CSV loss log), ``sample`` (one layout to a PNG), ``eval``
(metric report over a dataset), ``grad-check`` (finite-difference
verification), and ``composite-demo`` (density/transmittance visualization).

Config precedence is built-in defaults, then an optional JSON config file,
then explicit flags; every run prints the fully resolved configuration.
Exit codes: 0 success, 1 usage error, 2 runtime failure. ``ZORDER_THREADS``
caps internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main"]


class _UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse default exits 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(1)


def _apply_thread_cap() -> None:
    cap = os.environ.get("ZORDER_THREADS")
    if not cap:
        return
    import torch

    torch.set_num_threads(max(1, int(cap)))


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def _resolve(defaults: dict, file_values: dict, flag_values: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    for key, value in file_values.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        resolved[key] = value
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _echo(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "config": resolved}, indent=2, sort_keys=True))


def _add_gen_data(sub) -> None:
    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--n", type=int, default=None, help="number of scenes (default 100)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--min-overlap-pairs", type=int, default=None, dest="min_overlap_pairs")
    p.add_argument("--n-min", type=int, default=None, dest="n_min")
    p.add_argument("--n-max", type=int, default=None, dest="n_max")
    p.add_argument("--config", default=None, help="JSON config file")


def _run_gen_data(args) -> int:
    from .synth import GenConfig, export_dataset, generate_scene

    defaults = {"n": 100, "seed": 0, "n_min": 2, "n_max": 4, "min_overlap_pairs": 1}
    resolved = _resolve(
        defaults,
        _load_config_file(args.config),
        {
            "n": args.n,
            "seed": args.seed,
            "n_min": args.n_min,
            "n_max": args.n_max,
            "min_overlap_pairs": args.min_overlap_pairs,
        },
    )
    resolved["out"] = args.out
    _echo("gen-data", resolved)
    config = GenConfig(
        n_min=resolved["n_min"],
        n_max=resolved["n_max"],
        min_overlap_pairs=resolved["min_overlap_pairs"],
    )
    scenes = [
        generate_scene(resolved["seed"] + i, config) for i in range(resolved["n"])
    ]
    export_dataset(scenes, args.out, config=config, seed=resolved["seed"])
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train the layout-conditioned flow model")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="JSON config file (TrainConfig fields)")
    p.add_argument("--log", default=None, help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda-align", type=float, default=None, dest="lambda_align")
    p.add_argument("--fixed-sigma-value", type=float, default=None, dest="fixed_sigma_value")
    for flag in ("learned-sigma", "queried-loss", "occlusion-cond", "instance-decouple"):
        name = flag.replace("-", "_")
        p.add_argument(f"--no-{flag}", action="store_const", const=False, default=None, dest=name)


def _run_train(args) -> int:
    _apply_thread_cap()
    from .flow import TrainConfig, fit, metrics_to_csv, save_model
    from .model import ModelConfig, build_bundle
    from .synth import import_dataset
    import numpy as np

    defaults = TrainConfig().to_dict()
    flag_values = {
        key: getattr(args, key)
        for key in (
            "steps",
            "batch_size",
            "lr",
            "seed",
            "lambda_align",
            "fixed_sigma_value",
            "learned_sigma",
            "queried_loss",
            "occlusion_cond",
            "instance_decouple",
        )
    }
    resolved = _resolve(defaults, _load_config_file(args.config), flag_values)
    resolved_echo = dict(resolved, data=args.data, out=args.out)
    _echo("train", resolved_echo)

    config = TrainConfig.from_dict(resolved)
    model_config = ModelConfig()
    scenes = import_dataset(args.data)
    bundles = [build_bundle(scene.layout, model_config) for scene in scenes]
    images = np.stack([scene.image for scene in scenes])
    model, history = fit(bundles, images, model_config, config)

    save_model(args.out, model, config)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.csv")
    log_path.write_text(metrics_to_csv(history))
    print(f"trained {config.steps} steps; checkpoint {args.out}; loss log {log_path}")
    return 0


def _add_sample(sub) -> None:
    p = sub.add_parser("sample", help="sample an image for one layout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layout", required=True, help="layout JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--png", required=True)
    p.add_argument("--config", default=None, help="JSON config file (SamplerConfig fields)")
    p.add_argument("--num-steps", type=int, default=None, dest="num_steps")
    p.add_argument("--guidance-fraction", type=float, default=None, dest="guidance_fraction")


def _ablation_flags(train_cfg: dict, name: str | None):
    from .model import AblationFlags

    flags = AblationFlags(
        learned_sigma=train_cfg.get("learned_sigma", True),
        fixed_sigma_value=train_cfg.get("fixed_sigma_value", 5.0),
        queried_loss=train_cfg.get("queried_loss", True),
        occlusion_cond=train_cfg.get("occlusion_cond", True),
        instance_decouple=train_cfg.get("instance_decouple", True),
    )
    if name is None:
        return flags
    presets = {
        "full": AblationFlags(),
        "no-occlusion": AblationFlags(occlusion_cond=False),
        "no-decouple": AblationFlags(instance_decouple=False),
        "fixed-sigma": AblationFlags(learned_sigma=False),
    }
    if name not in presets:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(presets)}")
    return presets[name]


def _run_sample(args) -> int:
    _apply_thread_cap()
    from PIL import Image

    from .flow import SamplerConfig, decode_latent, load_model, sample
    from .layout import parse_layout, validate_layout

    defaults = SamplerConfig().to_dict()
    resolved = _resolve(
        defaults,
        _load_config_file(args.config),
        {"seed": args.seed, "num_steps": args.num_steps, "guidance_fraction": args.guidance_fraction},
    )
    resolved_echo = dict(resolved, ckpt=args.ckpt, layout=args.layout, png=args.png)
    _echo("sample", resolved_echo)

    model, ckpt_config = load_model(args.ckpt)
    layout = parse_layout(Path(args.layout).read_text())
    result = validate_layout(layout)
    if not result.ok:
        raise ValueError("invalid layout: " + "; ".join(result.errors))
    config = SamplerConfig.from_dict(resolved)
    flags = _ablation_flags(ckpt_config.get("train", {}), None)
    latent = sample(model, layout, config, flags=flags)
    Image.fromarray(decode_latent(latent), mode="RGB").save(args.png)
    print(f"wrote {args.png}")
    return 0


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--ablation", default=None, help="full | no-occlusion | no-decouple | fixed-sigma")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--num-steps", type=int, default=None, dest="num_steps")
    p.add_argument("--guidance-fraction", type=float, default=None, dest="guidance_fraction")
    p.add_argument("--batch", type=int, default=None, help="scenes per sampler batch (default 50)")


def _run_eval(args) -> int:
    _apply_thread_cap()
    from .flow import SamplerConfig, decode_latent, load_model, sample_batch
    from .metrics import evaluate_scene, report
    from .synth import import_dataset

    defaults = dict(SamplerConfig().to_dict(), batch=50)
    resolved = _resolve(
        defaults,
        _load_config_file(args.config),
        {
            "seed": args.seed,
            "num_steps": args.num_steps,
            "guidance_fraction": args.guidance_fraction,
            "batch": args.batch,
        },
    )
    resolved_echo = dict(resolved, ckpt=args.ckpt, data=args.data, out=args.out, ablation=args.ablation)
    _echo("eval", resolved_echo)

    model, ckpt_config = load_model(args.ckpt)
    flags = _ablation_flags(ckpt_config.get("train", {}), args.ablation)
    scenes = import_dataset(args.data)
    base_seed = resolved["seed"]
    sampler = SamplerConfig(num_steps=resolved["num_steps"], guidance_fraction=resolved["guidance_fraction"], seed=base_seed)
    rows = []
    chunk = max(1, resolved["batch"])
    for start in range(0, len(scenes), chunk):
        part = scenes[start : start + chunk]
        seeds = [base_seed * 100003 + start + k for k in range(len(part))]
        latents = sample_batch(model, [s.layout for s in part], sampler, seeds, flags=flags)
        for k, scene in enumerate(part):
            image = decode_latent(latents[k])
            rows.append(evaluate_scene(image, scene.layout, scene_id=start + k))
    report(rows, args.out)
    print(f"evaluated {len(rows)} scenes; report {args.out}")
    return 0


def _add_grad_check(sub) -> None:
    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=None, help="number of random seeds (default 10)")
    p.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
    p.add_argument("--config", default=None)


def _run_grad_check(args) -> int:
    _apply_thread_cap()
    from .gradcheck import check_alignment_gradients, check_compositor_gradients

    defaults = {"seeds": 10, "seed": 0}
    resolved = _resolve(defaults, _load_config_file(args.config), {"seeds": args.seeds, "seed": args.seed})
    _echo("grad-check", resolved)
    seed_list = [resolved["seed"] + i for i in range(resolved["seeds"])]
    comp_err = check_compositor_gradients(seed_list)
    align_err = check_alignment_gradients(seed_list)
    print(f"compositor max relative error: {comp_err:.3e} (tolerance 1e-05)")
    print(f"alignment max relative error:  {align_err:.3e} (tolerance 1e-04)")
    ok = comp_err < 1e-5 and align_err < 1e-4
    print("gradient check:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


def _add_composite_demo(sub) -> None:
    p = sub.add_parser("composite-demo", help="visualize densities, transmittance, and weights")
    p.add_argument("--layout", required=True, help="layout JSON file")
    p.add_argument("--sigma", required=True, help="JSON density table: {instance id: value or [values]}")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tokens", default=None, help="comma-separated token indices to dump")
    p.add_argument("--grid-size", type=int, default=None, dest="grid_size")
    p.add_argument("--config", default=None)


def _run_composite_demo(args) -> int:
    import numpy as np
    from PIL import Image

    from .compositor import render_weights
    from .grid import TokenGrid, rasterize_box
    from .layout import parse_layout
    from .synth import caption_color

    defaults = {"grid_size": 8, "tokens": ""}
    resolved = _resolve(
        defaults,
        _load_config_file(args.config),
        {"grid_size": args.grid_size, "tokens": args.tokens},
    )
    resolved_echo = dict(resolved, layout=args.layout, sigma=args.sigma, out=args.out)
    _echo("composite-demo", resolved_echo)

    layout = parse_layout(Path(args.layout).read_text())
    sigma_table = json.loads(Path(args.sigma).read_text())
    grid = TokenGrid(resolved["grid_size"], resolved["grid_size"])
    instances = sorted(layout.instances, key=lambda inst: inst.id)
    dim = 3  # RGB feature channels for the visualization

    densities, masks, colors = [], [], []
    for inst in instances:
        raw = sigma_table.get(str(inst.id), sigma_table.get(inst.id))
        if raw is None:
            raise ValueError(f"sigma table is missing instance {inst.id}")
        vec = np.full(dim, float(raw)) if np.isscalar(raw) else np.asarray(raw, dtype=np.float64)
        if vec.shape != (dim,):
            raise ValueError(f"sigma for instance {inst.id} must be scalar or length {dim}")
        densities.append(vec)
        masks.append(rasterize_box(inst.box, grid).bits)
        colors.append(np.array(caption_color(inst.caption), dtype=np.float64) / 255.0)

    n = len(instances)
    occ = np.zeros((n, n), dtype=bool)
    index = {inst.id: k for k, inst in enumerate(instances)}
    for inst in instances:
        for front in inst.occluders:
            occ[index[inst.id], index[front]] = True
    dens = np.stack(densities) if n else np.zeros((0, dim))
    mask_arr = np.stack(masks) if n else np.zeros((0, grid.length), dtype=bool)
    weights, alphas, trans = render_weights(dens, mask_arr, occ)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    upscale = 16

    def to_png(values: np.ndarray) -> Image.Image:
        img = (values.reshape(grid.h, grid.w) * 255).clip(0, 255).astype(np.uint8)
        return Image.fromarray(img, mode="L").resize((grid.w * upscale, grid.h * upscale), Image.NEAREST)

    # One weight heat map per instance, tiled horizontally.
    if n:
        tiles = [np.asarray(to_png(weights[k, :, 0])) for k in range(n)]
        spacer = np.full((tiles[0].shape[0], 4), 255, dtype=np.uint8)
        strip = np.concatenate([part for tile in tiles for part in (tile, spacer)][:-1], axis=1)
        Image.fromarray(strip, mode="L").save(out_dir / "weights.png")

    # Composited RGB visualization from the instances' palette colors.
    feats = np.zeros((n, grid.length, dim))
    for k in range(n):
        feats[k][mask_arr[k]] = colors[k]
    total_w = weights.sum(axis=0)
    weighted = (weights * feats).sum(axis=0) / (total_w + 1e-8)
    cover = np.maximum(mask_arr.sum(axis=0), 1)[:, None]
    fallback = (mask_arr[:, :, None] * feats).sum(axis=0) / cover
    composite_rgb = np.where(total_w > 0, weighted, fallback)
    rgb = (composite_rgb.reshape(grid.h, grid.w, 3) * 255).clip(0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").resize((grid.w * upscale, grid.h * upscale), Image.NEAREST).save(
        out_dir / "composite.png"
    )

    token_list = [int(tok) for tok in str(resolved["tokens"]).split(",") if tok != ""]
    dump = []
    for u in token_list:
        row, col = u // grid.w, u % grid.w
        entry = {"token": u, "row": row, "col": col, "per_instance": {}}
        for k, inst in enumerate(instances):
            entry["per_instance"][str(inst.id)] = {
                "alpha": alphas[k, u].tolist(),
                "transmittance": trans[k, u].tolist(),
                "weight": weights[k, u].tolist(),
            }
        dump.append(entry)
    (out_dir / "fields.json").write_text(json.dumps({"grid": [grid.h, grid.w], "tokens": dump}, indent=2))
    print(f"wrote visualizations to {out_dir}")
    return 0


_RUNNERS = {
    "gen-data": _run_gen_data,
    "train": _run_train,
    "sample": _run_sample,
    "eval": _run_eval,
    "grad-check": _run_grad_check,
    "composite-demo": _run_composite_demo,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="zorder", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="{gen-data,train,sample,eval,grad-check,composite-demo}")
    _add_gen_data(sub)
    _add_train(sub)
    _add_sample(sub)
    _add_eval(sub)
    _add_grad_check(sub)
    _add_composite_demo(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # -h exits 0; usage errors exit 1
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 0
    try:
        return _RUNNERS[args.command](args)
    except Exception as exc:  # runtime failure contract: message + exit 2
        print(f"zorder {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
