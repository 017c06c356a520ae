"""Command-line interface.

Every run resolves a plain key=value config (sections [model], [train],
[schedule], [run]; unknown keys rejected), applies flag overrides, and
writes the resolved config and tool version next to its artifacts.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
from pathlib import Path


from . import __version__, data_io, diffusion, metrics, tasks, training
from .errors import PointdiffError
from .geometry import PointCloud
from .model import Model, ModelConfig
from .training import TrainConfig

_SCHEDULE_KEYS = {"timesteps", "beta_start", "beta_end", "residual"}
_RUN_KEYS = {"manifest", "target_points", "out_dir", "seed", "grid", "visible_fraction"}


class UsageError(PointdiffError):
    pass


def _known_keys():
    return {
        "model": {f.name for f in dataclasses.fields(ModelConfig)},
        "train": {f.name for f in dataclasses.fields(TrainConfig)},
        "schedule": _SCHEDULE_KEYS,
        "run": _RUN_KEYS,
    }


def load_run_config(path):
    """Parse the sectioned key=value config file; reject unknown keys."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    known = _known_keys()
    out = {section: {} for section in known}
    for section in parser.sections():
        if section not in known:
            raise UsageError(f"unknown config section [{section}]")
        for key, value in parser[section].items():
            if key not in known[section]:
                raise UsageError(f"unknown key {key!r} in section [{section}]")
            out[section][key] = value
    return out


def _coerce(value, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on") if isinstance(value, str) else bool(value)
    return target_type(value)


def _build_dataclass(cls, raw, overrides):
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in merged:
            value = merged[f.name]
            base = f.type if isinstance(f.type, type) else type(f.default)
            if isinstance(value, str) and base in (int, float, bool):
                value = _coerce(value, base)
            kwargs[f.name] = value
    return cls(**kwargs)


def _schedule_from(raw, args):
    T = int(getattr(args, "timesteps", None) or raw.get("timesteps", 200))
    return diffusion.build_schedule(
        T,
        float(raw.get("beta_start", 1e-4)),
        float(raw.get("beta_end", 0.05)),
    ), raw.get("residual", diffusion.RESIDUAL_SQRT_SIGMA)


def write_run_metadata(out_dir, model_cfg=None, train_cfg=None, schedule_raw=None, run_raw=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# pointdiff {__version__}", f"# precision {os.environ.get('POINTDIFF_PRECISION', '64')}"]
    for section, payload in (
        ("model", model_cfg.to_dict() if model_cfg else None),
        ("train", dataclasses.asdict(train_cfg) if train_cfg else None),
        ("schedule", schedule_raw),
        ("run", run_raw),
    ):
        if not payload:
            continue
        lines.append(f"[{section}]")
        for key, value in payload.items():
            if hasattr(value, "value"):
                value = value.value
            lines.append(f"{key} = {value}")
    (out_dir / "resolved_config.ini").write_text("\n".join(lines) + "\n")


def _load_dataset(run_raw):
    manifest_path = run_raw.get("manifest")
    if not manifest_path:
        raise UsageError("config [run] must name a dataset manifest")
    target = int(run_raw.get("target_points", 2048))
    manifest = data_io.read_manifest(manifest_path, target)
    return manifest.load(split="train")


def _load_model(path) -> Model:
    if not path:
        raise UsageError("a model checkpoint is required (--ckpt-decoder)")
    if not os.path.exists(path):
        raise PointdiffError(f"missing checkpoint: {path}")
    return training.load_model(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cloud = data_io.synth_shape(args.kind, args.n, args.sigma, args.seed)
    data_io.save_cloud(cloud, args.out)
    print(f"wrote {args.out} ({len(cloud)} points)")


def cmd_train_encoder(args):
    cfgfile = load_run_config(args.config)
    model_cfg = _build_dataclass(ModelConfig, cfgfile["model"], {"mask_ratio": args.mask_ratio})
    train_cfg = _build_dataclass(
        TrainConfig,
        cfgfile["train"],
        {"seed": args.seed, "mask_strategy": args.mask_strategy, "loss_setting": args.loss_setting},
    )
    dataset = _load_dataset(cfgfile["run"])
    out_dir = Path(args.out or cfgfile["run"].get("out_dir", "."))
    write_run_metadata(out_dir, model_cfg, train_cfg, cfgfile["schedule"], cfgfile["run"])

    model, curve = training.pretrain_encoder(dataset, model_cfg, train_cfg)
    training.save_checkpoint(out_dir / "encoder.ckpt", model_cfg, model.params)
    training.curve_to_csv(curve, out_dir / "encoder_loss.csv")
    print(f"final encoder loss {curve[-1]:.6e}; checkpoint at {out_dir / 'encoder.ckpt'}")


def cmd_train_decoder(args):
    cfgfile = load_run_config(args.config)
    encoder = _load_model(args.ckpt_encoder)
    train_cfg = _build_dataclass(
        TrainConfig,
        cfgfile["train"],
        {"seed": args.seed, "mask_strategy": args.mask_strategy, "loss_setting": args.loss_setting},
    )
    schedule, _ = _schedule_from(cfgfile["schedule"], args)
    dataset = _load_dataset(cfgfile["run"])
    out_dir = Path(args.out or cfgfile["run"].get("out_dir", "."))
    write_run_metadata(out_dir, encoder.cfg, train_cfg, cfgfile["schedule"], cfgfile["run"])

    model, curve, _ = training.train_decoder(dataset, encoder, train_cfg, schedule)
    training.save_checkpoint(out_dir / "decoder.ckpt", model.cfg, model.params)
    training.curve_to_csv(curve, out_dir / "decoder_loss.csv")
    print(f"final decoder loss {curve[-1]:.6e}; checkpoint at {out_dir / 'decoder.ckpt'}")


def _single_cloud_task(args, runner, suffix):
    model = _load_model(args.ckpt_decoder)
    schedule = diffusion.build_schedule(args.timesteps or model.cfg.timesteps)
    cloud, _ = data_io.normalize(data_io.load_cloud(getattr(args, "input")))
    result = runner(model, schedule, cloud)
    out = args.out or str(Path(args.input).with_suffix("")) + f"_{suffix}.ply"
    data_io.save_cloud(result, out)
    print(f"wrote {out} ({len(result)} points)")


def cmd_reconstruct(args):
    def run(model, schedule, cloud):
        return tasks.reconstruct(
            cloud, model, schedule, seed=args.seed, mask_strategy=args.mask_strategy or "random"
        )

    _single_cloud_task(args, run, "recon")


def cmd_complete(args):
    def run(model, schedule, cloud):
        centers = None
        if args.centers:
            centers = data_io.load_cloud(args.centers).points
        return tasks.complete(cloud, model, schedule, seed=args.seed, masked_centers=centers)

    _single_cloud_task(args, run, "complete")


def cmd_upsample(args):
    def run(model, schedule, cloud):
        return tasks.upsample(
            cloud, model, schedule, seed=args.seed, visible_fraction=args.visible_fraction
        )

    _single_cloud_task(args, run, "upsampled")


def cmd_compress(args):
    cfg_raw = load_run_config(args.config)["model"] if args.config else {}
    model_cfg = _build_dataclass(ModelConfig, cfg_raw, {"mask_ratio": args.mask_ratio})
    cloud, _ = data_io.normalize(data_io.load_cloud(args.input))
    blob = tasks.compress(
        cloud,
        model_cfg,
        mask_seed=args.seed,
        quant_bits=args.quant_bits,
        mask_strategy=args.mask_strategy or "random",
    )
    out = args.out or args.input + ".dpc"
    Path(out).write_bytes(blob)
    print(f"wrote {out}: {len(blob)} bytes, bpp {tasks.bpp(blob, len(cloud)):.4f}")


def cmd_decompress(args):
    model = _load_model(args.ckpt_decoder)
    schedule = diffusion.build_schedule(args.timesteps or model.cfg.timesteps)
    raw = Path(args.input).read_bytes()
    cloud = tasks.decompress(raw, model, schedule, seed=args.seed)
    out = args.out or args.input + ".ply"
    data_io.save_cloud(cloud, out)
    print(f"wrote {out} ({len(cloud)} points)")


def _clouds_in_dir(path):
    files = sorted(
        p for p in Path(path).iterdir() if p.suffix.lower() in (".ply", ".xyz", ".txt")
    )
    if not files:
        raise PointdiffError(f"no point cloud files in {path}")
    return [data_io.load_cloud(str(p)) for p in files], [p.stem for p in files]


def cmd_eval(args):
    gen, ids = _clouds_in_dir(args.gen)
    ref, _ = _clouds_in_dir(args.ref)
    report = metrics.evaluate(gen, ref, grid_resolution=args.grid, ids=ids)
    out = args.out or "metrics.csv"
    metrics.report_to_csv(report, out)
    print(
        f"mmd_cd {report.mmd_cd:.6e}  1nn_cd {report.one_nn_cd:.6e}  "
        f"jsd {report.jsd:.6e}  hd {report.hd:.6e}  -> {out}"
    )


def cmd_trace(args):
    model = _load_model(args.ckpt_decoder)
    schedule = diffusion.build_schedule(args.timesteps or model.cfg.timesteps)
    cloud, _ = data_io.normalize(data_io.load_cloud(args.input))
    cfg = model.cfg
    from .geometry import segment

    ps = segment(cloud, cfg.num_groups, cfg.group_size)
    mask = model.draw_mask(args.seed, centers=ps.centers, strategy=args.mask_strategy or "random")
    latent = model.encode(cloud, mask)
    _, steps = tasks.sample_patches(model, latent, schedule, seed=args.seed, trace=True)
    out_dir = Path(args.out or "trace")
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, step in enumerate(steps):
        data_io.save_cloud(PointCloud(step), str(out_dir / f"step_{i:04d}.ply"))
    print(f"wrote {len(steps)} frames under {out_dir}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="pointdiff", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pointdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=False, needs_ckpt=False):
        p.add_argument("--config", help="run config file (key=value sections)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
        p.add_argument("--mask-strategy", dest="mask_strategy", choices=("random", "block"))
        p.add_argument("--timesteps", type=int)
        p.add_argument("--loss-setting", dest="loss_setting",
                       choices=("entire_object", "masked_only"))
        if needs_input:
            p.add_argument("--in", dest="input", required=True, help="input point cloud")
        if needs_ckpt:
            p.add_argument("--ckpt-decoder", dest="ckpt_decoder", required=True,
                           help="trained model checkpoint")

    p = sub.add_parser("synth", help="generate a synthetic shape")
    p.add_argument("--kind", required=True, choices=data_io.SYNTH_KINDS)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-encoder", help="pretrain the encoder")
    common(p)
    p.set_defaults(func=cmd_train_encoder, _needs_config=True)

    p = sub.add_parser("train-decoder", help="train the diffusion decoder")
    common(p)
    p.add_argument("--ckpt-encoder", dest="ckpt_encoder", required=True)
    p.set_defaults(func=cmd_train_decoder, _needs_config=True)

    p = sub.add_parser("reconstruct", help="mask + regenerate a cloud")
    common(p, needs_input=True, needs_ckpt=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("complete", help="fill in a partial cloud")
    common(p, needs_input=True, needs_ckpt=True)
    p.add_argument("--centers", help="side-information file of masked patch centers")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("upsample", help="densify a cloud (Config 2 model)")
    common(p, needs_input=True, needs_ckpt=True)
    p.add_argument("--factor", type=int, help="informational; the factor lives in the checkpoint")
    p.add_argument("--visible-fraction", dest="visible_fraction", type=float, default=0.4)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("compress", help="serialize visible patches + centers")
    common(p, needs_input=True)
    p.add_argument("--quant-bits", dest="quant_bits", type=int, default=10)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="reconstruct a cloud from a blob")
    common(p, needs_input=True, needs_ckpt=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="score generated clouds against references")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--grid", type=int, default=32, help="JSD voxel resolution")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="dump every reverse-sampling step as PLY")
    common(p, needs_input=True, needs_ckpt=True)
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "_needs_config", False) and not args.config:
        print("error: --config is required for training commands", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PointdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
