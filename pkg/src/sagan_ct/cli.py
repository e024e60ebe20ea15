"""Command-line entry points: simulate, distill, train, denoise, eval, sharpmap.

Exit codes: 0 success, 2 I/O or configuration error, 3 training or
inference aborted on non-finite values. Settings resolve as command-line flag,
then config file, then built-in default; the resolved settings are printed
as one JSON line at startup.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import nn
from .imaging import Image2D, ImageFormatError, RoiRect, apply_window, read_image, write_image, write_pgm
from .metrics import MetricReport, append_csv, evaluate, find_flat_rois, line_profile, modulation_depth
from .models import HuNormalization, generator_denoise
from .phantoms import line_pair_module, random_ellipse_phantom, shepp_logan
from .physics import MU_WATER, FanBeamGeometry, NoiseModelParams, desk_equivalent_n0, geometry_dict, simulate_ldct
from .sharpness import DistillConfig, distill_sharpness_net, make_distillation_set, sharpness_map

EXIT_OK = 0
EXIT_IO = 2
EXIT_NONFINITE = 3


class ConfigError(ValueError):
    pass


def _read_config(path, section):
    if path is None:
        return {}
    from .trainer import tomllib

    path = Path(path)
    try:
        if path.suffix == ".toml":
            with path.open("rb") as fh:
                data = tomllib.load(fh)
        elif path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            raise ConfigError(f"config must be .toml or .json, got {path.name}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return data.get(section, data)


def _resolve(defaults, file_values, cli_values):
    """flag > file > default; unknown file keys are rejected."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in cli_values.items() if v is not None and k in defaults})
    return out


def _announce(command, settings):
    print(json.dumps({"command": command, "config": settings}, sort_keys=True, default=str), flush=True)


def _pgm(path, img: Image2D):
    write_pgm(path, apply_window(img))


# -- simulate ------------------------------------------------------------------

SIMULATE_DEFAULTS = {
    "phantom": "random",
    "n": 64,
    "n0": 3e4,
    "sigma_e": 0.0,
    "seed": 0,
    "count": 1,
    "pixel_spacing": None,
    "desk_flux": True,
    "pgm": False,
}


def _phantom(kind, seed, n, spacing):
    if kind == "shepp":
        sl = shepp_logan(n, spacing)
        # unit attenuation scale of the analytic phantom mapped onto water = 1
        mu = sl.data * MU_WATER
        return sl.with_data(1000.0 * (mu - MU_WATER) / MU_WATER)
    if kind == "random":
        return random_ellipse_phantom(seed, n, spacing)
    if kind == "linepair":
        return line_pair_module(n, pixel_spacing=spacing)
    raise ConfigError(f"unknown phantom {kind!r} (expected shepp, random or linepair)")


def cmd_simulate(args):
    s = _resolve(SIMULATE_DEFAULTS, _read_config(args.config, "simulate"), vars(args))
    if s["pixel_spacing"] is None:
        s["pixel_spacing"] = 0.5 if s["phantom"] == "linepair" else 2.0 if s["phantom"] == "random" else 1.0
    _announce("simulate", s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n, spacing = int(s["n"]), float(s["pixel_spacing"])
    geom = FanBeamGeometry.for_image(n, spacing)
    flux = desk_equivalent_n0(s["n0"], geom.n_views, spacing) if s["desk_flux"] else float(s["n0"])
    entries = []
    for i in range(int(s["count"])):
        seed = int(s["seed"]) + i
        gt = _phantom(s["phantom"], seed, n, spacing)
        noise = NoiseModelParams(flux, float(s["sigma_e"]), seed)
        ldct = simulate_ldct(gt, geom, noise, units="hu")
        stem = f"pair_{i:03d}"
        write_image(out / f"{stem}_convct.ldct", gt)
        write_image(out / f"{stem}_ldct.ldct", ldct)
        if s["pgm"]:
            _pgm(out / f"{stem}_convct.pgm", gt)
            _pgm(out / f"{stem}_ldct.pgm", ldct)
        entries.append({"convct": f"{stem}_convct.ldct", "ldct": f"{stem}_ldct.ldct", "seed": seed,
                        "noise": {"n0": noise.n0, "sigma_e": noise.sigma_e, "seed": noise.seed}})
    manifest = {
        "phantom": s["phantom"],
        "n": n,
        "pixel_spacing": spacing,
        "reference_n0": float(s["n0"]),
        "desk_flux": bool(s["desk_flux"]),
        "photon_floor": 1.0,
        "units": "HU",
        "geometry": geometry_dict(geom),
        "pairs": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(entries)} pair(s) to {out}")
    return EXIT_OK


# -- distill -------------------------------------------------------------------

DISTILL_DEFAULTS = {"n_images": 512, "n": 64, "epochs": 16, "seed": 0, "base_width": 16, "n_residual": 3,
                    "lr": 1e-4, "batch_size": 4}


def cmd_distill(args):
    from .trainer import save_sharpness_net

    s = _resolve(DISTILL_DEFAULTS, _read_config(args.config, "distill"), vars(args))
    _announce("distill", s)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data = make_distillation_set(int(s["n_images"]), n=int(s["n"]), seed=int(s["seed"]))
    cfg = DistillConfig(epochs=int(s["epochs"]), batch_size=int(s["batch_size"]), lr=float(s["lr"]),
                        seed=int(s["seed"]), base_width=int(s["base_width"]), n_residual=int(s["n_residual"]))
    net = distill_sharpness_net(data, cfg, on_epoch=lambda e, loss: print(f"epoch {e + 1} mse={loss:.6f}", flush=True))
    save_sharpness_net(args.out, net, {"distill": s})
    print(f"wrote {args.out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def cmd_train(args):
    from .trainer import TrainConfig, load_sharpness_net, make_training_set, train

    file_values = _read_config(args.config, "train")
    base = TrainConfig.from_dict(file_values).to_dict()
    overrides = {k: getattr(args, k) for k in ("seed", "epochs", "max_steps", "lambda1", "lambda2",
                                                "sharpness_net", "checkpoint_every", "n_images", "per_dose_n0")}
    if args.no_sharpness:
        overrides["sharpness_loss_enabled"] = False
    settings = _resolve(base, {}, overrides)
    cfg = TrainConfig.from_dict(settings)
    _announce("train", cfg.to_dict())
    S = None
    if cfg.uses_sharpness and args.resume is None:
        if cfg.sharpness_net is None:
            raise ConfigError("lambda2 > 0 needs a sharpness network (sharpness_net = path to a distilled S)")
        S = load_sharpness_net(cfg.sharpness_net)
    data = make_training_set(cfg.n_images, n0_grid=cfg.n0_grid, seed=cfg.seed, n=cfg.image_size,
                             pixel_spacing=cfg.pixel_spacing, per_dose_n0=cfg.per_dose_n0,
                             crop=cfg.crop_size)

    def report(state, summary):
        print(f"epoch {state.epoch} step {state.step} "
              + " ".join(f"{k}={v:.6f}" for k, v in summary.items()), flush=True)

    state = train(cfg, data, args.out, S=S, resume=args.resume, on_epoch=report)
    print(f"finished at step {state.step}; checkpoints and history.csv in {args.out}")
    return EXIT_OK


# -- denoise -------------------------------------------------------------------


def pad_to_multiple(data, m=4):
    """Symmetric (mirror) padding up to a multiple of ``m``; returns the array and the crop slice."""
    h, w = data.shape
    ph, pw = (-h) % m, (-w) % m
    pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    padded = np.pad(data, pads, mode="symmetric")
    return padded, np.s_[pads[0][0]:pads[0][0] + h, pads[1][0]:pads[1][0] + w]


def denoise_image(G, img: Image2D, norm: HuNormalization = HuNormalization()) -> Image2D:
    padded, crop = pad_to_multiple(img.data)
    out = generator_denoise(G, img.with_data(padded), norm)
    return img.with_data(out.data[crop])


def cmd_denoise(args):
    from .trainer import load_generator

    _announce("denoise", {"checkpoint": args.checkpoint, "input": args.input, "output": args.output})
    G = load_generator(args.checkpoint)
    out = denoise_image(G, read_image(args.input), G.hu_norm)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_image(args.output, out)
    if args.pgm:
        _pgm(Path(args.output).with_suffix(".pgm"), out)
    print(f"wrote {args.output}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def _profile_rows(cand, ref, line, n):
    p0, p1 = (line[0], line[1]), (line[2], line[3])
    a = line_profile(cand, p0, p1, n)
    b = line_profile(ref, p0, p1, n)
    return [(i, float(t), float(x), float(y)) for i, (t, x, y) in enumerate(zip(np.linspace(0, 1, n), a, b))], a, b


def cmd_eval(args):
    settings = {"pairs": args.pair, "rois": args.roi, "auto_rois": args.auto_rois, "line": args.line,
                "n": args.n, "n_bars": args.n_bars, "sharpmap": args.sharpmap}
    _announce("eval", settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    if csv_path.exists():
        csv_path.unlink()
    rows, reports = [], []
    for cand_path, ref_path in args.pair:
        cand, ref = read_image(cand_path), read_image(ref_path)
        if cand.shape != ref.shape:
            raise ConfigError(f"{cand_path} and {ref_path} differ in shape")
        rois = [RoiRect(*r) for r in args.roi or []]
        if args.auto_rois:
            rois += find_flat_rois(ref, args.auto_rois)
        name = Path(cand_path).stem
        meta = {"candidate": str(cand_path), "reference": str(ref_path)}
        if args.line is not None:
            prof, a, b = _profile_rows(cand, ref, args.line, args.n)
            with (out / f"{name}_profile.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("index", "t", "candidate", "reference"))
                w.writerows(prof)
            if args.n_bars:
                meta["modulation_depth"] = modulation_depth(a, args.n_bars)
                meta["reference_modulation_depth"] = modulation_depth(b, args.n_bars)
        report = evaluate(cand, ref, rois, metadata=meta)
        (out / f"{name}.json").write_text(report.to_json() + "\n")
        if args.sharpmap:
            for tag, img in (("candidate", cand), ("reference", ref)):
                m = sharpness_map(img)
                write_image(out / f"{name}_{tag}_sharpmap.ldct", img.with_data(m))
                write_pgm(out / f"{name}_{tag}_sharpmap.pgm", np.round(m * 255).astype(np.uint8))
        reports.append(report)
        rows.append(report.csv_row(name))
        print(f"{name}: psnr={report.psnr:.3f} ssim={report.ssim:.4f} noise={report.noise_level:.3f}")
    finite = [r.psnr for r in reports if math.isfinite(r.psnr)]
    agg = MetricReport(float(np.mean(finite)) if finite else math.inf,
                       float(np.mean([r.ssim for r in reports])),
                       float(np.mean([r.noise_level for r in reports])),
                       metadata={"pairs": len(reports)})
    rows.append(agg.csv_row("mean"))
    (out / "aggregate.json").write_text(agg.to_json() + "\n")
    append_csv(csv_path, rows)
    print(f"mean: psnr={agg.psnr:.3f} ssim={agg.ssim:.4f}")
    return EXIT_OK


# -- sharpmap ------------------------------------------------------------------


def cmd_sharpmap(args):
    _announce("sharpmap", {"input": args.input, "output": args.output})
    img = read_image(args.input)
    m = sharpness_map(img)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_image(args.output, img.with_data(m))
    if args.pgm:
        write_pgm(Path(args.output).with_suffix(".pgm"), np.round(m * 255).astype(np.uint8))
    print(f"mean sharpness {m.mean():.5f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sagan-ct", description="Low-dose CT simulation and denoising.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write ground-truth / low-dose pairs")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--phantom", choices=("shepp", "random", "linepair"))
    s.add_argument("--n", type=int)
    s.add_argument("--n0", type=float, help="blank flux on the reference scanner scale")
    s.add_argument("--sigma-e", dest="sigma_e", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--pixel-spacing", dest="pixel_spacing", type=float)
    s.add_argument("--raw-flux", dest="desk_flux", action="store_const", const=False,
                   help="use n0 as the detector flux directly instead of the desk-equivalent")
    s.add_argument("--pgm", action="store_const", const=True)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("distill", help="distill the sharpness network")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    for name, typ in (("n-images", int), ("n", int), ("epochs", int), ("seed", int), ("base-width", int),
                      ("n-residual", int), ("lr", float), ("batch-size", int)):
        d.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    d.set_defaults(func=cmd_distill)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--sharpness-net", dest="sharpness_net")
    t.add_argument("--no-sharpness", action="store_true")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--n-images", dest="n_images", type=int)
    t.add_argument("--per-dose-n0", dest="per_dose_n0", type=float)
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("denoise", help="denoise one image with a trained generator")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--input", required=True)
    n.add_argument("--output", required=True)
    n.add_argument("--pgm", action="store_true")
    n.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="PSNR / SSIM / ROI noise for candidate-reference pairs")
    e.add_argument("--pair", nargs=2, action="append", required=True, metavar=("CANDIDATE", "REFERENCE"))
    e.add_argument("--out", required=True)
    e.add_argument("--roi", nargs=4, type=int, action="append", metavar=("X0", "Y0", "W", "H"))
    e.add_argument("--auto-rois", dest="auto_rois", type=int, default=0,
                   help="add up to this many flat 21x21 ROIs found on the reference")
    e.add_argument("--line", nargs=4, type=float, metavar=("X0", "Y0", "X1", "Y1"))
    e.add_argument("--n", type=int, default=30)
    e.add_argument("--n-bars", dest="n_bars", type=int, default=0,
                   help="also report the modulation depth of a bar group along --line")
    e.add_argument("--sharpmap", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("sharpmap", help="analytic sharpness map of one image")
    m.add_argument("--input", required=True)
    m.add_argument("--output", required=True)
    m.add_argument("--pgm", action="store_true")
    m.set_defaults(func=cmd_sharpmap)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except nn.NonFiniteError as exc:
        print(f"error: aborted on non-finite values: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, ImageFormatError, nn.CheckpointError, ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
