"""Command-line interface.

Subcommands cover the full pipeline: synthesizing and degrading sequences,
stabilizing and inverting them, dataset diagnostics, training, evaluation,
novel-view rendering and the ablation study. Every option can also be
supplied through a flat `key=value` config file (`--config`); explicit
flags win over the config file, which wins over built-in defaults. Each run
writes a JSON manifest next to its outputs.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    DiagnosticsError,
    dynamic_range_report,
    mean_intensity_drift,
    radial_power_spectrum,
    write_drift_csv,
    write_range_csv,
    write_spectrum_csv,
)
from .imaging import (
    Frame,
    ImagingError,
    Sequence,
    load_lut,
    load_sequence,
    save_lut,
    save_sequence,
)
from .model import ModelError, load_checkpoint, save_checkpoint
from .render import RenderConfig, RenderError, render
from .scene import (
    DegradationSpec,
    GaussianScene,
    SceneError,
    degrade_sequence,
    generate_synthetic_scene,
    init_from_points,
    load_cameras,
    load_points,
    save_cameras,
)
from .stabilize import StabilizeConfig, invert_frame, stabilize_sequence
from .train import (
    TrainConfig,
    TrainError,
    ablate,
    evaluate,
    load_model,
    psnr,
    save_model,
    ssim,
    train,
    write_ablation_csv,
    write_eval_csv,
)

_ERRORS = (ImagingError, SceneError, RenderError, ModelError, TrainError,
           DiagnosticsError, OSError, ValueError)


def _read_config(path) -> dict[str, str]:
    cfg = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, val = line.split("=", 1)
        cfg[key.strip().replace("-", "_")] = val.strip()
    return cfg


def _cast(val: str, typ):
    if typ is bool:
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    return typ(val)


class Cli:
    """Subcommand options are registered with None defaults so that config
    file values can slot in underneath explicit flags."""

    def __init__(self, sub: argparse.ArgumentParser):
        self.parser = sub
        self.spec: dict[str, tuple[type, object]] = {}

    def opt(self, name: str, typ, default, help: str, required: bool = False):
        key = name.lstrip("-").replace("-", "_")
        self.spec[key] = (typ, default)
        if typ is bool:
            self.parser.add_argument(name, action="store_const", const=True,
                                     default=None, help=help)
        else:
            self.parser.add_argument(name, type=typ, default=None, help=help)
        if required:
            self.spec[key] = (typ, _REQUIRED)

    def resolve(self, args: argparse.Namespace) -> argparse.Namespace:
        cfg = _read_config(args.config) if args.config else {}
        out = argparse.Namespace()
        for key, (typ, default) in self.spec.items():
            val = getattr(args, key)
            if val is None and key in cfg:
                val = _cast(cfg[key], typ)
            if val is None:
                if default is _REQUIRED:
                    self.parser.error(f"missing required option --{key.replace('_', '-')}")
                val = default
            setattr(out, key, val)
        return out


_REQUIRED = object()


def _write_manifest(out_dir, command: str, options: argparse.Namespace,
                    outputs: list[str]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "thermsplat",
        "version": __version__,
        "command": command,
        "options": {k: (str(v) if isinstance(v, Path) else v)
                    for k, v in vars(options).items()},
        "threads": _thread_count(options),
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True) + "\n")


def _thread_count(options) -> int:
    n = getattr(options, "threads", None)
    if n is None:
        n = int(os.environ.get("THERMSPLAT_THREADS", "1"))
    return n


def _common(cli: Cli):
    cli.parser.add_argument("--config", default=None,
                            help="flat key=value option file")
    cli.opt("--threads", int, None,
            "advisory worker count (the pipeline is single-threaded; "
            "recorded in the manifest)")


def _load_model_scene(o):
    """Training initialization: explicit point cloud or seeded random points."""
    if o.points:
        pts = load_points(o.points)
    else:
        rng = np.random.default_rng(o.seed)
        pts = rng.uniform(-0.5, 0.5, size=(o.gaussians, 3))
    return init_from_points(pts, k=3, seed=o.seed, embedding_dim=o.embedding_dim)


def _train_config(o, appearance=None) -> TrainConfig:
    return TrainConfig(
        iterations=o.iterations, seed=o.seed, eval_every=o.eval_every,
        prune_every=o.prune_every, appearance=appearance or o.appearance,
        embedding_dim=o.embedding_dim, frame_dim=o.frame_dim,
        hidden_width=o.hidden_width, hidden_layers=o.hidden_layers,
    )


def _train_opts(cli: Cli, with_appearance: bool = True):
    cli.opt("--iterations", int, 5000, "optimization steps")
    cli.opt("--seed", int, 0, "random seed")
    cli.opt("--eval-every", int, 500, "held-out evaluation interval")
    cli.opt("--prune-every", int, 1000, "transparent-Gaussian pruning interval")
    cli.opt("--embedding-dim", int, 16, "per-Gaussian embedding width")
    cli.opt("--frame-dim", int, 8, "per-frame embedding width")
    cli.opt("--hidden-width", int, 32, "MLP hidden width")
    cli.opt("--hidden-layers", int, 2, "MLP hidden depth")
    cli.opt("--points", str, "", "initialization point cloud (x y z per line)")
    cli.opt("--gaussians", int, 200, "random initialization size if no points")
    cli.opt("--heldout", int, 4, "number of trailing views held out")
    if with_appearance:
        cli.opt("--appearance", str, "mlp", "appearance model: mlp or direct")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_stabilize(o) -> int:
    seq = load_sequence(o.input)
    cfg = StabilizeConfig(alpha=o.alpha, beta=o.beta, warmup=o.warmup)
    out_seq, transforms = stabilize_sequence(seq, cfg)
    out = Path(o.output)
    paths = save_sequence(out_seq, out / "frames")
    lut_dir = out / "luts"
    lut_dir.mkdir(parents=True, exist_ok=True)
    for path, tf in zip(paths, transforms):
        save_lut(tf.composed, lut_dir / f"{path.stem}.lut.csv")
    with (out / "stabilize_report.csv").open("w") as fh:
        fh.write("t,mean_in,mean_out,split_level\n")
        for t, tf in enumerate(transforms):
            fh.write(f"{t},{seq[t].mean():.17g},{out_seq[t].mean():.17g},"
                     f"{tf.split_level}\n")
    _write_manifest(out, "stabilize", o,
                    [str(p) for p in paths] + ["luts/", "stabilize_report.csv"])
    return 0


def cmd_invert(o) -> int:
    seq = load_sequence(o.frames)
    lut_paths = sorted(Path(o.luts).glob("*.csv"))
    if len(lut_paths) != len(seq):
        raise ImagingError(
            f"{len(seq)} frames but {len(lut_paths)} LUTs in {o.luts}")
    from .stabilize import FrameTransform  # local: only composed is needed
    frames = []
    for f, lp in zip(seq, lut_paths):
        lut = load_lut(lp)
        tf = FrameTransform(lut, lut, lut, 0)
        frames.append(invert_frame(f, tf))
    paths = save_sequence(Sequence(frames), Path(o.output) / "frames")
    _write_manifest(o.output, "invert", o, [str(p) for p in paths])
    return 0


def cmd_diagnose(o) -> int:
    seq = load_sequence(o.input)
    out = Path(o.output)
    out.mkdir(parents=True, exist_ok=True)
    write_drift_csv(mean_intensity_drift(seq), out / "drift.csv")
    write_spectrum_csv([radial_power_spectrum(f) for f in seq],
                       out / "spectrum.csv")
    write_range_csv([dynamic_range_report(f) for f in seq], out / "range.csv")
    _write_manifest(out, "diagnose", o,
                    ["drift.csv", "spectrum.csv", "range.csv"])
    return 0


def cmd_synth(o) -> int:
    scene, cams = generate_synthetic_scene(
        o.gaussians, o.cameras, o.seed, width=o.width, height=o.height)
    bg = np.full((o.height, o.width), o.background)
    frames = []
    for t, cam in enumerate(cams):
        out, _ = render(scene, cam, scene.gt_emissions, bg)
        frames.append(Frame(np.clip(out.image, 0.0, 1.0), 16, t))
    out_dir = Path(o.output)
    paths = save_sequence(Sequence(frames), out_dir / "frames")
    save_cameras(cams, out_dir / "cameras.txt")
    np.savetxt(out_dir / "points.txt", scene.means, fmt="%.17g")
    save_checkpoint(out_dir / "scene.thsp", {
        "means": scene.means, "log_scales": scene.log_scales,
        "rotations": scene.rotations, "opacity_logits": scene.opacity_logits,
        "embeddings": scene.embeddings, "gt_emissions": scene.gt_emissions,
    }, {"background": o.background})
    _write_manifest(out_dir, "synth", o,
                    [str(p) for p in paths] + ["cameras.txt", "points.txt",
                                               "scene.thsp"])
    return 0


def cmd_degrade(o) -> int:
    seq = load_sequence(o.input)
    spec = DegradationSpec(
        gain_amp=o.gain_amp, offset_walk_sigma=o.offset_walk,
        vignette_strength=o.vignette, fpn_sigma=o.fpn_sigma,
        fpn_column=o.fpn_column, blur_sigma=o.blur_sigma, seed=o.seed)
    paths = save_sequence(degrade_sequence(seq, spec), Path(o.output) / "frames")
    _write_manifest(o.output, "degrade", o, [str(p) for p in paths])
    return 0


def _load_views(frames_dir, cameras_file, heldout: int):
    seq = load_sequence(frames_dir)
    cams = load_cameras(cameras_file)
    if len(seq) != len(cams):
        raise TrainError(f"{len(seq)} frames but {len(cams)} cameras")
    if not 0 < heldout < len(cams):
        raise TrainError(f"heldout must be in (0, {len(cams)}), got {heldout}")
    images = [f.pixels for f in seq]
    k = len(cams) - heldout
    return cams[:k], images[:k], cams[k:], images[k:]


def cmd_train(o) -> int:
    tr_cams, tr_imgs, ho_cams, ho_imgs = _load_views(
        o.frames, o.cameras, o.heldout)
    scene = _load_model_scene(o)
    cfg = _train_config(o)
    model, records = train(scene, tr_cams, tr_imgs, ho_cams, ho_imgs, cfg)
    out = Path(o.output)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.thsp")
    write_eval_csv(records, out / "eval.csv")
    last = records[-1]
    print(f"final: psnr {last.psnr:.3f} dB  ssim {last.ssim:.4f}  "
          f"gaussians {last.n_gaussians}")
    _write_manifest(out, "train", o, ["model.thsp", "eval.csv"])
    return 0


def cmd_eval(o) -> int:
    model = load_model(o.model)
    seq = load_sequence(o.frames)
    cams = load_cameras(o.cameras)
    if len(seq) != len(cams):
        raise TrainError(f"{len(seq)} frames but {len(cams)} cameras")
    rows = []
    for cam, frame in zip(cams, seq):
        out = model.render_view(cam)
        rows.append((psnr(out.image, frame.pixels), ssim(out.image, frame.pixels)))
    mean_p = float(np.mean([r[0] for r in rows]))
    mean_s = float(np.mean([r[1] for r in rows]))
    for i, (p, s) in enumerate(rows):
        print(f"view {i}: psnr {p:.3f} dB  ssim {s:.4f}")
    print(f"mean: psnr {mean_p:.3f} dB  ssim {mean_s:.4f}")
    if o.output:
        out = Path(o.output)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "metrics.csv").open("w") as fh:
            fh.write("view,psnr,ssim\n")
            for i, (p, s) in enumerate(rows):
                fh.write(f"{i},{p:.17g},{s:.17g}\n")
            fh.write(f"mean,{mean_p:.17g},{mean_s:.17g}\n")
        _write_manifest(out, "eval", o, ["metrics.csv"])
    return 0


def cmd_render_path(o) -> int:
    model = load_model(o.model)
    cams = load_cameras(o.cameras)
    frames = []
    for t, cam in enumerate(cams):
        out = model.render_view(cam)
        frames.append(Frame(np.clip(out.image, 0.0, 1.0), o.bit_depth, t))
    paths = save_sequence(Sequence(frames), Path(o.output) / "frames")
    _write_manifest(o.output, "render-path", o, [str(p) for p in paths])
    return 0


def cmd_ablate(o) -> int:
    tr_cams, _, ho_cams, _ = _load_views(o.raw, o.cameras, o.heldout)
    raw = [f.pixels for f in load_sequence(o.raw)]
    stab = [f.pixels for f in load_sequence(o.stabilized)]
    if len(raw) != len(stab):
        raise TrainError(f"{len(raw)} raw frames but {len(stab)} stabilized")
    k = len(tr_cams)
    cfg = _train_config(o, appearance="mlp")

    def factory():
        return _load_model_scene(o)

    rows = ablate(factory, tr_cams, ho_cams, raw[:k], raw[k:],
                  stab[:k], stab[k:], cfg)
    out = Path(o.output)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out / "ablation.csv")
    for name, p, s in rows:
        print(f"{name}: psnr {p:.3f} dB  ssim {s:.4f}")
    _write_manifest(out, "ablate", o, ["ablation.csv"])
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="thermsplat",
        description="Thermal novel-view synthesis: photometric stabilization "
                    "and scalar-emission Gaussian splatting.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    clis = {}

    def sub(name, func, help):
        p = subs.add_parser(name, help=help)
        cli = Cli(p)
        _common(cli)
        p.set_defaults(func=func, cli=cli)
        clis[name] = cli
        return cli

    c = sub("stabilize", cmd_stabilize,
            "align and contrast-enhance a thermal sequence")
    c.opt("--input", str, None, "input frame directory", required=True)
    c.opt("--output", str, None, "output directory", required=True)
    c.opt("--alpha", float, 0.01, "reference EMA coefficient")
    c.opt("--beta", float, 0.9, "alignment blend weight")
    c.opt("--warmup", int, 5, "reference seeding frames")

    c = sub("invert", cmd_invert,
            "map stabilized frames back through saved LUTs")
    c.opt("--frames", str, None, "stabilized frame directory", required=True)
    c.opt("--luts", str, None, "per-frame LUT directory", required=True)
    c.opt("--output", str, None, "output directory", required=True)

    c = sub("diagnose", cmd_diagnose,
            "drift/spectrum/dynamic-range reports for a sequence")
    c.opt("--input", str, None, "input frame directory", required=True)
    c.opt("--output", str, None, "output directory", required=True)

    c = sub("synth", cmd_synth, "generate a synthetic scene and clean renders")
    c.opt("--output", str, None, "output directory", required=True)
    c.opt("--gaussians", int, 200, "number of Gaussians")
    c.opt("--cameras", int, 24, "number of ring cameras")
    c.opt("--seed", int, 0, "random seed")
    c.opt("--width", int, 64, "image width")
    c.opt("--height", int, 64, "image height")
    c.opt("--background", float, 0.12, "constant background intensity")

    c = sub("degrade", cmd_degrade, "inject synthetic sensor degradations")
    c.opt("--input", str, None, "input frame directory", required=True)
    c.opt("--output", str, None, "output directory", required=True)
    c.opt("--gain-amp", float, 0.0, "sinusoidal gain amplitude")
    c.opt("--offset-walk", float, 0.0, "offset random-walk step sigma")
    c.opt("--vignette", float, 0.0, "vignetting strength in [0, 1]")
    c.opt("--fpn-sigma", float, 0.0, "fixed-pattern noise sigma")
    c.opt("--fpn-column", bool, False, "column-structured fixed pattern")
    c.opt("--blur-sigma", float, 0.0, "Gaussian blur sigma, pixels")
    c.opt("--seed", int, 0, "random seed")

    c = sub("train", cmd_train, "fit a scene to posed frames")
    c.opt("--frames", str, None, "training frame directory", required=True)
    c.opt("--cameras", str, None, "camera file", required=True)
    c.opt("--output", str, None, "output directory", required=True)
    _train_opts(c)

    c = sub("eval", cmd_eval, "evaluate a trained model on posed frames")
    c.opt("--model", str, None, "model checkpoint", required=True)
    c.opt("--frames", str, None, "frame directory", required=True)
    c.opt("--cameras", str, None, "camera file", required=True)
    c.opt("--output", str, "", "optional metrics output directory")

    c = sub("render-path", cmd_render_path,
            "render a trained model along a camera path")
    c.opt("--model", str, None, "model checkpoint", required=True)
    c.opt("--cameras", str, None, "camera file", required=True)
    c.opt("--output", str, None, "output directory", required=True)
    c.opt("--bit-depth", int, 8, "output bit depth (8 or 16)")

    c = sub("ablate", cmd_ablate,
            "train the four appearance/preprocessing arms")
    c.opt("--raw", str, None, "raw (degraded) frame directory", required=True)
    c.opt("--stabilized", str, None, "stabilized frame directory", required=True)
    c.opt("--cameras", str, None, "camera file", required=True)
    c.opt("--output", str, None, "output directory", required=True)
    _train_opts(c, with_appearance=False)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        options = args.cli.resolve(args)
        return args.func(options)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
