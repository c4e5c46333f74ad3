"""End-to-end verification of the toolkit's headline guarantees.

Each test covers one deliverable property (numbered for stable ordering) and
prints a single PASS/FAIL line directly to the terminal in addition to the
usual pytest outcome. The expensive reconstruction fixtures are shared
across the later tests.
"""

import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from helpers import brute_force_render, coincident_splats_scene
from thermsplat.diagnostics import (
    dynamic_range_report,
    mean_intensity_drift,
    radial_power_spectrum,
    write_drift_csv,
)
from thermsplat.imaging import Frame, Sequence
from thermsplat.render import RenderConfig, render, render_backward
from thermsplat.scene import (
    DegradationSpec,
    degrade_sequence,
    generate_synthetic_scene,
    init_from_points,
    ring_cameras,
)
from thermsplat.stabilize import (
    StabilizeConfig,
    bbhe,
    invert_frame,
    stabilize_sequence,
)
from thermsplat.train import (
    TrainConfig,
    ablate,
    alpha_entropy_loss,
    hssim_loss,
    l1_loss,
    train,
    write_eval_csv,
)

# Reconstruction benchmark: a 200-Gaussian scene on a 24-camera ring,
# rendered over a vertical gradient background (broad histogram, no
# clipping under peak gain) and degraded with sinusoidal gain drift, an
# offset random walk, vignetting, and fixed-pattern noise.
N_GAUSSIANS = 200
N_CAMERAS = 24
N_TRAIN = 20
IMAGE_SIZE = 64
SCENE_SEED = 11
INIT_SEED = 99
DEGRADE = dict(gain_amp=0.25, offset_walk_sigma=0.02, vignette_strength=0.02,
               fpn_sigma=0.002, seed=5)
INFERENCE_FRAME = N_TRAIN - 1   # temporally nearest training frame
FULL_ITERATIONS = 5000
ABLATION_ITERATIONS = 1500


def report(capsys, label, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {label}"
    if detail:
        line += f"  ({detail})"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


def narrow_band_frames(n, seed, width=64, height=64, band=24, center=120):
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(n):
        c = center + rng.integers(-2, 3)
        levels = rng.integers(c - band // 2, c + band // 2, size=(height, width))
        frames.append(Frame(levels / 255.0, 8, t))
    return Sequence(frames)


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def dataset():
    """Clean, degraded, and stabilized views of the benchmark scene."""
    scene, _ = generate_synthetic_scene(N_GAUSSIANS, N_CAMERAS, seed=SCENE_SEED,
                                        width=IMAGE_SIZE, height=IMAGE_SIZE)
    cams = ring_cameras(N_CAMERAS, width=IMAGE_SIZE, height=IMAGE_SIZE)
    ramp = np.linspace(0.0, 1.0, IMAGE_SIZE)[:, None]
    bg = 0.05 + 0.75 * np.broadcast_to(ramp, (IMAGE_SIZE, IMAGE_SIZE))
    clean = Sequence([
        Frame(np.clip(render(scene, c, scene.gt_emissions, bg)[0].image, 0, 1),
              8, t)
        for t, c in enumerate(cams)
    ])
    degraded = degrade_sequence(clean, DegradationSpec(**DEGRADE))
    stabilized, _ = stabilize_sequence(degraded, StabilizeConfig())
    return {"scene": scene, "cams": cams, "clean": clean,
            "degraded": degraded, "stabilized": stabilized}


def fresh_init(dataset):
    return init_from_points(dataset["scene"].means.copy(), k=3, seed=INIT_SEED)


def run_full_training(dataset, csv_path):
    cams = dataset["cams"]
    frames = list(dataset["stabilized"])
    cfg = TrainConfig(iterations=FULL_ITERATIONS, eval_every=500, seed=0,
                      inference_frame=INFERENCE_FRAME)
    t0 = time.perf_counter()
    model, records = train(fresh_init(dataset), cams[:N_TRAIN], frames[:N_TRAIN],
                           cams[N_TRAIN:], frames[N_TRAIN:], cfg)
    elapsed = time.perf_counter() - t0
    write_eval_csv(records, csv_path)
    return model, records, elapsed, csv_path.read_bytes()


def run_drift_experiment(csv_path):
    """Static scene under pure gain drift: stabilization must flatten it."""
    base = narrow_band_frames(1, seed=7, band=120, center=128)[0]
    static = Sequence([Frame(base.pixels, 8, t) for t in range(60)])
    degraded = degrade_sequence(static, DegradationSpec(gain_amp=0.2, seed=3))
    stabilized, _ = stabilize_sequence(degraded, StabilizeConfig())
    before = mean_intensity_drift(degraded)
    after = mean_intensity_drift(stabilized)
    write_drift_csv(after, csv_path)
    return before.sigma, after.sigma, csv_path.read_bytes()


@pytest.fixture(scope="module")
def full_run(dataset, outdir):
    return run_full_training(dataset, outdir / "eval.csv")


@pytest.fixture(scope="module")
def ablation_rows(dataset):
    cams = dataset["cams"]
    raw = list(dataset["degraded"])
    stab = list(dataset["stabilized"])
    cfg = TrainConfig(iterations=ABLATION_ITERATIONS,
                      eval_every=ABLATION_ITERATIONS, seed=0,
                      inference_frame=INFERENCE_FRAME)
    return ablate(lambda: fresh_init(dataset), cams[:N_TRAIN], cams[N_TRAIN:],
                  raw[:N_TRAIN], raw[N_TRAIN:], stab[:N_TRAIN], stab[N_TRAIN:],
                  cfg)


def test_01_stabilization_round_trip(capsys):
    t0 = time.perf_counter()
    seq = narrow_band_frames(100, seed=0)
    stabilized, transforms = stabilize_sequence(seq, StabilizeConfig())
    worst = max(
        np.abs(invert_frame(out, tf).pixels - orig.pixels).max()
        for orig, out, tf in zip(seq, stabilized, transforms)
    )
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 / 255.0 + 1e-9 and elapsed <= 30.0
    report(capsys, "stabilization round trip",
           ok, f"max error {worst:.6f}, {elapsed:.1f}s")


def test_02_drift_suppression(capsys, outdir, tmp_path):
    t0 = time.perf_counter()
    before, after, _ = run_drift_experiment(outdir / "drift.csv")
    elapsed = time.perf_counter() - t0
    ok = after <= 0.2 * before and elapsed <= 60.0
    report(capsys, "drift suppression", ok,
           f"sigma {before:.4f} -> {after:.4f}, {elapsed:.1f}s")


def test_03_contrast_enhancement(capsys):
    rng = np.random.default_rng(13)
    worst_gain, worst_shift = np.inf, 0.0
    for t in range(50):
        center = rng.uniform(0.42, 0.58)
        width = int(rng.integers(20, 61))
        c = int(round(center * 255))
        levels = rng.integers(c - width // 2, c + width // 2, size=(64, 64))
        frame = Frame(levels / 255.0, 8, t)
        rin = dynamic_range_report(frame)
        assert rin.effective_range < 0.5
        out, _ = bbhe(frame)
        rout = dynamic_range_report(out)
        worst_gain = min(worst_gain, rout.effective_range - rin.effective_range)
        worst_shift = max(worst_shift, abs(out.mean() - frame.mean()))
    ok = worst_gain >= 0.0 and worst_shift <= 0.05
    report(capsys, "contrast enhancement", ok,
           f"min range gain {worst_gain:.4f}, max mean shift {worst_shift:.4f}")


def test_04_spectrum_diagnostic(capsys):
    ok = True
    for seed in range(10):
        noise = np.random.default_rng(seed).random((64, 64))
        sp_raw = radial_power_spectrum(Frame(noise))
        sp_blur = radial_power_spectrum(
            Frame(np.clip(gaussian_filter(noise, 1.5), 0, 1)))
        q = 3 * len(sp_raw.power) // 4
        ok = ok and bool(np.all(sp_blur.power[q:] < sp_raw.power[q:]))
    report(capsys, "spectrum diagnostic", ok, "10 seeds, top-quartile bins")


def test_05_renderer_matches_oracle(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for seed in range(20):
        n = int(rng.integers(1, 21))
        scene, cams = generate_synthetic_scene(n, 2, seed=seed,
                                               width=20, height=20)
        bg = rng.random((20, 20))
        for blend in ("paper", "standard"):
            cfg = RenderConfig(background_blend=blend)
            out, _ = render(scene, cams[0], scene.gt_emissions, bg, cfg)
            image, _, _ = brute_force_render(scene, cams[0],
                                             scene.gt_emissions, bg, cfg)
            worst = max(worst, np.abs(out.image - image).max())
    scene, cam = coincident_splats_scene(opacity=0.5)
    out, _ = render(scene, cam, np.array([1.0, 0.0]), np.zeros((33, 33)))
    hand_ok = (abs(out.foreground[16, 16] - 0.5) < 1e-9
               and abs(out.residual[16, 16] - np.exp(-1.0)) < 1e-9
               and abs(out.image[16, 16] - 0.31606) < 5e-6)
    ok = worst <= 1e-5 and hand_ok
    report(capsys, "renderer vs brute-force oracle", ok,
           f"max pixel error {worst:.2e}, hand example "
           f"{'ok' if hand_ok else 'mismatch'}")


def test_06_gradient_exactness(capsys):
    t0 = time.perf_counter()

    def full_loss(scene, cam, em, bg, target):
        out, cache = render(scene, cam, em, bg)
        v1, g1 = l1_loss(out.image, target)
        v2, g2 = hssim_loss(out.image, target)
        v3, g3 = alpha_entropy_loss(out.residual)
        val = 0.8 * v1 + 0.2 * v2 + 0.01 * v3
        return val, cache, 0.8 * g1 + 0.2 * g2, 0.01 * g3

    worst = 0.0
    for seed in range(3):
        scene, cams = generate_synthetic_scene(5, 2, seed=seed,
                                               width=16, height=16)
        cam = cams[0]
        rng = np.random.default_rng(seed + 100)
        bg = 0.2 + 0.2 * rng.random((16, 16))
        em = scene.gt_emissions.copy()
        target = rng.random((16, 16))
        _, cache, d_img, d_res = full_loss(scene, cam, em, bg, target)
        grads = render_backward(cache, d_img, d_res)
        params = {name: getattr(scene, name)
                  for name in ("means", "log_scales", "rotations",
                               "opacity_logits")}
        params["emissions"] = em
        eps = 1e-5
        for name, arr in params.items():
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + eps
                lp = full_loss(scene, cam, em, bg, target)[0]
                arr[ix] = orig - eps
                lm = full_loss(scene, cam, em, bg, target)[0]
                arr[ix] = orig
                fd = (lp - lm) / (2 * eps)
                scale = max(abs(fd), np.abs(grads[name]).max(), 1e-8)
                worst = max(worst, abs(grads[name][ix] - fd) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed <= 120.0
    report(capsys, "gradient exactness", ok,
           f"max relative error {worst:.2e}, {elapsed:.1f}s")


def test_07_end_to_end_reconstruction(capsys, full_run):
    _, records, elapsed, _ = full_run
    psnr = records[-1].psnr
    ok = psnr >= 28.0 and elapsed <= 900.0
    report(capsys, "end-to-end reconstruction", ok,
           f"held-out PSNR {psnr:.2f} dB in {records[-1].iteration} iters, "
           f"{elapsed:.0f}s")


def test_08_ablation_ordering(capsys, ablation_rows):
    p = {name: psnr for name, psnr, _ in ablation_rows}
    ok = (p["full"] >= p["mlp_only"] >= p["baseline"]
          and p["full"] >= p["preproc_only"] >= p["baseline"]
          and p["full"] - p["baseline"] >= 2.0)
    detail = ", ".join(f"{k} {v:.2f}" for k, v in p.items())
    report(capsys, "ablation ordering", ok, detail)


def test_09_determinism(capsys, dataset, full_run, outdir):
    _, _, _, first_eval = full_run
    _, _, first_drift = run_drift_experiment(outdir / "drift_a.csv")
    _, _, second_drift = run_drift_experiment(outdir / "drift_b.csv")
    _, _, _, second_eval = run_full_training(dataset, outdir / "eval_rerun.csv")
    ok = first_drift == second_drift and first_eval == second_eval
    report(capsys, "determinism", ok,
           "drift and training reports byte-identical"
           if ok else "reports differ between reruns")
