"""Training loop, losses, evaluation metrics and the ablation harness.

Losses return (value, gradient) pairs with hand-written adjoints; the loop
optimizes Gaussian geometry, per-Gaussian and per-frame embeddings and the
emission/background MLPs jointly with per-group Adam learning rates. A
`direct` appearance mode replaces the embedding/MLP machinery with plain
per-Gaussian emission values and a constant background, which is the
baseline arm of the ablation study.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d, correlate2d
from skimage.metrics import structural_similarity

from .model import AdamState, Mlp, ModelError, adam_step, sigmoid
from .model import load_checkpoint, save_checkpoint
from .geometry import normalize_quats
from .render import (
    RenderConfig,
    encode_directions,
    ray_directions,
    render,
    render_backward,
)
from .scene import Camera, GaussianScene


class TrainError(Exception):
    pass


# ---------------------------------------------------------------------------
# Losses (value, gradient w.r.t. prediction)
# ---------------------------------------------------------------------------

def l1_loss(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def hssim_loss(pred: np.ndarray, target: np.ndarray, window: int = 7,
               epsilon: float = 0.01):
    """Highlight-weighted structural dissimilarity.

    Windowed SSIM over a uniform box kernel (valid windows only); each
    window's (1 - SSIM) is weighted by max(epsilon, mean target intensity in
    the window), weights renormalized to sum to one. Hotter regions, which
    carry the signal in thermal imagery, therefore dominate the loss.
    """
    if min(pred.shape) < window:
        raise TrainError(f"image smaller than ssim window {window}")
    c1, c2 = 0.01**2, 0.03**2
    kern = np.full((window, window), 1.0 / window**2)

    def filt(img):
        return correlate2d(img, kern, mode="valid")

    def filt_adj(g):
        return convolve2d(g, kern, mode="full")

    mx = filt(pred)
    my = filt(target)
    sx = filt(pred * pred) - mx * mx
    sy = filt(target * target) - my * my
    sxy = filt(pred * target) - mx * my
    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sx + sy + c2
    s = (a1 * a2) / (b1 * b2)

    weights = np.maximum(epsilon, my)
    weights = weights / weights.sum()
    value = float((weights * (1.0 - s)).sum())

    g_s = -weights
    g_mx = g_s * s * (2.0 * my / a1 - 2.0 * mx / b1)
    g_sx = g_s * (-s / b2)
    g_sxy = g_s * (2.0 * s / a2)
    g_mx = g_mx - 2.0 * mx * g_sx - my * g_sxy
    grad = filt_adj(g_mx) + 2.0 * pred * filt_adj(g_sx) + target * filt_adj(g_sxy)
    return value, grad


def alpha_entropy_loss(residual: np.ndarray):
    """Mean binary entropy of the residual transmittance m.

    Pushes pixels toward fully covered or fully empty. Gradient is taken
    w.r.t. m; empty pixels (m == 1 exactly) sit on a plateau and get zero
    gradient.
    """
    m = np.clip(residual, 1e-12, 1.0 - 1e-12)
    n = residual.size
    value = float(-(m * np.log(m) + (1.0 - m) * np.log1p(-m)).mean())
    grad = np.log1p(-m) - np.log(m)
    grad[residual >= 1.0] = 0.0
    return value, grad / n


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    return float(structural_similarity(
        target, pred, data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False,
    ))


# ---------------------------------------------------------------------------
# Configuration and the trained-model bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    seed: int = 0
    lambda1: float = 0.8            # absolute-error weight
    lambda2: float = 0.2            # structural-dissimilarity weight
    lambda3: float = 0.01           # residual-entropy weight
    ssim_window: int = 7
    hssim_epsilon: float = 0.01
    eval_every: int = 500
    prune_every: int = 1000
    prune_opacity: float = 0.005
    appearance: str = "mlp"         # 'mlp' or 'direct'
    embedding_dim: int = 16         # per-Gaussian
    frame_dim: int = 8              # per-frame
    hidden_width: int = 32
    hidden_layers: int = 2
    inference_frame: int | None = None  # eval embedding: a training frame's,
                                        # or the mean over frames when None
    lr_means: float = 1.6e-4
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_embeddings: float = 2e-3
    lr_mlp: float = 1e-3
    mlp_weight_decay: float = 1e-6

    def __post_init__(self):
        if self.appearance not in ("mlp", "direct"):
            raise TrainError(f"unknown appearance mode '{self.appearance}'")
        if self.iterations < 1:
            raise TrainError("iterations must be positive")


@dataclass
class EvalRecord:
    iteration: int
    loss: float
    psnr: float
    ssim: float
    n_gaussians: int


@dataclass
class TrainedModel:
    """Scene plus appearance model, everything needed to render new views."""

    scene: GaussianScene
    config: TrainConfig
    frame_embeddings: np.ndarray | None = None   # (F, frame_dim), mlp mode
    emission_mlp: Mlp | None = None
    background_mlp: Mlp | None = None
    emission_logits: np.ndarray | None = None    # (N,), direct mode
    background_logits: np.ndarray | None = None  # (H, W) logit image, direct mode

    def emission_and_background(self, cam: Camera,
                                frame_embedding: np.ndarray | None = None):
        """Per-Gaussian emissions and per-pixel background for one view,
        plus the caches the backward pass needs (None in direct mode)."""
        if self.config.appearance == "direct":
            em = sigmoid(self.emission_logits)
            bg = sigmoid(self.background_logits)
            if bg.shape != (cam.height, cam.width):
                raise TrainError("camera size does not match the trained "
                                 "background image")
            return em, bg, None, None
        if frame_embedding is not None:
            ef = frame_embedding
        elif self.config.inference_frame is None:
            ef = self.frame_embeddings.mean(axis=0)
        else:
            ef = self.frame_embeddings[self.config.inference_frame]
        em_in = np.concatenate(
            [self.scene.embeddings,
             np.broadcast_to(ef, (len(self.scene), ef.size))], axis=1)
        em, em_cache = self.emission_mlp.forward(em_in)
        dirs = encode_directions(ray_directions(cam))
        bg_in = np.concatenate(
            [dirs, np.broadcast_to(ef, (dirs.shape[0], ef.size))], axis=1)
        bg, bg_cache = self.background_mlp.forward(bg_in)
        return em, bg.reshape(cam.height, cam.width), em_cache, bg_cache

    def render_view(self, cam: Camera, frame_embedding: np.ndarray | None = None,
                    render_config: RenderConfig = RenderConfig()):
        em, bg, _, _ = self.emission_and_background(cam, frame_embedding)
        out, _ = render(self.scene, cam, em, bg, render_config)
        return out


def _as_image(frame) -> np.ndarray:
    return frame.pixels if hasattr(frame, "pixels") else np.asarray(frame, float)


def evaluate(model: TrainedModel, cams: list[Camera], targets,
             render_config: RenderConfig = RenderConfig()):
    """Mean reconstruction quality over views, rendered with the model's
    inference-frame embedding."""
    ps, ss = [], []
    for cam, tgt in zip(cams, targets):
        out = model.render_view(cam, render_config=render_config)
        tgt = _as_image(tgt)
        ps.append(psnr(out.image, tgt))
        ss.append(ssim(out.image, tgt))
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(
    scene: GaussianScene,
    train_cams: list[Camera],
    train_frames,
    heldout_cams: list[Camera] | None = None,
    heldout_frames=None,
    config: TrainConfig = TrainConfig(),
    render_config: RenderConfig = RenderConfig(),
) -> tuple[TrainedModel, list[EvalRecord]]:
    """Optimize the scene and appearance model on posed training frames.

    One uniformly shuffled view per iteration; per-group Adam learning
    rates, decoupled weight decay on the MLPs only, quaternion
    renormalization after every step, and periodic pruning of
    near-transparent Gaussians (optimizer moments are pruned alongside).
    """
    if len(train_cams) != len(train_frames):
        raise TrainError("one training frame per camera is required")
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    targets = [_as_image(f) for f in train_frames]
    n_frames = len(targets)

    model = TrainedModel(scene=scene, config=cfg)
    if cfg.appearance == "mlp":
        model.frame_embeddings = 0.01 * rng.standard_normal((n_frames, cfg.frame_dim))
        em_sizes = ([scene.embedding_dim + cfg.frame_dim]
                    + [cfg.hidden_width] * cfg.hidden_layers + [1])
        bg_sizes = ([27 + cfg.frame_dim]
                    + [cfg.hidden_width] * cfg.hidden_layers + [1])
        model.emission_mlp = Mlp(em_sizes, seed=cfg.seed + 1)
        model.background_mlp = Mlp(bg_sizes, seed=cfg.seed + 2)
    else:
        model.emission_logits = np.zeros(len(scene))
        model.background_logits = np.zeros(
            (train_cams[0].height, train_cams[0].width))

    # direction encodings are static per camera
    enc = [encode_directions(ray_directions(c)) for c in train_cams]

    opt = AdamState()
    records: list[EvalRecord] = []
    order = np.empty(0, dtype=np.int64)
    pos = 0

    for it in range(1, cfg.iterations + 1):
        if pos >= order.size:
            order = rng.permutation(n_frames)
            pos = 0
        view = int(order[pos])
        pos += 1
        cam = train_cams[view]
        target = targets[view]

        if cfg.appearance == "mlp":
            ef = model.frame_embeddings[view]
            em_in = np.concatenate(
                [scene.embeddings, np.broadcast_to(ef, (len(scene), ef.size))],
                axis=1)
            emissions, em_cache = model.emission_mlp.forward(em_in)
            bg_in = np.concatenate(
                [enc[view], np.broadcast_to(ef, (enc[view].shape[0], ef.size))],
                axis=1)
            bg_flat, bg_cache = model.background_mlp.forward(bg_in)
            background = bg_flat.reshape(cam.height, cam.width)
        else:
            emissions = sigmoid(model.emission_logits)
            background = sigmoid(model.background_logits)

        out, cache = render(scene, cam, emissions, background, render_config)

        v1, g1 = l1_loss(out.image, target)
        v2, g2 = hssim_loss(out.image, target, cfg.ssim_window, cfg.hssim_epsilon)
        v3, g3 = alpha_entropy_loss(out.residual)
        loss = cfg.lambda1 * v1 + cfg.lambda2 * v2 + cfg.lambda3 * v3
        if not np.isfinite(loss):
            raise TrainError(f"training diverged: non-finite loss at iteration {it}")
        grad_image = cfg.lambda1 * g1 + cfg.lambda2 * g2
        grads = render_backward(cache, grad_image, cfg.lambda3 * g3)

        params = {
            "means": scene.means,
            "log_scales": scene.log_scales,
            "rotations": scene.rotations,
            "opacity_logits": scene.opacity_logits,
        }
        pgrads = {k: grads[k] for k in params}
        lr = {
            "means": cfg.lr_means,
            "log_scales": cfg.lr_log_scales,
            "rotations": cfg.lr_rotations,
            "opacity_logits": cfg.lr_opacity,
        }
        wd = {}

        if cfg.appearance == "mlp":
            em_grads, d_em_in = model.emission_mlp.backward(
                em_cache, grads["emissions"])
            bg_grads, d_bg_in = model.background_mlp.backward(
                bg_cache, grads["background"].ravel())
            d_embed = d_em_in[:, :scene.embedding_dim]
            d_frame = np.zeros_like(model.frame_embeddings)
            d_frame[view] = (d_em_in[:, scene.embedding_dim:].sum(axis=0)
                             + d_bg_in[:, 27:].sum(axis=0))
            params["embeddings"] = scene.embeddings
            pgrads["embeddings"] = d_embed
            lr["embeddings"] = cfg.lr_embeddings
            params["frame_embeddings"] = model.frame_embeddings
            pgrads["frame_embeddings"] = d_frame
            lr["frame_embeddings"] = cfg.lr_embeddings
            for k, p in model.emission_mlp.params("em/").items():
                params[k] = p
                pgrads[k] = em_grads[k[len("em/"):]]
                lr[k] = cfg.lr_mlp
                wd[k] = cfg.mlp_weight_decay
            for k, p in model.background_mlp.params("bg/").items():
                params[k] = p
                pgrads[k] = bg_grads[k[len("bg/"):]]
                lr[k] = cfg.lr_mlp
                wd[k] = cfg.mlp_weight_decay
        else:
            d_logits = grads["emissions"] * emissions * (1.0 - emissions)
            params["emission_logits"] = model.emission_logits
            pgrads["emission_logits"] = d_logits
            lr["emission_logits"] = cfg.lr_embeddings
            params["background_logits"] = model.background_logits
            pgrads["background_logits"] = (
                grads["background"] * background * (1.0 - background))
            lr["background_logits"] = cfg.lr_embeddings

        adam_step(opt, params, pgrads, lr, wd)
        if cfg.appearance == "mlp":
            model.emission_mlp.set_params(
                {k[len("em/"):]: v for k, v in params.items()
                 if k.startswith("em/")})
            model.background_mlp.set_params(
                {k[len("bg/"):]: v for k, v in params.items()
                 if k.startswith("bg/")})
        scene.rotations = normalize_quats(scene.rotations)

        if cfg.prune_every and it % cfg.prune_every == 0 and it < cfg.iterations:
            keep = scene.opacities() >= cfg.prune_opacity
            if keep.sum() == 0:
                raise TrainError(
                    f"training diverged: all Gaussians pruned at iteration {it}")
            if not keep.all():
                new = scene.subset(keep)
                scene.means = new.means
                scene.log_scales = new.log_scales
                scene.rotations = new.rotations
                scene.opacity_logits = new.opacity_logits
                scene.embeddings = new.embeddings
                if scene.gt_emissions is not None:
                    scene.gt_emissions = scene.gt_emissions[keep]
                for key in ("means", "log_scales", "rotations",
                            "opacity_logits", "embeddings"):
                    opt.select_rows(key, keep)
                if cfg.appearance == "direct":
                    model.emission_logits = model.emission_logits[keep]
                    opt.select_rows("emission_logits", keep)

        if (cfg.eval_every and heldout_cams
                and (it % cfg.eval_every == 0 or it == cfg.iterations)):
            p, s = evaluate(model, heldout_cams, heldout_frames, render_config)
            records.append(EvalRecord(it, loss, p, s, len(scene)))

    if heldout_cams and (not records or records[-1].iteration != cfg.iterations):
        p, s = evaluate(model, heldout_cams, heldout_frames, render_config)
        records.append(EvalRecord(cfg.iterations, loss, p, s, len(scene)))
    return model, records


def write_eval_csv(records: list[EvalRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "psnr", "ssim", "n_gaussians"])
        for r in records:
            w.writerow([r.iteration, f"{r.loss:.17g}", f"{r.psnr:.17g}",
                        f"{r.ssim:.17g}", r.n_gaussians])


# ---------------------------------------------------------------------------
# Model checkpointing
# ---------------------------------------------------------------------------

def save_model(model: TrainedModel, path) -> None:
    s = model.scene
    arrays = {
        "means": s.means, "log_scales": s.log_scales, "rotations": s.rotations,
        "opacity_logits": s.opacity_logits, "embeddings": s.embeddings,
    }
    cfg = model.config
    meta = {"appearance": cfg.appearance, "inference_frame": cfg.inference_frame}
    if cfg.appearance == "mlp":
        arrays["frame_embeddings"] = model.frame_embeddings
        arrays.update(model.emission_mlp.params("em/"))
        arrays.update(model.background_mlp.params("bg/"))
        meta["em_sizes"] = model.emission_mlp.layer_sizes
        meta["bg_sizes"] = model.background_mlp.layer_sizes
    else:
        arrays["emission_logits"] = model.emission_logits
        arrays["background_logits"] = model.background_logits
    save_checkpoint(path, arrays, meta)


def load_model(path) -> TrainedModel:
    arrays, meta = load_checkpoint(path)
    scene = GaussianScene(
        arrays["means"], arrays["log_scales"], arrays["rotations"],
        arrays["opacity_logits"], arrays["embeddings"],
    )
    cfg = TrainConfig(appearance=meta["appearance"],
                      inference_frame=meta["inference_frame"],
                      embedding_dim=scene.embedding_dim)
    model = TrainedModel(scene=scene, config=cfg)
    if cfg.appearance == "mlp":
        model.frame_embeddings = arrays["frame_embeddings"]
        model.emission_mlp = Mlp(meta["em_sizes"])
        model.emission_mlp.set_params(
            {k[len("em/"):]: v for k, v in arrays.items() if k.startswith("em/")})
        model.background_mlp = Mlp(meta["bg_sizes"])
        model.background_mlp.set_params(
            {k[len("bg/"):]: v for k, v in arrays.items() if k.startswith("bg/")})
        cfg = replace(cfg, frame_dim=model.frame_embeddings.shape[1])
        model.config = cfg
    else:
        model.emission_logits = arrays["emission_logits"]
        model.background_logits = arrays["background_logits"]
    return model


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_ARMS = (
    ("baseline", "direct", "raw"),
    ("preproc_only", "direct", "stabilized"),
    ("mlp_only", "mlp", "raw"),
    ("full", "mlp", "stabilized"),
)


def ablate(
    scene_factory,
    train_cams: list[Camera],
    heldout_cams: list[Camera],
    raw_train, raw_heldout,
    stab_train, stab_heldout,
    config: TrainConfig = TrainConfig(),
    render_config: RenderConfig = RenderConfig(),
):
    """Train the four appearance/preprocessing arms under identical budgets.

    `scene_factory()` must return a fresh identically initialized scene per
    arm. Each arm is evaluated on held-out views in its own input domain
    (raw arms against raw frames, stabilized arms against stabilized
    frames). Returns [(name, psnr, ssim), ...] in arm order.
    """
    rows = []
    for name, appearance, domain in ABLATION_ARMS:
        tr = raw_train if domain == "raw" else stab_train
        ho = raw_heldout if domain == "raw" else stab_heldout
        cfg = replace(config, appearance=appearance)
        model, recs = train(scene_factory(), train_cams, tr,
                            heldout_cams, ho, cfg, render_config)
        rows.append((name, recs[-1].psnr, recs[-1].ssim))
    return rows


def write_ablation_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, f"{p:.17g}", f"{s:.17g}"])
