"""Differentiable forward rendering of scalar-emission Gaussian scenes.

Projection to 2D splats, depth-sorted front-to-back alpha compositing, and
residual-transmittance background blending, together with hand-derived
reverse-mode gradients for every learnable quantity. Compositing is sparse:
each splat only touches pixels inside a bounding box sized so that every
excluded contribution is provably below the contribution floor, which keeps
the result identical to an exhaustive per-pixel loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    backprop_through_normalization,
    normalize_quats,
    quat_to_matrix,
    quat_to_matrix_jacobian,
)
from .scene import Camera, GaussianScene


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class RenderConfig:
    alpha_clamp: float = 0.999        # per-splat opacity ceiling
    alpha_floor: float = 1.0 / 255.0  # contributions below this are skipped
    transmittance_stop: float = 1e-4  # stop compositing once T drops below
    cov_dilation: float = 0.3         # px^2 added to the 2D covariance diagonal
    near_plane: float = 0.01          # splats with z <= near are culled
    background_blend: str = "paper"   # 'paper': (1-m)*fg + m*bg; 'standard': fg + T*bg

    def __post_init__(self):
        if self.background_blend not in ("paper", "standard"):
            raise RenderError(f"unknown background_blend '{self.background_blend}'")


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) pixels^2, after dilation
    depth: float            # camera-space z
    gaussian_index: int


@dataclass
class RenderOutput:
    """Blended image, foreground, residual transmittance and splat counts."""

    image: np.ndarray          # (H, W) in [0, 1]
    foreground: np.ndarray     # (H, W)
    residual: np.ndarray       # (H, W) m(r) in (0, 1]
    contrib_count: np.ndarray  # (H, W) composited splats per pixel


@dataclass
class ProjectionCache:
    """Vectorized projection of the visible splats, depth-sorted."""

    indices: np.ndarray     # (V,) gaussian indices, depth order
    mean2d: np.ndarray      # (V, 2)
    cov2d: np.ndarray       # (V, 2, 2)
    depth: np.ndarray       # (V,)
    t_cam: np.ndarray       # (V, 3) camera-space means
    jacobian: np.ndarray    # (V, 2, 3)
    m_proj: np.ndarray      # (V, 2, 3) J @ W
    rot_mats: np.ndarray    # (V, 3, 3) Gaussian rotations
    scales_sq: np.ndarray   # (V, 3) exp(2 * log_scale)
    sigma3d: np.ndarray     # (V, 3, 3)
    w_cam: np.ndarray       # (3, 3) camera rotation


@dataclass
class RenderCache:
    """Everything the backward pass needs from a forward render.

    Per-entry arrays are indexed over (splat, pixel) pairs that passed the
    contribution floor, grouped by pixel and depth-ordered within a pixel.
    """

    scene: GaussianScene
    cam: Camera
    config: RenderConfig
    proj: ProjectionCache
    emissions: np.ndarray       # (N,)
    background: np.ndarray      # (H, W)
    gid: np.ndarray             # (E,) splat rank into proj arrays
    pix: np.ndarray             # (E,) flat pixel index
    seg_base: np.ndarray        # (E,) index of first entry of own pixel
    alpha: np.ndarray           # (E,) floored+clamped alpha
    raw_alpha: np.ndarray       # (E,) opacity * G before clamping
    gauss: np.ndarray           # (E,) exp(-q/2)
    t_before: np.ndarray        # (E,)
    live: np.ndarray            # (E,) composited and unclamped
    weights: np.ndarray         # (E,) T_before * alpha * active
    delta: np.ndarray           # (E, 2) pixel minus splat mean
    t_final: np.ndarray         # (P,)
    asum: np.ndarray            # (P,)
    residual: np.ndarray        # (P,)
    foreground: np.ndarray      # (P,)
    inv_cov: np.ndarray         # (V, 2, 2)
    output: RenderOutput


def _check_finite(scene: GaussianScene) -> None:
    if len(scene) == 0:
        return
    for name in ("means", "log_scales", "rotations", "opacity_logits"):
        arr = getattr(scene, name)
        bad = ~np.all(np.isfinite(arr.reshape(len(scene), -1)), axis=1)
        if bad.any():
            raise RenderError(
                f"non-finite {name} for Gaussian index {int(np.argmax(bad))}"
            )


def project_gaussians(scene: GaussianScene, cam: Camera,
                      config: RenderConfig = RenderConfig()) -> ProjectionCache:
    """EWA-style projection of all Gaussians in front of the near plane.

    2D covariance is J W Sigma W^T J^T with J the perspective Jacobian at
    the mean, then dilated on the diagonal. Result is sorted by depth with
    gaussian index as tie-break.
    """
    w_cam = quat_to_matrix(cam.rotation)
    t_cam = scene.means @ w_cam.T + cam.translation
    visible = t_cam[:, 2] > config.near_plane
    idx = np.nonzero(visible)[0]
    t = t_cam[idx]
    tz = t[:, 2]

    mean2d = np.stack(
        [cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1
    )
    n = idx.size
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * t[:, 1] / tz**2

    rot = quat_to_matrix(normalize_quats(scene.rotations[idx]))
    s_sq = np.exp(2.0 * scene.log_scales[idx])
    sigma = np.einsum("nij,nj,nkj->nik", rot, s_sq, rot)
    m_proj = jac @ w_cam
    cov2d = np.einsum("nij,njk,nlk->nil", m_proj, sigma, m_proj)
    cov2d[:, 0, 0] += config.cov_dilation
    cov2d[:, 1, 1] += config.cov_dilation

    order = np.lexsort((idx, tz))
    return ProjectionCache(
        indices=idx[order], mean2d=mean2d[order], cov2d=cov2d[order],
        depth=tz[order], t_cam=t[order], jacobian=jac[order],
        m_proj=m_proj[order], rot_mats=rot[order], scales_sq=s_sq[order],
        sigma3d=sigma[order], w_cam=w_cam,
    )


def project_gaussian(scene: GaussianScene, index: int, cam: Camera,
                     config: RenderConfig = RenderConfig()):
    """Single-Gaussian projection; None when culled by the near plane."""
    proj = project_gaussians(scene.subset(np.array([index])), cam, config)
    if proj.indices.size == 0:
        return None
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), index)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Pixel coordinates (P, 2) as (x, y), row-major."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _splat_entries(proj: ProjectionCache, width: int, height: int,
                   floor: float):
    """(splat, pixel) index pairs inside conservative per-splat boxes.

    The box half-width is sqrt(2*log(1/floor)) standard deviations along the
    major axis of the 2D covariance, so alpha < floor is guaranteed for
    every excluded pixel. A non-positive floor disables the culling.
    """
    v = proj.indices.size
    if v == 0:
        return (np.empty(0, np.int64),) * 2
    a = proj.cov2d[:, 0, 0]
    b = proj.cov2d[:, 0, 1]
    c = proj.cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    if floor > 0.0:
        radius = np.sqrt(2.0 * np.log(1.0 / floor) * lam_max)
    else:
        radius = np.full(v, float(max(width, height)))
    x0 = np.maximum(np.ceil(proj.mean2d[:, 0] - radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(proj.mean2d[:, 0] + radius), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(proj.mean2d[:, 1] - radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(proj.mean2d[:, 1] + radius), height - 1).astype(np.int64)
    wx = np.maximum(x1 - x0 + 1, 0)
    wy = np.maximum(y1 - y0 + 1, 0)
    counts = wx * wy
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, np.int64),) * 2
    gid = np.repeat(np.arange(v), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offsets, counts)
    wx_r = np.repeat(wx, counts)
    px = np.repeat(x0, counts) + local % np.maximum(wx_r, 1)
    py = np.repeat(y0, counts) + local // np.maximum(wx_r, 1)
    return gid, py * width + px


def _segment_base(pix: np.ndarray) -> np.ndarray:
    """For entries sorted by pixel: index of the first entry of own pixel."""
    if pix.size == 0:
        return pix.copy()
    new = np.empty(pix.size, dtype=bool)
    new[0] = True
    np.not_equal(pix[1:], pix[:-1], out=new[1:])
    starts = np.flatnonzero(new)
    return starts[np.cumsum(new) - 1]


def render(
    scene: GaussianScene,
    cam: Camera,
    emissions: np.ndarray,
    background: np.ndarray,
    config: RenderConfig = RenderConfig(),
) -> tuple[RenderOutput, RenderCache]:
    """Forward render with per-Gaussian emissions and a background image.

    Per pixel, in depth order: alpha_i = opacity * exp(-q/2) clamped to
    [0, alpha_clamp], skipped below alpha_floor; T_i is the product of
    (1 - alpha_j) over closer composited splats, accumulation stops once it
    falls below transmittance_stop. The residual m = exp(-sum alpha_i) over
    composited splats blends in the background.
    """
    _check_finite(scene)
    emissions = np.asarray(emissions, dtype=np.float64)
    if not np.all(np.isfinite(emissions)):
        raise RenderError(
            f"non-finite emission for Gaussian index "
            f"{int(np.argmax(~np.isfinite(emissions)))}"
        )
    h, w = cam.height, cam.width
    npix = h * w
    background = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w))
    proj = project_gaussians(scene, cam, config)

    gid, pix = _splat_entries(proj, w, h, config.alpha_floor)

    det = (proj.cov2d[:, 0, 0] * proj.cov2d[:, 1, 1]
           - proj.cov2d[:, 0, 1] * proj.cov2d[:, 1, 0])
    inv_cov = np.empty_like(proj.cov2d)
    inv_cov[:, 0, 0] = proj.cov2d[:, 1, 1] / det
    inv_cov[:, 1, 1] = proj.cov2d[:, 0, 0] / det
    inv_cov[:, 0, 1] = inv_cov[:, 1, 0] = -proj.cov2d[:, 0, 1] / det

    dx = (pix % w) - proj.mean2d[gid, 0]
    dy = (pix // w) - proj.mean2d[gid, 1]
    q = (inv_cov[gid, 0, 0] * dx * dx
         + 2.0 * inv_cov[gid, 0, 1] * dx * dy
         + inv_cov[gid, 1, 1] * dy * dy)
    gauss = np.exp(-0.5 * q)
    raw_alpha = scene.opacities()[proj.indices][gid] * gauss

    keep = raw_alpha >= config.alpha_floor
    gid, pix = gid[keep], pix[keep]
    raw_alpha, gauss = raw_alpha[keep], gauss[keep]
    delta = np.stack([dx[keep], dy[keep]], axis=1)

    # group by pixel, depth order within (gid is already the depth rank)
    order = np.lexsort((gid, pix))
    gid, pix = gid[order], pix[order]
    raw_alpha, gauss, delta = raw_alpha[order], gauss[order], delta[order]

    alpha = np.minimum(raw_alpha, config.alpha_clamp)
    log_om = np.log1p(-alpha)
    cs = np.cumsum(log_om)
    seg_base = _segment_base(pix)
    t_before = np.exp((cs - log_om) - (cs - log_om)[seg_base])
    active = t_before >= config.transmittance_stop
    alpha_eff = alpha * active
    weights = t_before * alpha_eff
    live = active & (raw_alpha <= config.alpha_clamp)

    c_entry = emissions[proj.indices[gid]] if gid.size else np.empty(0)
    foreground = np.bincount(pix, weights=weights * c_entry, minlength=npix)
    asum = np.bincount(pix, weights=alpha_eff, minlength=npix)
    residual = np.exp(-asum)
    t_final = np.exp(np.bincount(pix, weights=log_om * active, minlength=npix))
    contrib = np.bincount(pix[alpha_eff > 0], minlength=npix)

    bg = background.ravel()
    if config.background_blend == "paper":
        image = (1.0 - residual) * foreground + residual * bg
    else:
        image = foreground + t_final * bg

    output = RenderOutput(
        image=image.reshape(h, w),
        foreground=foreground.reshape(h, w),
        residual=residual.reshape(h, w),
        contrib_count=contrib.reshape(h, w),
    )
    cache = RenderCache(
        scene=scene, cam=cam, config=config, proj=proj, emissions=emissions,
        background=np.array(background), gid=gid, pix=pix, seg_base=seg_base,
        alpha=alpha_eff, raw_alpha=raw_alpha, gauss=gauss, t_before=t_before,
        live=live, weights=weights, delta=delta, t_final=t_final, asum=asum,
        residual=residual, foreground=foreground, inv_cov=inv_cov,
        output=output,
    )
    return output, cache


def render_backward(
    cache: RenderCache,
    grad_image: np.ndarray,
    grad_residual: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Analytic reverse-mode gradients of a forward render.

    `grad_image` and optional `grad_residual` are per-pixel adjoints of the
    blended image and of m(r). Returns gradients for means, log_scales,
    rotations (through quaternion renormalization), opacity_logits, the
    per-Gaussian emissions and the background image.
    """
    scene = cache.scene
    cfg = cache.config
    proj = cache.proj
    n = len(scene)
    h, w = cache.cam.height, cache.cam.width
    d_img = np.asarray(grad_image, dtype=np.float64).ravel()
    d_m = (np.zeros_like(d_img) if grad_residual is None
           else np.asarray(grad_residual, dtype=np.float64).ravel())

    fg = cache.foreground
    m = cache.residual
    bg = cache.background.ravel()

    grads = {
        "means": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacity_logits": np.zeros(n),
        "emissions": np.zeros(n),
    }

    if cfg.background_blend == "paper":
        d_fg = (1.0 - m) * d_img
        d_bg = m * d_img
        d_m = d_m + (bg - fg) * d_img
        d_tfinal = np.zeros_like(d_img)
    else:
        d_fg = d_img
        d_bg = cache.t_final * d_img
        d_tfinal = bg * d_img
    grads["background"] = d_bg.reshape(h, w)
    d_asum = -m * d_m

    gid, pix = cache.gid, cache.pix
    v = proj.indices.size
    if gid.size == 0:
        return grads
    gix = proj.indices[gid]

    c_entry = cache.emissions[gix]
    alpha = cache.alpha
    weights = cache.weights

    d_c = np.bincount(gid, weights=weights * d_fg[pix], minlength=v)
    np.add.at(grads["emissions"], proj.indices, d_c)

    # dL/dalpha_i: own weight term minus attenuation of everything behind,
    # plus the alpha-sum (residual) and final-transmittance paths.
    wc = weights * c_entry
    cs = np.cumsum(wc)
    incl = cs - cs[cache.seg_base] + wc[cache.seg_base]
    tail = fg[pix] - incl
    one_minus = 1.0 - alpha
    d_alpha = d_fg[pix] * (cache.t_before * c_entry - tail / one_minus)
    d_alpha += d_asum[pix]
    d_alpha -= d_tfinal[pix] * cache.t_final[pix] / one_minus
    d_alpha *= cache.live

    # alpha = opacity * exp(-q/2)
    opac = scene.opacities()[proj.indices]
    d_opac = np.bincount(gid, weights=d_alpha * cache.gauss, minlength=v)
    d_logit = d_opac * opac * (1.0 - opac)
    np.add.at(grads["opacity_logits"], proj.indices, d_logit)
    d_q = d_alpha * (-0.5 * cache.raw_alpha)

    # q = delta^T P delta with P = inv(cov2d)
    dx = cache.delta[:, 0]
    dy = cache.delta[:, 1]
    pmat = cache.inv_cov
    pdx = pmat[gid, 0, 0] * dx + pmat[gid, 0, 1] * dy
    pdy = pmat[gid, 0, 1] * dx + pmat[gid, 1, 1] * dy
    d_mean2d = np.stack(
        [np.bincount(gid, weights=-2.0 * d_q * pdx, minlength=v),
         np.bincount(gid, weights=-2.0 * d_q * pdy, minlength=v)], axis=1)
    d_p = np.empty((v, 2, 2))
    d_p[:, 0, 0] = np.bincount(gid, weights=d_q * dx * dx, minlength=v)
    d_p[:, 1, 1] = np.bincount(gid, weights=d_q * dy * dy, minlength=v)
    d_p[:, 0, 1] = d_p[:, 1, 0] = np.bincount(gid, weights=d_q * dx * dy,
                                              minlength=v)
    d_cov = -np.einsum("nij,njk,nkl->nil", pmat, d_p, pmat)

    # cov2d = M Sigma M^T + dilation, M = J W
    mproj = proj.m_proj
    d_sigma = np.einsum("nji,njk,nkl->nil", mproj, d_cov, mproj)
    d_mproj = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov, mproj, proj.sigma3d)
    d_jac = d_mproj @ proj.w_cam.T

    # Sigma = R S^2 R^T
    rot = proj.rot_mats
    d_rot = 2.0 * np.einsum("nij,njk,nk->nik", d_sigma, rot, proj.scales_sq)
    rtdr = np.einsum("nji,njk,nkl->nil", rot, d_sigma, rot)
    d_log_scales = 2.0 * proj.scales_sq * np.einsum("nii->ni", rtdr)

    quats = scene.rotations[proj.indices]
    jac_q = quat_to_matrix_jacobian(normalize_quats(quats))
    d_quat_unit = np.einsum("nqij,nij->nq", jac_q, d_rot)
    d_quat = backprop_through_normalization(quats, d_quat_unit)

    # mean2d and J both depend on the camera-space point t
    t = proj.t_cam
    tz = t[:, 2]
    fx, fy = cache.cam.fx, cache.cam.fy
    d_t = np.einsum("nji,nj->ni", proj.jacobian, d_mean2d)
    inv_z2 = 1.0 / tz**2
    d_t[:, 0] += d_jac[:, 0, 2] * (-fx * inv_z2)
    d_t[:, 1] += d_jac[:, 1, 2] * (-fy * inv_z2)
    d_t[:, 2] += (d_jac[:, 0, 0] * (-fx * inv_z2)
                  + d_jac[:, 0, 2] * (2.0 * fx * t[:, 0] / tz**3)
                  + d_jac[:, 1, 1] * (-fy * inv_z2)
                  + d_jac[:, 1, 2] * (2.0 * fy * t[:, 1] / tz**3))
    d_means = d_t @ proj.w_cam

    np.add.at(grads["means"], proj.indices, d_means)
    np.add.at(grads["log_scales"], proj.indices, d_log_scales)
    np.add.at(grads["rotations"], proj.indices, d_quat)
    return grads


# ---------------------------------------------------------------------------
# Ray directions and the background feature encoding
# ---------------------------------------------------------------------------

N_FREQUENCIES = 4


def ray_directions(cam: Camera) -> np.ndarray:
    """Unit world-space viewing direction per pixel, (H*W, 3)."""
    grid = pixel_grid(cam.width, cam.height)
    d = np.stack(
        [(grid[:, 0] - cam.cx) / cam.fx, (grid[:, 1] - cam.cy) / cam.fy,
         np.ones(grid.shape[0])], axis=1,
    )
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ quat_to_matrix(cam.rotation)  # R^T d, rows are world dirs


def encode_directions(dirs: np.ndarray) -> np.ndarray:
    """Raw direction plus 4-frequency sinusoidal features, (P, 27)."""
    feats = [dirs]
    for k in range(N_FREQUENCIES):
        feats.append(np.sin((2.0**k) * np.pi * dirs))
        feats.append(np.cos((2.0**k) * np.pi * dirs))
    return np.concatenate(feats, axis=1)


def render_with_models(
    scene: GaussianScene,
    cam: Camera,
    frame_embedding: np.ndarray,
    emission_model,
    background_model,
    config: RenderConfig = RenderConfig(),
):
    """Forward render with emission and background MLPs; returns
    (RenderOutput, RenderCache, emission cache, background cache)."""
    ef = np.asarray(frame_embedding, dtype=np.float64)
    em_in = np.concatenate(
        [scene.embeddings, np.broadcast_to(ef, (len(scene), ef.size))], axis=1
    )
    emissions, em_cache = emission_model.forward(em_in)
    dirs = ray_directions(cam)
    bg_in = np.concatenate(
        [encode_directions(dirs), np.broadcast_to(ef, (dirs.shape[0], ef.size))],
        axis=1,
    )
    background, bg_cache = background_model.forward(bg_in)
    out, cache = render(
        scene, cam, emissions, background.reshape(cam.height, cam.width), config
    )
    return out, cache, em_cache, bg_cache
