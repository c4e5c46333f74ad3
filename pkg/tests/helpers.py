"""Shared test utilities: a straight-line scalar rendering oracle and small
scene builders used by both the unit tests and the acceptance suite."""

import numpy as np

from thermsplat.geometry import quat_to_matrix
from thermsplat.render import RenderConfig
from thermsplat.scene import Camera, GaussianScene


def brute_force_render(scene, cam, emissions, background,
                       cfg: RenderConfig = RenderConfig()):
    """Per-pixel scalar compositing loop over every Gaussian.

    No vectorization, no footprint culling: projects each Gaussian in
    front of the near plane, sorts by (depth, index), and walks the full
    list per pixel with the same floor/clamp/stop arithmetic as the
    production renderer. Returns (image, foreground, residual).
    """
    w_cam = quat_to_matrix(cam.rotation)
    background = np.broadcast_to(np.asarray(background, dtype=float),
                                 (cam.height, cam.width))
    splats = []
    for i in range(len(scene)):
        t = w_cam @ scene.means[i] + cam.translation
        if t[2] <= cfg.near_plane:
            continue
        u = np.array([cam.fx * t[0] / t[2] + cam.cx,
                      cam.fy * t[1] / t[2] + cam.cy])
        jac = np.array([[cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                        [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        rot = quat_to_matrix(scene.rotations[i])
        s2 = np.diag(np.exp(2.0 * scene.log_scales[i]))
        m = jac @ w_cam
        cov = m @ rot @ s2 @ rot.T @ m.T + cfg.cov_dilation * np.eye(2)
        splats.append((t[2], i, u, np.linalg.inv(cov)))
    splats.sort(key=lambda s: (s[0], s[1]))

    opac = scene.opacities()
    image = np.zeros((cam.height, cam.width))
    fg_img = np.zeros_like(image)
    res_img = np.ones_like(image)
    for y in range(cam.height):
        for x in range(cam.width):
            trans, fg, asum = 1.0, 0.0, 0.0
            for _, i, u, pmat in splats:
                if trans < cfg.transmittance_stop:
                    break
                d = np.array([x, y], dtype=float) - u
                a = opac[i] * np.exp(-0.5 * d @ pmat @ d)
                if a < cfg.alpha_floor:
                    continue
                a = min(a, cfg.alpha_clamp)
                fg += trans * a * emissions[i]
                asum += a
                trans *= 1.0 - a
            m = np.exp(-asum)
            fg_img[y, x] = fg
            res_img[y, x] = m
            if cfg.background_blend == "paper":
                image[y, x] = (1.0 - m) * fg + m * background[y, x]
            else:
                image[y, x] = fg + trans * background[y, x]
    return image, fg_img, res_img


def coincident_splats_scene(opacity=0.5, z=2.0):
    """Two identical splats at the origin viewed head-on; the center pixel
    of the odd-sized image sits exactly at both projected means."""
    logit = float(np.log(opacity / (1.0 - opacity)))
    scene = GaussianScene(
        means=np.zeros((2, 3)),
        log_scales=np.full((2, 3), np.log(0.25)),
        rotations=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
        opacity_logits=np.full(2, logit),
        embeddings=np.zeros((2, 2)),
    )
    cam = Camera(fx=33.0, fy=33.0, cx=16.0, cy=16.0, width=33, height=33,
                 rotation=np.array([1.0, 0, 0, 0]),
                 translation=np.array([0.0, 0.0, z]))
    return scene, cam
