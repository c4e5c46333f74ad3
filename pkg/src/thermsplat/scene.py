"""Scene data model: Gaussians, cameras, synthetic generation and
thermal degradation injection, plus point-based initialization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geometry import look_at_rotation, matrix_to_quat, normalize_quats
from .imaging import Frame, Sequence


class SceneError(Exception):
    pass


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class GaussianScene:
    """Anisotropic 3D Gaussians with learnable appearance embeddings.

    `gt_emissions` carries fixed ground-truth scalars for synthetic scenes,
    bypassing the emission model when rendering reference frames.
    """

    means: np.ndarray           # (N, 3) world units
    log_scales: np.ndarray      # (N, 3) log world units
    rotations: np.ndarray       # (N, 4) unit quaternions (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    embeddings: np.ndarray      # (N, d_g)
    gt_emissions: np.ndarray | None = None

    def __post_init__(self):
        n = self.means.shape[0]
        for name in ("means", "log_scales", "rotations", "opacity_logits", "embeddings"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape[0] != n:
                raise SceneError(f"{name} first dimension must be {n}")
            setattr(self, name, arr)
        self.rotations = normalize_quats(self.rotations)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def subset(self, mask: np.ndarray) -> "GaussianScene":
        return GaussianScene(
            self.means[mask], self.log_scales[mask], self.rotations[mask],
            self.opacity_logits[mask], self.embeddings[mask],
            None if self.gt_emissions is None else self.gt_emissions[mask],
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; rotation is world-to-camera, translation follows
    x_cam = R x_world + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray        # (4,) unit quaternion (w, x, y, z)
    translation: np.ndarray     # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneError("principal point must lie inside the image")
        object.__setattr__(self, "rotation",
                           normalize_quats(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))


@dataclass(frozen=True)
class DegradationSpec:
    """Synthetic sensor degradations; all-zero spec is the identity."""

    gain_amp: float = 0.0           # sinusoidal per-frame gain amplitude
    offset_walk_sigma: float = 0.0  # per-frame random-walk offset step
    vignette_strength: float = 0.0  # [0, 1], cos^4-style radial falloff
    fpn_sigma: float = 0.0          # fixed-pattern offset std
    fpn_column: bool = False        # column-structured fixed pattern
    blur_sigma: float = 0.0         # Gaussian blur, pixels
    seed: int = 0

    def __post_init__(self):
        for name in ("gain_amp", "offset_walk_sigma", "vignette_strength",
                     "fpn_sigma", "blur_sigma"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")
        if self.vignette_strength > 1:
            raise SceneError("vignette_strength must be <= 1")


def ring_cameras(n_cameras: int, width: int = 64, height: int = 64,
                 radius: float = 2.2, elevation: float = 0.8,
                 fov_scale: float = 1.0) -> list[Camera]:
    """Cameras evenly spaced on a ring, all looking at the origin."""
    fx = fov_scale * float(width)
    fy = fov_scale * float(height)
    cams = []
    for k in range(n_cameras):
        theta = 2.0 * np.pi * k / n_cameras
        pos = np.array([radius * np.cos(theta), radius * np.sin(theta), elevation])
        rot = look_at_rotation(pos, np.zeros(3))
        cams.append(Camera(
            fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height,
            rotation=matrix_to_quat(rot), translation=-rot @ pos,
        ))
    return cams


def generate_synthetic_scene(
    n_gaussians: int, n_cameras: int, seed: int,
    width: int = 64, height: int = 64, embedding_dim: int = 16,
) -> tuple[GaussianScene, list[Camera]]:
    """Seeded random Gaussians inside the unit cube with fixed ground-truth
    emissions, plus a camera ring around the origin."""
    if n_gaussians < 1:
        raise SceneError("need at least one Gaussian")
    if n_cameras < 2:
        raise SceneError("need at least two cameras")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5, 0.5, size=(n_gaussians, 3))
    log_scales = np.log(rng.uniform(0.04, 0.11, size=(n_gaussians, 3)))
    rotations = normalize_quats(rng.standard_normal((n_gaussians, 4)))
    opacity = rng.uniform(0.6, 0.95, size=n_gaussians)
    opacity_logits = np.log(opacity / (1.0 - opacity))
    embeddings = 0.01 * rng.standard_normal((n_gaussians, embedding_dim))
    gt_emissions = rng.uniform(0.1, 0.9, size=n_gaussians)
    scene = GaussianScene(means, log_scales, rotations, opacity_logits,
                          embeddings, gt_emissions)
    cams = ring_cameras(n_cameras, width=width, height=height)
    return scene, cams


def degrade_sequence(frames: Sequence, spec: DegradationSpec) -> Sequence:
    """Inject gain drift, offset walk, vignetting, fixed-pattern noise and blur.

    Per frame t: clamp(g_t * (blur(I) * V + FPN) + o_t, 0, 1) with
    g_t = 1 + gain_amp*sin(2*pi*t/N), o_t a seeded random walk, V a radial
    cos^4-style falloff and FPN a per-pixel (or per-column) constant offset.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = frames[0].height, frames[0].width
    n = len(frames)

    if spec.fpn_sigma > 0:
        if spec.fpn_column:
            fpn = np.broadcast_to(
                rng.normal(0.0, spec.fpn_sigma, size=(1, w)), (h, w)
            ).copy()
        else:
            fpn = rng.normal(0.0, spec.fpn_sigma, size=(h, w))
    else:
        fpn = 0.0

    if spec.offset_walk_sigma > 0:
        offsets = np.cumsum(rng.normal(0.0, spec.offset_walk_sigma, size=n))
    else:
        offsets = np.zeros(n)

    if spec.vignette_strength > 0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
        vignette = 1.0 - spec.vignette_strength * (r / r.max()) ** 4
    else:
        vignette = 1.0

    out = []
    for t, frame in enumerate(frames):
        px = frame.pixels
        if spec.blur_sigma > 0:
            px = gaussian_filter(px, spec.blur_sigma, mode="nearest")
        gain = 1.0 + spec.gain_amp * np.sin(2.0 * np.pi * t / n)
        px = gain * (px * vignette + fpn) + offsets[t]
        out.append(Frame(np.clip(px, 0.0, 1.0), frame.bit_depth, t))
    return Sequence(out)


def init_from_points(points: np.ndarray, k: int, seed: int = 0,
                     embedding_dim: int = 16) -> GaussianScene:
    """One isotropic Gaussian per point; scale from the mean distance to the
    k nearest neighbors (floored at 1e-4), identity rotation, opacity 0.1."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < k + 1:
        raise SceneError(f"need at least {k + 1} points for k={k}, got {n}")
    dists, _ = cKDTree(points).query(points, k=k + 1)
    mean_dist = np.maximum(dists[:, 1:].mean(axis=1), 1e-4)
    rng = np.random.default_rng(seed)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        means=points,
        log_scales=np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, logit(0.1)),
        embeddings=0.01 * rng.standard_normal((n, embedding_dim)),
    )


# ---------------------------------------------------------------------------
# File formats: cameras.txt and points.txt
# ---------------------------------------------------------------------------

def save_cameras(cams: list[Camera], path) -> None:
    """One line per view: id fx fy cx cy width height qw qx qy qz tx ty tz."""
    lines = []
    for i, c in enumerate(cams):
        q = c.rotation
        t = c.translation
        lines.append(
            f"{i} {c.fx:.17g} {c.fy:.17g} {c.cx:.17g} {c.cy:.17g} "
            f"{c.width} {c.height} "
            f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} "
            f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 14:
            raise SceneError(f"{path}: camera line needs 14 fields, got {len(parts)}")
        vals = [float(p) for p in parts[1:]]
        cams.append(Camera(
            fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
            width=int(vals[4]), height=int(vals[5]),
            rotation=np.array(vals[6:10]), translation=np.array(vals[10:13]),
        ))
    if not cams:
        raise SceneError(f"{path}: no cameras found")
    return cams


def load_points(path) -> np.ndarray:
    """Plain-text point cloud, one `x y z` per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise SceneError(f"{path}: point line needs 3 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise SceneError(f"{path}: no points found")
    return np.asarray(rows)
