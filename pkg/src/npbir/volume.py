"""SDF volume rendering, the stage-1 losses, and the surface training loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import OutOfDomainError
from .grids import (Aabb, DTYPE, SdfScene, VoxelGrid, interp, query_radiance,
                    query_sdf, upscale)
from .optim import Adam


# ---------------------------------------------------------------------------
# Cameras and rays
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: OpenCV convention (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray  # 4x4 rigid transform

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.cam_to_world.shape != (4, 4):
            raise ValueError("cam_to_world must be 4x4")
        r = self.cam_to_world[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal within 1e-6")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def rays(self, px: np.ndarray, py: np.ndarray):
        """World-space unit ray directions through pixel coordinates.

        px, py are continuous image coordinates (pixel centers at +0.5).
        Returns (origins, directions) of shape (N, 3).
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        d = np.stack([(px - self.cx) / self.fx,
                      (py - self.cy) / self.fy,
                      np.ones_like(px)], axis=-1)
        d = d @ self.cam_to_world[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def all_rays(self):
        """One ray per pixel center, row-major order."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return self.rays(xs.ravel() + 0.5, ys.ravel() + 0.5)


def ray_box_intersect(origins, dirs, box: Aabb, t_min: float = 0.0):
    """Slab test; returns (t_enter, t_exit), with t_enter > t_exit on miss."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box.lo - o) * inv
        t1 = (box.hi - o) * inv
    # Parallel rays: infinite slabs resolved by nan-aware min/max
    lo = np.fmin(t0, t1)
    hi = np.fmax(t0, t1)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    # Axis-parallel ray outside its slab never hits
    inside = (o >= box.lo) & (o <= box.hi)
    parallel_out = (d == 0.0) & ~inside
    t_enter = np.maximum(lo.max(axis=-1), t_min)
    t_exit = hi.min(axis=-1)
    t_exit = np.where(parallel_out.any(axis=-1), -np.inf, t_exit)
    return t_enter, t_exit


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def scaled_sigmoid(y: torch.Tensor, sharpness: float) -> torch.Tensor:
    return torch.sigmoid(sharpness * y)


def alpha_from_sdf(s_i, s_next, sharpness: float) -> torch.Tensor:
    """Opacity from consecutive signed distances (NeuS-style, unbiased)."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    s_i = torch.as_tensor(s_i, dtype=DTYPE)
    s_next = torch.as_tensor(s_next, dtype=DTYPE)
    a = scaled_sigmoid(s_i, sharpness)
    b = scaled_sigmoid(s_next, sharpness)
    return torch.clamp((a - b) / a, min=0.0)


def composite(alphas, radiances):
    """Front-to-back alpha blending.

    Returns (color, weights) where weights[i] = T_i * alpha_i feed the
    per-point RGB loss.
    """
    alphas = torch.as_tensor(alphas, dtype=DTYPE)
    radiances = torch.as_tensor(radiances, dtype=DTYPE)
    if radiances.dim() == 1:
        radiances = radiances[:, None]
    if alphas.shape[0] != radiances.shape[0]:
        raise ValueError("alphas and radiances must have equal length")
    one_minus = 1.0 - alphas
    trans = torch.cumprod(one_minus, dim=0)
    t_i = torch.cat([torch.ones(1, dtype=DTYPE), trans[:-1]])
    weights = t_i * alphas
    color = (weights[:, None] * radiances).sum(dim=0)
    return color, weights


@dataclass(frozen=True)
class HuberState:
    """Adaptive Huber threshold with running-median update."""

    t: float
    momentum: float = 0.99
    floor: float = 0.01

    def __post_init__(self):
        if self.t < self.floor:
            object.__setattr__(self, "t", self.floor)


def photo_loss(pred, target, h: HuberState) -> torch.Tensor:
    """Huber photometric loss, summed over channels (per pixel)."""
    pred = torch.as_tensor(pred, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    e = target - pred
    abs_e = e.abs()
    t = h.t
    quad = e * e
    lin = 2.0 * t * abs_e - t * t
    return torch.where(abs_e <= t, quad, lin).sum(dim=-1)


def update_huber(h: HuberState, batch_median_abs_residual: float) -> HuberState:
    if batch_median_abs_residual < 0:
        raise ValueError("median residual must be nonnegative")
    t_new = h.momentum * h.t + (1.0 - h.momentum) * batch_median_abs_residual
    return replace(h, t=max(h.floor, t_new))


def laplacian_loss(grid: VoxelGrid) -> torch.Tensor:
    """Sum over interior grid points of (value - mean of 6 face neighbors)^2."""
    if grid.channels != 1:
        raise ValueError("laplacian_loss expects a scalar (C=1) grid")
    if min(grid.resolution) < 3:
        raise ValueError("laplacian_loss needs resolution >= 3 per axis")
    v = grid.values[..., 0]
    c = v[1:-1, 1:-1, 1:-1]
    neighbor_mean = (v[:-2, 1:-1, 1:-1] + v[2:, 1:-1, 1:-1]
                     + v[1:-1, :-2, 1:-1] + v[1:-1, 2:, 1:-1]
                     + v[1:-1, 1:-1, :-2] + v[1:-1, 1:-1, 2:]) / 6.0
    return ((c - neighbor_mean) ** 2).sum()


def pp_rgb_loss(weights, radiances, target) -> torch.Tensor:
    """Per-point RGB loss: sum_i w_i * |L_i - target|_1."""
    weights = torch.as_tensor(weights, dtype=DTYPE)
    radiances = torch.as_tensor(radiances, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    if weights.shape[0] != radiances.shape[0]:
        raise ValueError("weights and radiances must have equal length")
    return (weights * (radiances - target).abs().sum(dim=-1)).sum()


# ---------------------------------------------------------------------------
# Ray sampling and batch rendering
# ---------------------------------------------------------------------------

@dataclass
class Stage1Config:
    iterations: int = 20000
    w_lap: float = 1e-8
    w_pp_rgb: float = 0.01
    lr_sdf: float = 0.01
    lr_sdf_after: float = 0.001
    lr_decay_step: int = 10000
    lr_head: float = 0.001
    lr_feat: float = 0.1
    sharpness_init_masked: float = 30.0
    sharpness_init_unmasked: float = 5.0
    sharpness_step: float = 0.02
    sharpness_max: float = 300.0
    upscale_every: int = 1000
    upscale_until: int = 10000
    fg_res_init: int = 25
    fg_res_final: int = 96
    bg_res_init: int = 13
    bg_res_final: int = 48
    bg_scale: float = 16.0
    feat_width: int = 12
    hidden_width: int = 64
    batch_rays: int = 4096
    huber_momentum: float = 0.99
    huber_floor: float = 0.01
    huber_init: float = 0.1
    weight_threshold: float = 1e-9
    fg_bbox_lo: tuple = (-1.0, -1.0, -1.0)
    fg_bbox_hi: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("w_lap", "w_pp_rgb", "lr_sdf", "lr_head", "lr_feat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def fg_bbox(self) -> Aabb:
        return Aabb(np.array(self.fg_bbox_lo), np.array(self.fg_bbox_hi))


def sample_rays(scene: SdfScene, origins: np.ndarray, dirs: np.ndarray):
    """Depth samples along each ray, marching from the bg box entry point.

    Step size is half the local voxel size: fine steps across the fg box
    interval, coarse steps elsewhere inside the bg box. Returns flat arrays
    (ray_index, t, step) sorted by (ray, t).
    """
    n_rays = origins.shape[0]
    d_fg = 0.5 * float(np.min(scene.fg_sdf.voxel_size))
    d_bg = 0.5 * float(np.min(scene.bg_sdf.voxel_size))
    eps = 1e-9
    bg0, bg1 = ray_box_intersect(origins, dirs, scene.bg_bbox, t_min=eps)
    fg0, fg1 = ray_box_intersect(origins, dirs, scene.fg_bbox, t_min=eps)
    bg_hit = bg1 > bg0
    fg_hit = (fg1 > fg0) & bg_hit
    fg0 = np.where(fg_hit, np.clip(fg0, bg0, bg1), bg1)
    fg1 = np.where(fg_hit, np.clip(fg1, bg0, bg1), bg1)
    # three segments per ray: coarse before fg, fine inside fg, coarse after
    seg_start = np.stack([bg0, fg0, fg1], axis=1)
    seg_end = np.stack([fg0, fg1, bg1], axis=1)
    seg_step = np.stack([np.full(n_rays, d_bg), np.full(n_rays, d_fg),
                         np.full(n_rays, d_bg)], axis=1)
    seg_start = np.where(bg_hit[:, None], seg_start, 0.0)
    seg_end = np.where(bg_hit[:, None], seg_end, 0.0)
    counts = np.maximum(
        0, np.floor((seg_end - seg_start) / seg_step)).astype(np.int64)
    flat_counts = counts.ravel()
    total = int(flat_counts.sum())
    if total == 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    seg_id = np.repeat(np.arange(3 * n_rays), flat_counts)
    offsets = np.concatenate([[0], np.cumsum(flat_counts)[:-1]])
    k = np.arange(total) - np.repeat(offsets, flat_counts)
    t = seg_start.ravel()[seg_id] + (k + 0.5) * seg_step.ravel()[seg_id]
    return seg_id // 3, t, seg_step.ravel()[seg_id]


def render_rays(scene: SdfScene, origins: np.ndarray, dirs: np.ndarray,
                weight_threshold: float = 0.0):
    """Volume-render a batch of rays against the scene.

    Returns (colors (R,3), weights (R,K), radiances (R,K,3), valid (R,K)).
    """
    n_rays = origins.shape[0]
    ray_idx, t, step = sample_rays(scene, origins, dirs)
    if ray_idx.size == 0:
        colors = scene.bg_color.expand(n_rays, 3)
        z = torch.zeros(n_rays, 0, dtype=DTYPE)
        return colors, z, z.reshape(n_rays, 0, 3), z.bool()
    x = origins[ray_idx] + t[:, None] * dirs[ray_idx]
    x = np.clip(x, scene.bg_bbox.lo, scene.bg_bbox.hi)
    s = query_sdf(scene, x)
    # S(x_{i+1}): the next sample on the same ray, or one extra step
    # (clamped into the bg box) for the last sample of each ray.
    last = np.ones(ray_idx.size, dtype=bool)
    last[:-1] = ray_idx[:-1] != ray_idx[1:]
    x_extra = x[last] + (step[last] * 1.0)[:, None] * dirs[ray_idx[last]]
    x_extra = np.clip(x_extra, scene.bg_bbox.lo, scene.bg_bbox.hi)
    s_next = torch.empty_like(s)
    s_next[:-1] = s[1:]
    s_next[torch.as_tensor(last)] = query_sdf(scene, x_extra)
    alpha = alpha_from_sdf(s, s_next, scene.sharpness)

    # pack into a padded (ray, sample) layout for exact cumprod compositing
    counts = np.bincount(ray_idx, minlength=n_rays)
    k_max = int(counts.max())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(ray_idx.size) - starts[ray_idx]
    ridx = torch.as_tensor(ray_idx)
    pidx = torch.as_tensor(pos)
    alpha_pad = torch.zeros(n_rays, k_max, dtype=DTYPE)
    alpha_pad[ridx, pidx] = alpha
    trans = torch.cumprod(1.0 - alpha_pad, dim=1)
    t_i = torch.cat([torch.ones(n_rays, 1, dtype=DTYPE), trans[:, :-1]], dim=1)
    weights = t_i * alpha_pad

    # radiance only where the compositing weight matters
    w_flat = weights[ridx, pidx]
    active = w_flat.detach().numpy() > weight_threshold
    rad_pad = torch.zeros(n_rays, k_max, 3, dtype=DTYPE)
    if active.any():
        rad = query_radiance(scene, x[active], dirs[ray_idx[active]])
        rad_pad[ridx[active], pidx[active]] = rad
    colors = (weights[:, :, None] * rad_pad).sum(dim=1)
    t_final = torch.ones(n_rays, dtype=DTYPE)
    if k_max > 0:
        t_final = trans[:, -1]
    colors = colors + t_final[:, None] * scene.bg_color
    valid = torch.zeros(n_rays, k_max, dtype=torch.bool)
    valid[ridx, pidx] = True
    return colors, weights, rad_pad, valid


def surface_objective(scene: SdfScene, origins, dirs, targets,
                      cfg: Stage1Config, huber: HuberState):
    """Stage-1 objective for a ray batch; returns (total, parts dict)."""
    targets_t = torch.as_tensor(targets, dtype=DTYPE)
    colors, weights, radiances, _ = render_rays(
        scene, origins, dirs, weight_threshold=cfg.weight_threshold)
    l_photo = photo_loss(colors, targets_t, huber).mean()
    l_lap = laplacian_loss(scene.fg_sdf) + laplacian_loss(scene.bg_sdf)
    l_pp = (weights * (radiances - targets_t[:, None, :]).abs().sum(dim=-1)
            ).sum(dim=1).mean()
    total = l_photo + cfg.w_lap * l_lap + cfg.w_pp_rgb * l_pp
    residual = (targets_t - colors).detach().abs()
    parts = {
        "photo": float(l_photo.detach()), "lap": float(l_lap.detach()),
        "pp_rgb": float(l_pp.detach()),
        "median_abs_residual": float(residual.median()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _make_optimizer(scene: SdfScene, cfg: Stage1Config) -> Adam:
    schedule = [(cfg.lr_decay_step, cfg.lr_sdf_after)]
    groups = [
        {"params": [scene.fg_sdf.values, scene.bg_sdf.values],
         "lr": cfg.lr_sdf, "lr_schedule": schedule},
        {"params": [scene.fg_feat.values, scene.bg_feat.values],
         "lr": cfg.lr_feat},
        {"params": scene.head.parameters() + [scene.bg_color_raw],
         "lr": cfg.lr_head},
    ]
    return Adam(groups, betas=(0.9, 0.99), eps=1e-12)


def _upscale_scene(scene: SdfScene, cfg: Stage1Config) -> bool:
    """Double grid resolutions if below the configured finals."""
    changed = False
    if scene.fg_sdf.resolution[0] < cfg.fg_res_final:
        scene.fg_sdf = upscale(scene.fg_sdf)
        scene.fg_feat = upscale(scene.fg_feat)
        changed = True
    if scene.bg_sdf.resolution[0] < cfg.bg_res_final:
        scene.bg_sdf = upscale(scene.bg_sdf)
        scene.bg_feat = upscale(scene.bg_feat)
        changed = True
    if changed:
        for g in (scene.fg_sdf, scene.fg_feat, scene.bg_sdf, scene.bg_feat):
            g.values.requires_grad_(True)
    return changed


def train_surface(dataset, cfg: Stage1Config, log_path=None,
                  callback=None) -> SdfScene:
    """Optimize an SdfScene against a posed dataset.

    Deterministic for a fixed cfg.seed (fixed batch draws and reduction
    order). Writes a CSV loss log when log_path is given.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 posed images")
    has_masks = all(view.mask is not None for view in dataset.views)
    scene = SdfScene.create(
        cfg.fg_bbox, fg_res=cfg.fg_res_init, bg_res=cfg.bg_res_init,
        bg_scale=cfg.bg_scale, feat_width=cfg.feat_width,
        hidden=cfg.hidden_width,
        sharpness=(cfg.sharpness_init_masked if has_masks
                   else cfg.sharpness_init_unmasked),
        seed=cfg.seed)
    for p in scene.parameters():
        p.requires_grad_(True)

    origins, dirs, targets = [], [], []
    for view in dataset.views:
        o, d = view.camera.all_rays()
        origins.append(o)
        dirs.append(d)
        targets.append(view.image.reshape(-1, 3))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    targets = np.concatenate(targets)
    n_pixels = origins.shape[0]

    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = _make_optimizer(scene, cfg)
    huber = HuberState(cfg.huber_init, cfg.huber_momentum, cfg.huber_floor)
    log_rows = []
    for it in range(cfg.iterations):
        if (it > 0 and it % cfg.upscale_every == 0 and it <= cfg.upscale_until):
            if _upscale_scene(scene, cfg):
                opt_step = optimizer.step_count
                optimizer = _make_optimizer(scene, cfg)
                optimizer.step_count = opt_step
        batch = torch.randint(n_pixels, (min(cfg.batch_rays, n_pixels),),
                              generator=gen).numpy()
        total, parts = surface_objective(
            scene, origins[batch], dirs[batch], targets[batch], cfg, huber)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        huber = update_huber(huber, parts["median_abs_residual"])
        scene.sharpness = min(scene.sharpness + cfg.sharpness_step,
                              cfg.sharpness_max)
        log_rows.append((it, parts["photo"], parts["lap"], parts["pp_rgb"],
                         scene.sharpness, huber.t))
        if callback is not None:
            callback(it, scene, parts)
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "L_photo", "L_lap", "L_pp_rgb",
                             "sharpness", "huber_t"])
            writer.writerows(log_rows)
    return scene


def render_image(scene: SdfScene, camera: Camera, chunk: int = 8192) -> np.ndarray:
    """Full-frame volume render (no gradients), HxWx3 float."""
    o, d = camera.all_rays()
    out = np.zeros((o.shape[0], 3))
    with torch.no_grad():
        for i in range(0, o.shape[0], chunk):
            colors, _, _, _ = render_rays(scene, o[i:i + chunk], d[i:i + chunk],
                                          weight_threshold=1e-9)
            out[i:i + chunk] = colors.numpy()
    return out.reshape(camera.height, camera.width, 3)


def render_mask(mesh, camera: Camera, supersample: int = 4) -> np.ndarray:
    """Per-pixel coverage fraction of the mesh via supersampled visibility."""
    from .geometry import Bvh, ray_cast_many
    if supersample < 1:
        raise ValueError("supersample factor must be >= 1")
    k = supersample
    h, w = camera.height, camera.width
    if len(mesh.triangles) == 0:
        return np.zeros((h, w))
    bvh = Bvh(mesh)
    ys, xs = np.mgrid[0:h, 0:w]
    cover = np.zeros(h * w)
    for sy in range(k):
        for sx in range(k):
            px = xs.ravel() + (sx + 0.5) / k
            py = ys.ravel() + (sy + 0.5) / k
            o, d = camera.rays(px, py)
            t_hit, _, _, _ = ray_cast_many(bvh, o, d, t_min=0.0)
            cover += (t_hit < np.inf)
    return (cover / (k * k)).reshape(h, w)
