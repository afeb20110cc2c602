"""Stage 3: Monte Carlo path tracing over textured assets, gradients via
replayed differentiable shading, and the three-step refinement schedule."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Bvh, TriMesh, ray_cast_many, save_mesh_binary
from .grids import DTYPE
from .optim import (Adam, UniformLaplacian, image_grid_laplacian,
                    laplacian_from_edges, mesh_edges)
from .shading import (BrdfParams, EnvMap, SgMixture, _tangent_frame,
                      brdf_eval, brdf_pdf, brdf_sample, direction_to_latlong,
                      envmap_from_sg, envmap_lookup, latlong_to_direction,
                      sg_eval)
from .volume import Camera, render_mask


@dataclass
class TexturedAssets:
    """Mesh with a UV atlas plus albedo/roughness textures and a light."""

    mesh: TriMesh
    albedo_tex: torch.Tensor     # (R, R, 3), indexed [x, y]
    roughness_tex: torch.Tensor  # (R, R)
    light: SgMixture | EnvMap
    fresnel_f0: float = 0.04

    def __post_init__(self):
        self.albedo_tex = torch.as_tensor(self.albedo_tex, dtype=DTYPE)
        self.roughness_tex = torch.as_tensor(self.roughness_tex, dtype=DTYPE)
        if not bool(torch.isfinite(self.albedo_tex).all()) \
                or not bool(torch.isfinite(self.roughness_tex).all()):
            raise ValueError("texture texels must be finite")
        if self.mesh.uvs is None:
            raise ValueError("mesh needs a UV atlas")


@dataclass
class RenderConfig:
    spp: int = 64
    max_depth: int = 3
    gi_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.spp < 1 or self.max_depth < 1:
            raise ValueError("spp and max_depth must be >= 1")


FINAL_RENDER = RenderConfig(spp=256, max_depth=8)


def view_seed(base: int, view_index: int) -> int:
    """Per-view sampler seed shared by dataset generation and refinement."""
    return base + 104729 * view_index


@dataclass
class Stage3Schedule:
    step1_iters: int = 1000
    step2_iters: int = 1000
    step3_iters: int = 500
    lr_albedo: float = 1e-2
    lr_roughness: float = 5e-3
    lr_sg: float = 1e-3
    lr_env: float = 0.01
    lr_vertices: float = 1e-3
    lam_env: float = 1.0
    lam_vertices: float = 100.0
    w_mask: float = 10.0
    w_reg: float = 0.1
    env_width: int = 64
    env_height: int = 32
    spp: int = 16
    max_depth: int = 2
    gi_enabled: bool = True
    seed: int = 0
    # With resample_noise=False each view keeps one sampler realization
    # across iterations (common random numbers): when the targets were
    # rendered by the same tracer with matching seeds, the Monte Carlo
    # noise cancels from the loss instead of flooring it.
    resample_noise: bool = True

    def __post_init__(self):
        for name in ("lr_albedo", "lr_roughness", "lr_sg", "lr_env",
                     "lr_vertices", "w_mask", "w_reg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# Texture sampling
# ---------------------------------------------------------------------------

def sample_texture(tex: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of tex[x, y] at uv in [0,1]^2, clamped at borders."""
    squeeze = tex.dim() == 2
    if squeeze:
        tex = tex[..., None]
    rx, ry = tex.shape[0], tex.shape[1]
    x = torch.clamp(uv[..., 0] * rx - 0.5, 0.0, rx - 1.0)
    y = torch.clamp(uv[..., 1] * ry - 0.5, 0.0, ry - 1.0)
    x0 = torch.clamp(torch.floor(x).long(), 0, max(rx - 2, 0))
    y0 = torch.clamp(torch.floor(y).long(), 0, max(ry - 2, 0))
    fx = (x - x0.to(DTYPE))[..., None]
    fy = (y - y0.to(DTYPE))[..., None]
    x1 = torch.clamp(x0 + 1, max=rx - 1)
    y1 = torch.clamp(y0 + 1, max=ry - 1)
    out = (tex[x0, y0] * (1 - fx) * (1 - fy) + tex[x1, y0] * fx * (1 - fy)
           + tex[x0, y1] * (1 - fx) * fy + tex[x1, y1] * fx * fy)
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# Light sampling (environment map texel CDF / SG vMF mixture)
# ---------------------------------------------------------------------------

class _EnvLight:
    def __init__(self, env: EnvMap):
        self.env = env
        h, w = env.height, env.width
        with torch.no_grad():
            lum = torch.clamp(env.values, min=0.0).mean(dim=-1).numpy()
        theta = np.pi * np.arange(h + 1) / h
        self.texel_omega = (2.0 * np.pi / w) * (np.cos(theta[:-1])
                                                - np.cos(theta[1:]))
        power = lum * self.texel_omega[:, None]
        total = power.sum()
        if total <= 0:
            power = np.broadcast_to(self.texel_omega[:, None],
                                    (h, w)).copy()
            total = power.sum()
        self.prob = power.reshape(-1) / total
        self.cdf = np.cumsum(self.prob)
        self.cdf[-1] = 1.0
        self.h, self.w = h, w

    def eval(self, dirs: torch.Tensor) -> torch.Tensor:
        return envmap_lookup(self.env, dirs)

    def sample(self, u: torch.Tensor):
        un = u.numpy()
        flat = np.searchsorted(self.cdf, un[:, 0], side="right")
        flat = np.minimum(flat, self.h * self.w - 1)
        i, j = flat // self.w, flat % self.w
        uu = (j + un[:, 1]) / self.w
        vv = (i + un[:, 2]) / self.h
        dirs = latlong_to_direction(torch.as_tensor(uu, dtype=DTYPE),
                                    torch.as_tensor(vv, dtype=DTYPE))
        pdf = self.prob[flat] / np.maximum(self.texel_omega[i], 1e-300)
        return dirs, torch.as_tensor(pdf, dtype=DTYPE)

    def pdf(self, dirs: torch.Tensor) -> torch.Tensor:
        u, v = direction_to_latlong(dirs.detach())
        j = torch.clamp((u * self.w).long(), 0, self.w - 1).numpy()
        i = torch.clamp((v * self.h).long(), 0, self.h - 1).numpy()
        pdf = self.prob[i * self.w + j] / np.maximum(self.texel_omega[i],
                                                     1e-300)
        return torch.as_tensor(pdf, dtype=DTYPE)


class _SgLight:
    def __init__(self, sg: SgMixture):
        self.sg = sg
        with torch.no_grad():
            lam = torch.clamp(sg.lambdas, min=0.0)
            amp = torch.clamp(sg.amplitudes, min=0.0).mean(dim=-1)
            # lobe energy: integral of the lobe over the sphere
            energy = amp * torch.where(
                lam > 1e-9, 2.0 * math.pi * (1 - torch.exp(-2 * lam)) / lam.clamp(min=1e-9),
                torch.full_like(lam, 4.0 * math.pi))
            total = float(energy.sum())
            if total <= 0:
                energy = torch.ones_like(energy)
                total = float(energy.sum())
            self.p_lobe = (energy / total).numpy()
            self.cdf = np.cumsum(self.p_lobe)
            self.cdf[-1] = 1.0
            self.axes = sg.axes.detach().clone()
            self.lam = lam.detach().clone()

    def eval(self, dirs: torch.Tensor) -> torch.Tensor:
        return sg_eval(self.sg, dirs)

    def _vmf_norm(self) -> torch.Tensor:
        lam = self.lam
        return torch.where(
            lam > 1e-9,
            lam / (2.0 * math.pi * (1 - torch.exp(-2 * lam)).clamp(min=1e-300)),
            torch.full_like(lam, 1.0 / (4.0 * math.pi)))

    def sample(self, u: torch.Tensor):
        un = u.numpy()
        lobe = np.minimum(np.searchsorted(self.cdf, un[:, 0], side="right"),
                          len(self.cdf) - 1)
        lam = self.lam[lobe]
        u2 = torch.as_tensor(un[:, 1], dtype=DTYPE).clamp(1e-12, 1.0)
        cos_t = torch.where(
            lam > 1e-9,
            1.0 + torch.log(u2 + (1 - u2) * torch.exp(-2 * lam))
            / lam.clamp(min=1e-9),
            2.0 * u2 - 1.0)
        cos_t = torch.clamp(cos_t, -1.0, 1.0)
        sin_t = torch.sqrt(torch.clamp(1 - cos_t * cos_t, min=0.0))
        phi = 2.0 * math.pi * torch.as_tensor(un[:, 2], dtype=DTYPE)
        mu = self.axes[lobe]
        t, b = _tangent_frame(mu)
        dirs = (sin_t[:, None] * torch.cos(phi)[:, None] * t
                + sin_t[:, None] * torch.sin(phi)[:, None] * b
                + cos_t[:, None] * mu)
        return dirs, self.pdf(dirs)

    def pdf(self, dirs: torch.Tensor) -> torch.Tensor:
        cos = dirs @ self.axes.T  # (N, L)
        dens = self._vmf_norm()[None] * torch.exp(self.lam[None] * (cos - 1.0))
        return dens @ torch.as_tensor(self.p_lobe, dtype=DTYPE)


def _make_light(light):
    return _SgLight(light) if isinstance(light, SgMixture) else _EnvLight(light)


def light_eval(light, dirs: torch.Tensor) -> torch.Tensor:
    """Radiance of either light representation toward unit directions."""
    if isinstance(light, SgMixture):
        return sg_eval(light, dirs)
    return envmap_lookup(light, dirs)


# ---------------------------------------------------------------------------
# Forward path tracing
# ---------------------------------------------------------------------------

def _vertex_normals_torch(verts: torch.Tensor, tris: np.ndarray) -> torch.Tensor:
    t = torch.as_tensor(tris, dtype=torch.long)
    c0, c1, c2 = verts[t[:, 0]], verts[t[:, 1]], verts[t[:, 2]]
    cross = torch.cross(c1 - c0, c2 - c0, dim=-1)  # area-weighted
    acc = torch.zeros_like(verts)
    for k in range(3):
        acc = acc.index_add(0, t[:, k], cross)
    norm = torch.linalg.norm(acc, dim=-1, keepdim=True)
    return acc / torch.clamp(norm, min=1e-20)


def path_trace(assets: TexturedAssets, camera: Camera, cfg: RenderConfig,
               *, vertices: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pixel radiance (H, W, 3); deterministic for a fixed cfg.seed.

    Shading runs through torch, so gradients flow to texture texels, light
    parameters, and (when a vertices tensor is supplied) vertex positions
    along the sampled paths. Visibility/sampling decisions are detached.
    """
    mesh = assets.mesh
    tris = mesh.triangles
    verts_t = vertices if vertices is not None \
        else torch.as_tensor(mesh.vertices, dtype=DTYPE)
    verts_np = verts_t.detach().numpy()
    have_geo = len(tris) > 0
    bvh = Bvh(TriMesh(verts_np, tris)) if have_geo else None
    vn_t = _vertex_normals_torch(verts_t, tris) if have_geo else None
    uvs_t = torch.as_tensor(mesh.uvs, dtype=DTYPE)
    light = _make_light(assets.light)
    ta = torch.clamp(assets.albedo_tex, 0.0, 1.0 - 1e-4)
    tr = torch.clamp(assets.roughness_tex, 0.01, 1.0)
    eps = 1e-4 * (float(np.linalg.norm(verts_np.max(0) - verts_np.min(0)))
                  if have_geo else 1.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    h, w = camera.height, camera.width
    npix = h * w
    ys, xs = np.mgrid[0:h, 0:w]
    xs, ys = xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
    accum = torch.zeros(npix, 3, dtype=DTYPE)
    depth_eff = cfg.max_depth if cfg.gi_enabled else 1
    tri_t = torch.as_tensor(tris, dtype=torch.long) if have_geo else None

    def mis_weight(p_used: torch.Tensor, p_other: torch.Tensor) -> torch.Tensor:
        # power heuristic (beta = 2)
        a, b = p_used * p_used, p_other * p_other
        return a / torch.clamp(a + b, min=1e-300)

    if True:  # single batched wavefront over all spp samples
        spp = cfg.spp
        jit = torch.rand(spp * npix, 2, generator=gen, dtype=DTYPE).numpy()
        xs_all = np.tile(xs, spp) + jit[:, 0]
        ys_all = np.tile(ys, spp) + jit[:, 1]
        org, dirs = camera.rays(xs_all, ys_all)
        pix = np.tile(np.arange(npix), spp)
        strat = np.repeat(np.arange(spp), npix).astype(np.float64)
        throughput = torch.ones(spp * npix, 3, dtype=DTYPE)
        dirs_t = torch.as_tensor(dirs, dtype=DTYPE)  # live copy of dirs
        prev_pdf = None  # BRDF pdf of the ray that produced this segment
        for bounce in range(depth_eff + 1):
            if len(pix) == 0:
                break
            if have_geo:
                t_hit, tri_id, bu, bv = ray_cast_many(bvh, org, dirs)
            else:
                tri_id = np.full(len(pix), -1, dtype=np.int64)
            miss = tri_id < 0
            if miss.any():
                d_miss = dirs_t[torch.as_tensor(miss)]
                le = light.eval(d_miss)
                if bounce == 0:
                    mis = torch.ones(len(d_miss), dtype=DTYPE)
                else:
                    pl = light.pdf(d_miss)
                    pb = prev_pdf[torch.as_tensor(miss)]
                    mis = mis_weight(pb, pl)
                accum.index_add_(0, torch.as_tensor(pix[miss]),
                                 throughput[torch.as_tensor(miss)]
                                 * le * mis[:, None])
            hit_idx = np.flatnonzero(~miss)
            if bounce == depth_eff or len(hit_idx) == 0:
                break

            trih = tri_id[hit_idx]
            bary = torch.stack([
                torch.as_tensor(1.0 - bu[hit_idx] - bv[hit_idx], dtype=DTYPE),
                torch.as_tensor(bu[hit_idx], dtype=DTYPE),
                torch.as_tensor(bv[hit_idx], dtype=DTYPE)], dim=-1)
            vids = tri_t[torch.as_tensor(trih)]
            x = (verts_t[vids] * bary[..., None]).sum(dim=1)
            n_sh = (vn_t[vids] * bary[..., None]).sum(dim=1)
            n_sh = n_sh / torch.clamp(
                torch.linalg.norm(n_sh, dim=-1, keepdim=True), min=1e-20)
            d_in = dirs_t[torch.as_tensor(hit_idx)]
            facing = (n_sh * d_in).sum(-1, keepdim=True)
            n_sh = torch.where(facing > 0, -n_sh, n_sh)
            wo = -d_in
            n_dot_o = (n_sh * wo).sum(-1)
            ok = (n_dot_o > 1e-9).numpy()
            if not ok.all():
                hit_idx = hit_idx[ok]
                if len(hit_idx) == 0:
                    break
                okt = torch.as_tensor(ok)
                trih = trih[ok]
                bary, vids = bary[okt], vids[okt]
                x, n_sh, wo = x[okt], n_sh[okt], wo[okt]
            nh = len(hit_idx)
            uv = (uvs_t[vids] * bary[..., None]).sum(dim=1)
            params = BrdfParams(sample_texture(ta, uv),
                                sample_texture(tr, uv), assets.fresnel_f0)
            th = throughput[torch.as_tensor(hit_idx)]
            x_np = x.detach().numpy()
            n_np = n_sh.detach().numpy()

            # next-event estimation toward the light with MIS
            ul = torch.rand(nh, 3, generator=gen, dtype=DTYPE)
            if bounce == 0:
                # stratify the selection coordinate across the spp samples
                strat_h = torch.as_tensor(strat[hit_idx], dtype=DTYPE)
                ul[:, 0] = (strat_h + ul[:, 0]) / spp
            wl, pdf_l = light.sample(ul)
            cos_l = torch.clamp((n_sh * wl).sum(-1), min=0.0)
            wl_np = wl.numpy()
            sh_org = x_np + eps * np.sign(
                (n_np * wl_np).sum(-1, keepdims=True) + 1e-30) * n_np
            _, sh_tri, _, _ = ray_cast_many(bvh, sh_org,
                                            np.ascontiguousarray(wl_np))
            unocc = torch.as_tensor(sh_tri < 0)
            f_l = brdf_eval(params, n_sh, wl, wo)
            pb_l = brdf_pdf(params, n_sh, wl, wo)
            w_l = mis_weight(pdf_l, pb_l)
            usable = unocc & (pdf_l > 1e-12) & (cos_l > 0)
            nee = th * f_l * light.eval(wl) \
                * (cos_l * w_l / torch.clamp(pdf_l, min=1e-300))[:, None]
            nee = torch.where(usable[:, None], nee, torch.zeros_like(nee))
            accum.index_add_(0, torch.as_tensor(pix[hit_idx]), nee)

            # continuation via BRDF sampling
            ub = torch.rand(nh, 2, generator=gen, dtype=DTYPE)
            if bounce == 0:
                ub[:, 0] = (strat_h + ub[:, 0]) / spp
            # fully reparameterized: the sampled direction and its density
            # stay in the autograd graph, so gradients match common-random-
            # number finite differences of the same estimator
            wi, pdf_b = brdf_sample(params, n_sh, wo, ub)
            cos_i = torch.clamp((n_sh * wi).sum(-1), min=0.0)
            f_b = brdf_eval(params, n_sh, wi, wo)
            t_new = th * f_b * (cos_i / torch.clamp(pdf_b, min=1e-300))[:, None]
            alive = ((pdf_b > 1e-12) & (cos_i > 0)
                     & (t_new.detach().amax(dim=-1) > 1e-9)).numpy()
            if not alive.any():
                break
            at = torch.as_tensor(alive)
            wi_np = wi.detach().numpy()[alive]
            org = x_np[alive] + eps * np.sign(
                (n_np[alive] * wi_np).sum(-1, keepdims=True) + 1e-30) \
                * n_np[alive]
            dirs = np.ascontiguousarray(wi_np)
            dirs_t = wi[at]
            pix = pix[hit_idx][alive]
            strat = strat[hit_idx][alive]
            throughput = t_new[at]
            prev_pdf = pdf_b[at]
    return (accum / cfg.spp).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def roughness_tv(tex: torch.Tensor) -> torch.Tensor:
    """Total variation with in-bounds right/down neighbors only."""
    return ((tex[1:, :] - tex[:-1, :]).abs().sum()
            + (tex[:, 1:] - tex[:, :-1]).abs().sum())


def ir_loss(renders, targets, rendered_masks, target_masks,
            roughness_tex: torch.Tensor, w_mask: float = 10.0,
            w_reg: float = 0.1):
    """(L_img, L_mask, L_reg, L_IR) summed over views and pixels."""
    if len(renders) != len(targets) or len(rendered_masks) != len(target_masks):
        raise ValueError("per-view lists must have matching lengths")
    l_img = torch.zeros((), dtype=DTYPE)
    l_mask = torch.zeros((), dtype=DTYPE)
    for r, i in zip(renders, targets):
        i = torch.as_tensor(i, dtype=DTYPE)
        if r.shape != i.shape:
            raise ValueError("render/target shape mismatch")
        l_img = l_img + (r - i).abs().sum()
    for rm, sm in zip(rendered_masks, target_masks):
        rm = torch.as_tensor(rm, dtype=DTYPE)
        sm = torch.as_tensor(sm, dtype=DTYPE)
        if rm.shape != sm.shape:
            raise ValueError("mask shape mismatch")
        l_mask = l_mask + (rm - sm).abs().sum()
    l_reg = roughness_tv(roughness_tex)
    return l_img, l_mask, l_reg, l_img + w_mask * l_mask + w_reg * l_reg


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def backprop_appearance(assets: TexturedAssets, camera: Camera,
                        cfg: RenderConfig, adjoint) -> dict:
    """Gradients of sum(render * adjoint) for textures and light params.

    The forward pass is replayed with cfg.seed, so cfg must be identical
    to the one used to produce the adjoint's forward image.
    """
    adjoint = torch.as_tensor(adjoint, dtype=DTYPE)
    if adjoint.shape != (camera.height, camera.width, 3):
        raise ValueError("adjoint must match the render shape (H, W, 3)")
    ta = assets.albedo_tex.detach().clone().requires_grad_(True)
    tr = assets.roughness_tex.detach().clone().requires_grad_(True)
    if isinstance(assets.light, SgMixture):
        light = SgMixture(assets.light.axes.detach().clone(),
                          assets.light.lambdas.detach().clone(),
                          assets.light.amplitudes.detach().clone())
        light_params = light.parameters()
    else:
        vals = assets.light.values.detach().clone().requires_grad_(True)
        light = EnvMap(vals)
        light_params = [vals]
    for p in light_params:
        p.requires_grad_(True)
    replay = TexturedAssets(assets.mesh, ta, tr, light, assets.fresnel_f0)
    img = path_trace(replay, camera, cfg)
    (img * adjoint).sum().backward()

    def g(p):
        return p.grad if p.grad is not None else torch.zeros_like(p)
    out = {"albedo_tex": g(ta), "roughness_tex": g(tr)}
    if isinstance(light, SgMixture):
        out["sg_axes"], out["sg_lambdas"], out["sg_amplitudes"] = \
            (g(p) for p in light_params)
    else:
        out["envmap"] = g(light_params[0])
    return out


def silhouette_vertex_grad(mesh: TriMesh, camera: Camera, mask_adjoint,
                           vertices: np.ndarray | None = None,
                           supersample: int = 4) -> np.ndarray:
    """Screen-space silhouette term of the mask loss.

    For partially covered pixels, moving the occluding surface by a screen
    displacement shifts the coverage field, so d(coverage)/d(shift) is the
    negative image gradient; the shift maps to vertex motion through the
    projection Jacobian at the hit point.
    """
    verts = mesh.vertices if vertices is None else np.asarray(vertices)
    work = TriMesh(verts, mesh.triangles)
    grad = np.zeros_like(verts)
    if len(mesh.triangles) == 0:
        return grad
    cov = render_mask(work, camera, supersample)
    adj = np.asarray(mask_adjoint, dtype=np.float64)
    gy, gx = np.gradient(cov)
    boundary = (cov > 0.0) & (cov < 1.0) & (adj != 0.0)
    by, bx = np.nonzero(boundary)
    if len(by) == 0:
        return grad
    bvh = Bvh(work)
    o, d = camera.rays(bx + 0.5, by + 0.5)
    t_hit, tri_id, bu, bv = ray_cast_many(bvh, o, d)
    hit = tri_id >= 0
    if not hit.any():
        return grad
    x = o[hit] + t_hit[hit, None] * d[hit]
    w2c = np.linalg.inv(camera.cam_to_world)
    xc = x @ w2c[:3, :3].T + w2c[:3, 3]
    z = np.maximum(xc[:, 2], 1e-12)
    # screen-force per pixel: adjoint times -grad(coverage), in pixel units
    q = np.stack([-gx[by, bx][hit] * adj[by, bx][hit],
                  -gy[by, bx][hit] * adj[by, bx][hit]], axis=-1)
    jx = np.stack([camera.fx / z, np.zeros_like(z),
                   -camera.fx * xc[:, 0] / z ** 2], axis=-1)
    jy = np.stack([np.zeros_like(z), camera.fy / z,
                   -camera.fy * xc[:, 1] / z ** 2], axis=-1)
    force_cam = q[:, 0:1] * jx + q[:, 1:2] * jy
    force = force_cam @ w2c[:3, :3]
    bw = np.stack([1 - bu[hit] - bv[hit], bu[hit], bv[hit]], axis=-1)
    tri = mesh.triangles[tri_id[hit]]
    for k in range(3):
        np.add.at(grad, tri[:, k], bw[:, k:k + 1] * force)
    return grad


def backprop_vertices(assets: TexturedAssets, camera: Camera,
                      cfg: RenderConfig, adjoint,
                      mask_adjoint=None, supersample: int = 4) -> torch.Tensor:
    """Per-vertex position gradients: interior shading term via the replayed
    differentiable forward pass, plus the screen-space silhouette term of
    the mask loss when mask_adjoint is given."""
    adjoint = torch.as_tensor(adjoint, dtype=DTYPE)
    if adjoint.shape != (camera.height, camera.width, 3):
        raise ValueError("adjoint must match the render shape (H, W, 3)")
    verts = torch.as_tensor(assets.mesh.vertices,
                            dtype=DTYPE).clone().requires_grad_(True)
    img = path_trace(assets, camera, cfg, vertices=verts)
    (img * adjoint).sum().backward()
    grad = verts.grad if verts.grad is not None else torch.zeros_like(verts)
    grad = grad.clone()
    if mask_adjoint is not None:
        sil = silhouette_vertex_grad(assets.mesh, camera, mask_adjoint,
                                     supersample=supersample)
        grad = grad + torch.as_tensor(sil, dtype=DTYPE)
    return grad


# ---------------------------------------------------------------------------
# Three-step refinement
# ---------------------------------------------------------------------------

def _clamped_assets(mesh, ta, tr, light, f0):
    return TexturedAssets(mesh, torch.clamp(ta, 0.0, 1.0 - 1e-4),
                          torch.clamp(tr, 0.01, 1.0), light, f0)


def run_pbir(initial: TexturedAssets, dataset, schedule: Stage3Schedule,
             out_dir=None, log=None) -> TexturedAssets:
    """Execute the three refinement steps; deterministic for a fixed seed.

    Step 1: textures + SG lobes (Adam). The SG light is then pixelized to a
    lat-long environment map. Step 2: textures + envmap texels (envmap under
    the uniform-Laplacian optimizer, lambda=1). Step 3: everything plus
    per-vertex positions (uniform-Laplacian, lambda=100).
    """
    views = dataset.views
    targets = [np.asarray(v.image, dtype=np.float64) for v in views]
    tmasks = [np.asarray(v.mask, dtype=np.float64) if v.mask is not None
              else np.ones(targets[i].shape[:2]) for i, v in enumerate(views)]
    mesh = initial.mesh
    f0 = initial.fresnel_f0
    ta = initial.albedo_tex.detach().clone().requires_grad_(True)
    tr = initial.roughness_tex.detach().clone().requires_grad_(True)
    history = []
    it_global = [0]

    def render_cfg(view_j):
        seed = view_seed(schedule.seed, view_j)
        if schedule.resample_noise:
            seed += 7919 * (it_global[0] + 1)
        return RenderConfig(spp=schedule.spp, max_depth=schedule.max_depth,
                            gi_enabled=schedule.gi_enabled, seed=seed)

    def objective(light, verts_t=None, static_masks=None):
        renders = []
        rmasks = []
        cur_mesh = mesh if verts_t is None else TriMesh(
            verts_t.detach().numpy(), mesh.triangles, uvs=mesh.uvs)
        assets = _clamped_assets(cur_mesh, ta, tr, light, f0)
        for j, view in enumerate(views):
            renders.append(path_trace(assets, view.camera, render_cfg(j),
                                      vertices=verts_t))
            if static_masks is not None:
                rmasks.append(static_masks[j])
            else:
                rmasks.append(render_mask(cur_mesh, view.camera))
        l_img, l_mask, l_reg, l_ir = ir_loss(
            renders, targets, rmasks, tmasks, torch.clamp(tr, 0.01, 1.0),
            schedule.w_mask, schedule.w_reg)
        return l_img, l_mask, l_reg, l_ir, rmasks

    def record(step_name, l_ir):
        history.append((step_name, it_global[0], float(l_ir.detach())))
        if log is not None:
            log(step_name, it_global[0], history[-1][2])
        it_global[0] += 1

    # fixed geometry: rendered masks are constant through steps 1 and 2
    fixed_masks = [render_mask(mesh, v.camera) for v in views]

    # ---- step 1: textures + SG ----
    sg = SgMixture(initial.light.axes.detach().clone(),
                   initial.light.lambdas.detach().clone(),
                   initial.light.amplitudes.detach().clone()) \
        if isinstance(initial.light, SgMixture) else None
    if sg is not None:
        for p in sg.parameters():
            p.requires_grad_(True)
        opt = Adam([
            {"params": [ta], "lr": schedule.lr_albedo},
            {"params": [tr], "lr": schedule.lr_roughness},
            {"params": sg.parameters(), "lr": schedule.lr_sg},
        ], betas=(0.9, 0.999), eps=1e-8)
        for _ in range(schedule.step1_iters):
            _, _, _, l_ir, _ = objective(sg.constrained(),
                                         static_masks=fixed_masks)
            opt.zero_grad()
            l_ir.backward()
            opt.step()
            record("step1", l_ir)
        with torch.no_grad():
            env = envmap_from_sg(sg.constrained(), schedule.env_width,
                                 schedule.env_height)
        env_vals = env.values.detach().clone()
    else:
        env_vals = initial.light.values.detach().clone()
    _checkpoint(out_dir, "step1", mesh, ta, tr, env_vals)

    # ---- step 2: textures + pixelized envmap ----
    env_param = env_vals.reshape(-1, 3).clone().requires_grad_(True)
    lap_env = image_grid_laplacian(schedule.env_width, schedule.env_height,
                                   wrap_x=True)
    opt_tex = Adam([
        {"params": [ta], "lr": schedule.lr_albedo},
        {"params": [tr], "lr": schedule.lr_roughness},
    ], betas=(0.9, 0.999), eps=1e-8)
    opt_env = UniformLaplacian(env_param, lap_env, schedule.lam_env,
                               schedule.lr_env)
    for _ in range(schedule.step2_iters):
        env = EnvMap(torch.clamp(env_param, min=0.0).reshape(
            schedule.env_height, schedule.env_width, 3))
        _, _, _, l_ir, _ = objective(env, static_masks=fixed_masks)
        opt_tex.zero_grad()
        opt_env.zero_grad()
        l_ir.backward()
        opt_tex.step()
        opt_env.step()
        record("step2", l_ir)
    _checkpoint(out_dir, "step2", mesh, ta, tr, env_param.detach())

    # ---- step 3: everything + vertices ----
    verts = torch.as_tensor(mesh.vertices, dtype=DTYPE).clone() \
        .requires_grad_(True)
    lap_v = laplacian_from_edges(len(mesh.vertices),
                                 mesh_edges(mesh.triangles))
    opt_tex = Adam([
        {"params": [ta], "lr": schedule.lr_albedo},
        {"params": [tr], "lr": schedule.lr_roughness},
    ], betas=(0.9, 0.999), eps=1e-8)
    opt_env = UniformLaplacian(env_param, lap_env, schedule.lam_env,
                               schedule.lr_env)
    opt_v = UniformLaplacian(verts, lap_v, schedule.lam_vertices,
                             schedule.lr_vertices)
    for _ in range(schedule.step3_iters):
        env = EnvMap(torch.clamp(env_param, min=0.0).reshape(
            schedule.env_height, schedule.env_width, 3))
        _, _, _, l_ir, rmasks = objective(env, verts_t=verts)
        opt_tex.zero_grad()
        opt_env.zero_grad()
        opt_v.zero_grad()
        l_ir.backward()
        # the mask term is piecewise constant in the MC render; add its
        # screen-space silhouette gradient explicitly
        cur_mesh = TriMesh(verts.detach().numpy(), mesh.triangles,
                           uvs=mesh.uvs)
        sil = np.zeros_like(mesh.vertices)
        for j, view in enumerate(views):
            madj = schedule.w_mask * np.sign(np.asarray(rmasks[j]) - tmasks[j])
            sil += silhouette_vertex_grad(cur_mesh, view.camera, madj)
        vgrad = (verts.grad if verts.grad is not None
                 else torch.zeros_like(verts)) \
            + torch.as_tensor(sil, dtype=DTYPE)
        opt_tex.step()
        opt_env.step()
        opt_v.step(vgrad)
        record("step3", l_ir)

    final_mesh = TriMesh(verts.detach().numpy(), mesh.triangles,
                         uvs=mesh.uvs, weld_map=mesh.weld_map)
    env_final = EnvMap(torch.clamp(env_param.detach(), min=0.0).reshape(
        schedule.env_height, schedule.env_width, 3))
    result = TexturedAssets(final_mesh,
                            torch.clamp(ta.detach(), 0.0, 1.0 - 1e-4),
                            torch.clamp(tr.detach(), 0.01, 1.0),
                            env_final, f0)
    _checkpoint(out_dir, "step3", final_mesh, ta, tr, env_param.detach())
    if out_dir is not None:
        with open(os.path.join(out_dir, "pbir_loss.csv"), "w", newline="") as f:
            wcsv = csv.writer(f)
            wcsv.writerow(["step", "iteration", "L_IR"])
            wcsv.writerows(history)
    result.history = history
    return result


def _checkpoint(out_dir, tag, mesh, ta, tr, env_vals):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    save_mesh_binary(mesh, os.path.join(out_dir, f"{tag}_mesh.npbm"))
    np.savez(os.path.join(out_dir, f"{tag}_assets.npz"),
             albedo_tex=torch.clamp(ta.detach(), 0.0, 1.0 - 1e-4).numpy(),
             roughness_tex=torch.clamp(tr.detach(), 0.01, 1.0).numpy(),
             envmap=np.asarray(env_vals).reshape(-1, 3))
