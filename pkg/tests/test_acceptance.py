"""Release acceptance suite: eight numbered criteria, one test each.

Every test is self-contained, uses pinned seeds and tolerances, and asserts
its own wall-clock budget. pytest -v yields one pass/fail line per criterion.
"""
import json
import math
import time

import numpy as np
import torch
from dataclasses import replace
from click.testing import CliRunner
from scipy.spatial import cKDTree

from npbir.cli import main
from npbir.distill import (DirectionSet, Stage2Config, TransportTables,
                           coarse_render, init_materials, train_distill)
from npbir.geometry import (TriMesh, chamfer, marching_cubes, sample_surface,
                            uv_atlas_and_bake, vertex_normals_area_weighted)
from npbir.grids import Aabb, VoxelGrid
from npbir.io_metrics import (PosedDataset, View, albedo_alignment, psnr,
                              ssim)
from npbir.pbir import (RenderConfig, Stage3Schedule, TexturedAssets,
                        backprop_appearance, envmap_from_sg, ir_loss,
                        path_trace, roughness_tv, run_pbir, view_seed)
from npbir.shading import (BrdfParams, EnvMap, SgMixture, brdf_eval, sg_eval)
from npbir.volume import (Camera, HuberState, SdfScene, Stage1Config,
                          alpha_from_sdf, composite, laplacian_loss,
                          photo_loss, pp_rgb_loss, render_mask, render_rays,
                          train_surface)

from test_pbir import const_env_sg, make_cam, sphere_assets

F64 = torch.float64
BB = Aabb(np.full(3, -1.5), np.full(3, 1.5))


def _finish(n, t0, budget):
    elapsed = time.perf_counter() - t0
    assert elapsed < budget, f"criterion {n}: {elapsed:.0f}s over {budget}s"
    print(f"criterion {n}: PASS ({elapsed:.0f}s)")


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ---------------------------------------------------------------------------
# Criterion 1: equation oracles against independent scalar evaluations
# ---------------------------------------------------------------------------

def test_criterion_1_equation_oracles():
    t0 = time.perf_counter()
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))

    # opacity from consecutive signed distances
    for s_i, s_n, k in [(0.3, 0.1, 7.0), (0.05, -0.02, 30.0), (0.1, 0.4, 7.0)]:
        want = max((sig(k * s_i) - sig(k * s_n)) / sig(k * s_i), 0.0)
        got = float(alpha_from_sdf(torch.tensor(s_i, dtype=F64),
                                   torch.tensor(s_n, dtype=F64), k))
        assert rel(got, want) < 1e-12 if want > 0 else got == 0.0

    # front-to-back compositing
    rng = np.random.default_rng(0)
    alphas = [0.2, 0.5, 0.3]
    rads = rng.uniform(0, 1, (3, 3))
    color, weights = composite(torch.tensor(alphas, dtype=F64),
                               torch.tensor(rads, dtype=F64))
    t = 1.0
    for i, a in enumerate(alphas):
        w = t * a
        assert rel(float(weights[i]), w) < 1e-12
        t *= 1.0 - a
    want_c = [sum(alphas[i] * math.prod(1 - alphas[k] for k in range(i))
                  * rads[i][c] for i in range(3)) for c in range(3)]
    for c in range(3):
        assert rel(float(color[c]), want_c[c]) < 1e-12

    # adaptive Huber photometric loss
    h = HuberState(t=0.1)
    pred = torch.tensor([[0.3, 0.5, 0.9]], dtype=F64)
    targ = torch.tensor([[0.32, 0.2, 0.9]], dtype=F64)
    def huber1(e):
        return e * e if abs(e) <= 0.1 else 2 * 0.1 * abs(e) - 0.01
    want = huber1(0.02) + huber1(-0.3) + huber1(0.0)
    assert rel(float(photo_loss(pred, targ, h)[0]), want) < 1e-12

    # 6-neighbor grid Laplacian regularizer
    vals = rng.uniform(-1, 1, (4, 4, 4))
    grid = VoxelGrid((4, 4, 4), Aabb(np.zeros(3), np.ones(3)),
                     torch.tensor(vals[..., None], dtype=F64))
    want = 0.0
    for i in range(1, 3):
        for j in range(1, 3):
            for k in range(1, 3):
                m = (vals[i - 1, j, k] + vals[i + 1, j, k]
                     + vals[i, j - 1, k] + vals[i, j + 1, k]
                     + vals[i, j, k - 1] + vals[i, j, k + 1]) / 6.0
                want += (vals[i, j, k] - m) ** 2
    assert rel(float(laplacian_loss(grid)), want) < 1e-12

    # per-point RGB loss
    w = rng.uniform(0, 1, 4)
    r = rng.uniform(0, 1, (4, 3))
    tg = rng.uniform(0, 1, 3)
    want = sum(w[i] * sum(abs(r[i][c] - tg[c]) for c in range(3))
               for i in range(4))
    got = float(pp_rgb_loss(torch.tensor(w, dtype=F64),
                            torch.tensor(r, dtype=F64),
                            torch.tensor(tg, dtype=F64)))
    assert rel(got, want) < 1e-12

    # spherical-Gaussian lobe mixture
    axes = rng.normal(size=(3, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    lam = rng.uniform(1, 10, 3)
    amp = rng.uniform(0, 1, (3, 3))
    sg = SgMixture(torch.tensor(axes, dtype=F64), torch.tensor(lam, dtype=F64),
                   torch.tensor(amp, dtype=F64))
    wdir = rng.normal(size=3)
    wdir /= np.linalg.norm(wdir)
    got = sg_eval(sg, torch.tensor(wdir, dtype=F64))
    for c in range(3):
        want = sum(amp[l][c] * math.exp(lam[l] * (float(axes[l] @ wdir) - 1.0))
                   for l in range(3))
        assert rel(float(got[c]), want) < 1e-12

    # total variation of a roughness texture
    tex = rng.uniform(0, 1, (3, 3))
    want = sum(abs(tex[i + 1, j] - tex[i, j])
               for i in range(2) for j in range(3)) \
        + sum(abs(tex[i, j + 1] - tex[i, j])
              for i in range(3) for j in range(2))
    assert rel(float(roughness_tv(torch.tensor(tex, dtype=F64))), want) < 1e-12

    # refinement loss assembly
    rnd = rng.uniform(0, 1, (2, 2, 3))
    tgt = rng.uniform(0, 1, (2, 2, 3))
    rm = rng.uniform(0, 1, (2, 2))
    tm = rng.uniform(0, 1, (2, 2))
    rtex = rng.uniform(0, 1, (2, 2))
    l_img, l_mask, l_reg, total = ir_loss(
        [torch.tensor(rnd, dtype=F64)], [tgt],
        [torch.tensor(rm, dtype=F64)], [tm],
        torch.tensor(rtex, dtype=F64), w_mask=10.0, w_reg=0.1)
    want_img = float(np.abs(rnd - tgt).sum())
    want_mask = float(np.abs(rm - tm).sum())
    want_reg = (abs(rtex[1, 0] - rtex[0, 0]) + abs(rtex[1, 1] - rtex[0, 1])
                + abs(rtex[0, 1] - rtex[0, 0]) + abs(rtex[1, 1] - rtex[1, 0]))
    assert rel(float(l_img), want_img) < 1e-12
    assert rel(float(l_mask), want_mask) < 1e-12
    assert rel(float(l_reg), want_reg) < 1e-12
    assert rel(float(total), want_img + 10 * want_mask + 0.1 * want_reg) < 1e-12
    _finish(1, t0, 1.0)


# ---------------------------------------------------------------------------
# Criterion 2: finite-difference gradient suite
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)

    # -- analytic path A: SDF gridpoints and radiance-head weights ----------
    scene = SdfScene.create(Aabb(np.full(3, -1.0), np.full(3, 1.0)),
                            fg_res=8, bg_res=6, bg_scale=4.0, feat_width=4,
                            hidden=8, sharpness=10.0, seed=0)
    cam = make_cam([2.2, 0.4, 0.3], res=4)
    origins, dirs = cam.all_rays()
    adj = torch.rand(16, 3, dtype=F64, generator=gen)
    params = [scene.fg_sdf.values, scene.head.w1, scene.head.w2]
    for p in params:
        p.requires_grad_(True)

    def s1_loss():
        colors, _, _, _ = render_rays(scene, origins, dirs)
        return (colors * adj).sum()

    loss = s1_loss()
    grads = torch.autograd.grad(loss, params)
    h = 1e-5
    for p, g, label in zip(params, grads, ("sdf", "w1", "w2")):
        flat = g.reshape(-1)
        idx = int(flat.abs().argmax())
        with torch.no_grad():
            p.reshape(-1)[idx] += h
            up = float(s1_loss())
            p.reshape(-1)[idx] -= 2 * h
            dn = float(s1_loss())
            p.reshape(-1)[idx] += h
        fd = (up - dn) / (2 * h)
        an = float(flat[idx])
        assert abs(fd - an) < 1e-3 * max(abs(fd), 1.0), \
            f"{label}: fd {fd} vs analytic {an}"

    # -- analytic path B: per-vertex materials and SG parameters ------------
    g = VoxelGrid.from_function((8,) * 3, BB,
                                lambda p: torch.linalg.norm(p, dim=-1) - 1.0)
    mesh = marching_cubes(g)
    mesh = replace(mesh, normals=vertex_normals_area_weighted(mesh))
    v = len(mesh.vertices)
    ds = DirectionSet.stratified(64)
    tables = TransportTables(torch.ones(v, 64, dtype=F64),
                             torch.zeros(v, 64, 3, dtype=F64))
    normals = torch.as_tensor(mesh.normals, dtype=F64)
    albedo = torch.full((v, 3), 0.6, dtype=F64, requires_grad=True)
    rough = torch.full((v,), 0.4, dtype=F64, requires_grad=True)
    sg = SgMixture.init_fibonacci(4, 5.0, 0.4)
    for p in sg.parameters():
        p.requires_grad_(True)
    adj2 = torch.rand(v, 3, dtype=F64, generator=gen)

    def s2_loss():
        out = coarse_render(normals, albedo, rough, 0.02, tables, sg,
                            normals, ds)
        return (out * adj2).sum()

    params2 = [albedo, rough, sg.lambdas, sg.amplitudes]
    grads2 = torch.autograd.grad(s2_loss(), params2)
    for p, gr, label in zip(params2, grads2,
                            ("albedo", "roughness", "sg_lambda", "sg_amp")):
        flat = gr.reshape(-1)
        idx = int(flat.abs().argmax())
        with torch.no_grad():
            p.reshape(-1)[idx] += h
            up = float(s2_loss())
            p.reshape(-1)[idx] -= 2 * h
            dn = float(s2_loss())
            p.reshape(-1)[idx] += h
        fd = (up - dn) / (2 * h)
        an = float(flat[idx])
        assert abs(fd - an) < 1e-3 * max(abs(fd), 1.0), \
            f"{label}: fd {fd} vs analytic {an}"

    # -- Monte Carlo paths: texture and envmap texels, common random numbers
    assets = sphere_assets(res=64, n=8)
    cam = make_cam([2.6, 0.3, 0.6], res=6)
    cfg = RenderConfig(spp=1024, max_depth=2, seed=0)
    adj3 = torch.rand(6, 6, 3, dtype=F64, generator=gen)
    mc = backprop_appearance(assets, cam, cfg, adj3)

    def scalar(a):
        return float((path_trace(a, cam, cfg) * adj3).sum())

    hh = 1e-4
    gmax = mc["albedo_tex"].abs().amax(dim=-1)
    x, y = np.unravel_index(int(gmax.argmax()), gmax.shape)
    up = assets.albedo_tex.clone()
    up[x, y, 0] += hh
    dn = assets.albedo_tex.clone()
    dn[x, y, 0] -= hh
    mk = lambda ta, tr, lt: TexturedAssets(assets.mesh, ta, tr, lt,
                                           assets.fresnel_f0)
    fd = (scalar(mk(up, assets.roughness_tex, assets.light))
          - scalar(mk(dn, assets.roughness_tex, assets.light))) / (2 * hh)
    an = float(mc["albedo_tex"][x, y, 0])
    assert abs(fd - an) < 1e-2 * max(abs(fd), 1.0)

    gr = mc["roughness_tex"].abs()
    x, y = np.unravel_index(int(gr.argmax()), gr.shape)
    up = assets.roughness_tex.clone()
    up[x, y] += hh
    dn = assets.roughness_tex.clone()
    dn[x, y] -= hh
    fd = (scalar(mk(assets.albedo_tex, up, assets.light))
          - scalar(mk(assets.albedo_tex, dn, assets.light))) / (2 * hh)
    an = float(mc["roughness_tex"][x, y])
    assert abs(fd - an) < 1e-2 * max(abs(fd), 1.0)

    # envmap texels: the light-sampling CDF is built from the channel-mean
    # luminance, so a luminance-preserving (+h R, -h G) perturbation keeps
    # the sampling decisions bitwise identical (pure common random numbers)
    env = EnvMap(torch.full((8, 16, 3), 0.6, dtype=F64))
    a_env = mk(assets.albedo_tex, assets.roughness_tex, env)
    mc_e = backprop_appearance(a_env, cam, cfg, adj3)
    gm = mc_e["envmap"].abs().amax(dim=-1)
    i, j = np.unravel_index(int(gm.argmax()), gm.shape)
    up = env.values.clone()
    up[i, j, 0] += hh
    up[i, j, 1] -= hh
    dn = env.values.clone()
    dn[i, j, 0] -= hh
    dn[i, j, 1] += hh
    fd = (scalar(mk(assets.albedo_tex, assets.roughness_tex, EnvMap(up)))
          - scalar(mk(assets.albedo_tex, assets.roughness_tex,
                      EnvMap(dn)))) / (2 * hh)
    an = float(mc_e["envmap"][i, j, 0] - mc_e["envmap"][i, j, 1])
    assert abs(fd - an) < 1e-2 * max(abs(fd), 1.0)

    # SG amplitude through the tracer: a single lobe keeps the sampling
    # distribution independent of the amplitude under test
    light = SgMixture(torch.tensor([[0.0, -0.6, 0.8]], dtype=F64),
                      torch.tensor([2.0], dtype=F64),
                      torch.tensor([[0.5, 0.4, 0.3]], dtype=F64))
    a_sg = mk(assets.albedo_tex, assets.roughness_tex, light)
    mc_s = backprop_appearance(a_sg, cam, cfg, adj3)
    up = light.amplitudes.clone()
    up[0, 0] += hh
    dn = light.amplitudes.clone()
    dn[0, 0] -= hh
    fd = (scalar(mk(assets.albedo_tex, assets.roughness_tex,
                    SgMixture(light.axes, light.lambdas, up)))
          - scalar(mk(assets.albedo_tex, assets.roughness_tex,
                      SgMixture(light.axes, light.lambdas, dn)))) / (2 * hh)
    an = float(mc_s["sg_amplitudes"][0, 0])
    assert abs(fd - an) < 1e-2 * max(abs(fd), 1.0)
    _finish(2, t0, 120.0)


# ---------------------------------------------------------------------------
# Criterion 3: furnace identities
# ---------------------------------------------------------------------------

def test_criterion_3_furnace_identities():
    t0 = time.perf_counter()
    # coarse diffuse furnace: unit white env, f0 = 0 -> color == albedo
    g = VoxelGrid.from_function((8,) * 3, BB,
                                lambda p: torch.linalg.norm(p, dim=-1) - 1.0)
    mesh = marching_cubes(g)
    mesh = replace(mesh, normals=vertex_normals_area_weighted(mesh))
    v = len(mesh.vertices)
    ds = DirectionSet.stratified(256)
    tables = TransportTables(torch.ones(v, 256, dtype=F64),
                             torch.zeros(v, 256, 3, dtype=F64))
    white = const_env_sg(1.0)
    normals = torch.as_tensor(mesh.normals, dtype=F64)
    out = coarse_render(normals, torch.full((v, 3), 0.6, dtype=F64),
                        torch.full((v,), 0.4, dtype=F64), 0.0, tables,
                        white, normals.clone(), ds)
    assert float((out - 0.6).abs().max()) < 0.03 * 0.6

    # path-traced white furnace: the identity holds in expectation, so the
    # mean over pixels (and the mean magnitude) must sit within 3%
    assets = sphere_assets(albedo=(1.0 - 1e-4,) * 3, f0=0.0,
                           light=const_env_sg(1.0), res=128, n=8)
    cam = make_cam([0.0, -3.2, 0.0], res=16)
    img = path_trace(assets, cam, RenderConfig(spp=256, max_depth=8, seed=0))
    err = img - 1.0
    assert abs(float(err.mean())) < 0.03
    assert float(err.abs().mean()) < 0.03
    _finish(3, t0, 60.0)


# ---------------------------------------------------------------------------
# Criterion 4: surface-stage closed loop on an analytic sphere
# ---------------------------------------------------------------------------

def _sphere_views(n_views=16, res=64, radius=0.7):
    views = []
    light = np.array([0.5, 0.5, 0.7])
    light /= np.linalg.norm(light)
    for i in range(n_views):
        phi = 2 * np.pi * i / n_views
        z = 1.2 * np.sin(2 * phi + 0.5)
        eye = np.array([2.5 * np.cos(phi), 2.5 * np.sin(phi), z])
        cam = make_cam(eye, res=res, fov=40.0)
        o, d = cam.all_rays()
        b = (o * d).sum(-1)
        c = (o * o).sum(-1) - radius ** 2
        disc = b * b - c
        hit = disc > 0
        t = -b - np.sqrt(np.maximum(disc, 0))
        hit &= t > 0
        nrm = (o + t[:, None] * d) / radius
        lam = np.clip(nrm @ light, 0.1, None)
        col = np.stack([0.9 * lam, 0.6 * lam, 0.3 * lam], -1)
        img = np.where(hit[:, None], col, [0.05, 0.07, 0.1])
        views.append(View(cam, img.reshape(res, res, 3),
                          hit.astype(float).reshape(res, res)))
    return PosedDataset(views)


def _stage1_cfg(w_lap):
    return Stage1Config(iterations=1500, fg_res_init=25, fg_res_final=48,
                        bg_res_init=13, bg_res_final=24, upscale_every=150,
                        upscale_until=300, batch_rays=1024, hidden_width=32,
                        w_lap=w_lap, sharpness_step=0.18, lr_decay_step=1000,
                        weight_threshold=1e-4, seed=0)


def test_criterion_4_surface_closed_loop():
    t0 = time.perf_counter()
    dataset = _sphere_views()
    rng = np.random.default_rng(0)
    u = rng.normal(size=(20000, 3))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    gt_points = 0.7 * u

    def run(w_lap):
        scene = train_surface(dataset, _stage1_cfg(w_lap))
        mesh = marching_cubes(scene.fg_sdf)
        return chamfer(sample_surface(mesh, 20000, seed=0), gt_points)

    cd = run(w_lap=1e-3)
    two_voxels = 2 * 2.0 / 47  # fg box spans 2 units over a 48-point grid
    assert cd < two_voxels, f"chamfer {cd:.4f} >= {two_voxels:.4f}"
    cd_ablated = run(w_lap=0.0)
    assert cd_ablated > cd, \
        f"removing the Laplacian term should hurt: {cd_ablated:.4f} vs {cd:.4f}"
    _finish(4, t0, 600.0)


# ---------------------------------------------------------------------------
# Criterion 5: distillation closed loop from a known-material teacher
# ---------------------------------------------------------------------------

def test_criterion_5_distill_closed_loop():
    t0 = time.perf_counter()
    g = VoxelGrid.from_function((10,) * 3, BB,
                                lambda p: torch.linalg.norm(p, dim=-1) - 1.0)
    mesh = marching_cubes(g)
    mesh = replace(mesh, normals=vertex_normals_area_weighted(mesh))
    v = len(mesh.vertices)
    verts = torch.as_tensor(mesh.vertices, dtype=F64)
    normals = torch.as_tensor(mesh.normals, dtype=F64)
    alb_gt = torch.stack([0.35 + 0.25 * verts[:, 0],
                          torch.full((v,), 0.55, dtype=F64),
                          0.75 - 0.25 * verts[:, 2]], dim=-1).clamp(0.05, 0.95)
    rough_gt = 0.3
    f0 = 0.02
    sg0 = SgMixture.init_fibonacci(8, 6.0, 0.5)
    tint = torch.tensor([1.3, 1.0, 0.7], dtype=F64)
    sg_gt = SgMixture(sg0.axes, sg0.lambdas, sg0.amplitudes * tint[None, :])

    nd = 64
    dirs = DirectionSet.stratified(nd)
    tables = TransportTables(torch.ones(v, nd, dtype=F64),
                             torch.zeros(v, nd, 3, dtype=F64))
    tree = cKDTree(mesh.vertices)
    li_gt = sg_eval(sg_gt, dirs.dirs)
    z = nd / (4.0 * np.pi)

    def teacher(x, view):
        x = torch.as_tensor(x, dtype=F64)
        view = torch.as_tensor(view, dtype=F64)
        _, idx = tree.query(x.numpy())
        n = normals[idx]
        a = alb_gt[idx]
        wo = -view
        m = x.shape[0]
        p = BrdfParams(a[:, None, :].expand(m, nd, 3),
                       torch.full((m, nd), rough_gt, dtype=F64), f0)
        f = brdf_eval(p, n[:, None, :], dirs.dirs[None].expand(m, nd, 3),
                      wo[:, None, :].expand(m, nd, 3))
        cos = torch.clamp((n[:, None, :] * dirs.dirs[None]).sum(-1), min=0.0)
        out = (li_gt[None] * f * cos[..., None]).sum(1) / z
        above = (n * wo).sum(-1) > 0
        return torch.where(above[:, None], out, torch.zeros_like(out))

    # initialization contract: roughness pinned, albedo = per-channel
    # median of the field over above-horizon directions
    const = torch.tensor([0.3, 0.5, 0.7], dtype=F64)
    a0c, r0c = init_materials(
        mesh, lambda x, d: const.expand(*x.shape[:-1], 3).clone(), dirs)
    assert float((r0c - 0.25).abs().max()) == 0.0
    assert float((a0c - const).abs().max()) < 1e-12

    cfg = Stage2Config(iterations=400, n_dirs=nd, n_sg_lobes=8,
                       sg_init_sharpness=6.0, fresnel_f0=f0,
                       bg_width=16, bg_height=8, seed=0)
    bg_env = envmap_from_sg(sg_gt, 16, 8)
    cov = np.ones((8, 16), dtype=bool)
    out, _, _ = train_distill(mesh, tables, teacher, dirs, bg_env, cov, cfg)
    mae = float((torch.as_tensor(out.albedo) - alb_gt).abs().mean())
    assert mae < 0.05, f"recovered albedo MAE {mae:.4f}"
    _finish(5, t0, 300.0)


# ---------------------------------------------------------------------------
# Criterion 6: refinement closed loops
# ---------------------------------------------------------------------------

def _baked_sphere(n=10, res=96):
    g = VoxelGrid.from_function(
        (n,) * 3, Aabb(np.full(3, -1.4), np.full(3, 1.4)),
        lambda p: torch.linalg.norm(p, dim=-1) - 1.0)
    mesh = marching_cubes(g)
    v = mesh.vertices
    alb = np.stack([0.2 + 0.6 * (v[:, 0] + 1.4) / 2.8,
                    np.full(len(v), 0.5),
                    0.8 - 0.6 * (v[:, 2] + 1.4) / 2.8], axis=-1).clip(0, 0.999)
    mesh = replace(mesh, albedo=alb, roughness=np.full(len(v), 0.4),
                   normals=vertex_normals_area_weighted(mesh))
    return uv_atlas_and_bake(mesh, res)


def _render_dataset(assets, cams, spp, depth, seed):
    views = []
    for j, cam in enumerate(cams):
        img = path_trace(assets, cam, RenderConfig(
            spp=spp, max_depth=depth, seed=view_seed(seed, j))).numpy()
        views.append(View(cam, img,
                          render_mask(assets.mesh, cam, supersample=4)))
    return PosedDataset(views)


def test_criterion_6_refinement_closed_loops():
    t0 = time.perf_counter()
    mesh, ta_np, tr_np, cov = _baked_sphere()
    ta_gt = torch.as_tensor(ta_np)
    tr_gt = torch.as_tensor(tr_np)
    covt = torch.as_tensor(cov)
    sg = SgMixture.init_fibonacci(16, 8.0, 0.4)
    gt = TexturedAssets(mesh, ta_gt, tr_gt, sg, fresnel_f0=0.02)
    eyes = [(3, 0, 0), (0, 0, 3), (-3, 0.5, 0), (0, 1.5, -3),
            (0, -3, 0.5), (2, 2, 2)]
    cams = [make_cam(e, res=32) for e in eyes]
    seed = 5

    # (a) perturbed-albedo recovery: >= 5x MAE reduction in step 1
    ds_a = _render_dataset(gt, cams, spp=8, depth=2, seed=seed)
    rng = np.random.default_rng(0)
    ta0 = torch.clamp(
        ta_gt + torch.as_tensor(rng.uniform(-0.1, 0.1, ta_gt.shape)),
        0, 0.999)
    init = TexturedAssets(mesh, ta0.clone(), tr_gt.clone(),
                          SgMixture.init_fibonacci(16, 8.0, 0.4), 0.02)
    sched = Stage3Schedule(step1_iters=600, step2_iters=0, step3_iters=0,
                           spp=8, max_depth=2, seed=seed,
                           resample_noise=False)
    out = run_pbir(init, ds_a, sched)
    mae0 = float((ta0 - ta_gt).abs()[covt].mean())
    mae1 = float((out.albedo_tex.detach() - ta_gt).abs()[covt].mean())
    assert mae1 * 5 <= mae0, f"albedo MAE {mae0:.4f} -> {mae1:.4f} (< 5x)"

    # (b) vertex-perturbed sphere: step 3 strictly reduces chamfer distance
    ds_b = _render_dataset(gt, cams, spp=4, depth=1, seed=seed)
    v = mesh.vertices.copy()
    bump = 0.06 * np.sin(3.0 * v[:, 0]) * np.cos(2.0 * v[:, 1])
    nrm = v / np.linalg.norm(v, axis=-1, keepdims=True)
    mesh_pert = TriMesh(v + bump[:, None] * nrm, mesh.triangles,
                        uvs=mesh.uvs, weld_map=mesh.weld_map)
    env0 = envmap_from_sg(sg, 64, 32)
    init_b = TexturedAssets(mesh_pert, ta_gt.clone(), tr_gt.clone(),
                            EnvMap(env0.values.clone()), 0.02)
    ref = sample_surface(mesh, 20000, seed=1)

    def cd(m):
        return chamfer(ref, sample_surface(m, 20000, seed=2))

    sched_b = Stage3Schedule(step1_iters=0, step2_iters=0, step3_iters=150,
                             spp=4, max_depth=1, seed=seed,
                             resample_noise=False, lr_vertices=3e-3)
    out_b = run_pbir(init_b, ds_b, sched_b)
    cd0, cd1 = cd(mesh_pert), cd(out_b.mesh)
    assert cd1 < cd0, f"chamfer {cd0:.4f} -> {cd1:.4f} (not reduced)"

    # (c) GI on/off: albedo recovery near a red reflector is strictly
    # better when interreflection is modeled
    sph_g = VoxelGrid.from_function(
        (10,) * 3, Aabb(np.full(3, -1.4), np.full(3, 1.4)),
        lambda p: torch.linalg.norm(p, dim=-1) - 1.0)
    sph = marching_cubes(sph_g)
    z0, s = -1.25, 2.5
    quad_v = np.array([[-s, -s, z0], [s, -s, z0], [s, s, z0], [-s, s, z0]])
    quad_t = np.array([[0, 1, 2], [0, 2, 3]])
    nv = len(sph.vertices)
    verts = np.vstack([sph.vertices, quad_v])
    tris = np.vstack([sph.triangles, quad_t + nv])
    alb = np.vstack([np.full((nv, 3), 0.6),
                     np.tile([0.85, 0.08, 0.08], (4, 1))])
    scene_mesh = TriMesh(verts, tris, albedo=alb,
                         roughness=np.full(len(verts), 0.5))
    scene_mesh = replace(scene_mesh,
                         normals=vertex_normals_area_weighted(scene_mesh))
    scene_mesh, ta_c, tr_c, cov_c = uv_atlas_and_bake(scene_mesh, 96)
    ta_c = torch.as_tensor(ta_c)
    tr_c = torch.as_tensor(tr_c)
    # texels owned by sphere charts (charts are laid out in triangle order)
    cells = int(np.ceil(np.sqrt(len(tris))))
    cell_px = 96 // cells
    owner = np.full((96, 96), -1)
    for t in range(len(tris)):
        cy, cx = divmod(t, cells)
        owner[cy * cell_px:(cy + 1) * cell_px,
              cx * cell_px:(cx + 1) * cell_px] = t
    sph_tex = torch.as_tensor(cov_c & (owner < len(sph.triangles)))
    gt_c = TexturedAssets(scene_mesh, ta_c, tr_c,
                          SgMixture.init_fibonacci(16, 8.0, 0.4), 0.02)
    cams_c = [make_cam(e, res=32) for e in
              [(3.5, 0, 1.0), (0, 3.5, 1.0), (-3.5, 0.5, 1.2),
               (2.5, -2.5, 1.5)]]
    seed_c = 11
    ds_c = _render_dataset(gt_c, cams_c, spp=8, depth=3, seed=seed_c)
    rng = np.random.default_rng(0)
    ta0_c = torch.clamp(
        ta_c + torch.as_tensor(rng.uniform(-0.1, 0.1, ta_c.shape)), 0, 0.999)

    def recover(gi):
        init_c = TexturedAssets(scene_mesh, ta0_c.clone(), tr_c.clone(),
                                SgMixture.init_fibonacci(16, 8.0, 0.4), 0.02)
        sched_c = Stage3Schedule(step1_iters=150, step2_iters=0,
                                 step3_iters=0, spp=8, max_depth=3,
                                 gi_enabled=gi, seed=seed_c,
                                 resample_noise=False, lr_sg=1e-12,
                                 lr_roughness=1e-12)
        res = run_pbir(init_c, ds_c, sched_c)
        return float((res.albedo_tex.detach() - ta_c).abs()[sph_tex].mean())

    mae_on = recover(True)
    mae_off = recover(False)
    assert mae_on < mae_off, \
        f"GI-on MAE {mae_on:.4f} not below GI-off {mae_off:.4f}"
    _finish(6, t0, 900.0)


# ---------------------------------------------------------------------------
# Criterion 7: bitwise determinism via manifest hashes
# ---------------------------------------------------------------------------

def test_criterion_7_manifest_determinism(tmp_path):
    t0 = time.perf_counter()
    runner = CliRunner()

    def invoke(args):
        res = runner.invoke(main, args, catch_exceptions=False)
        assert res.exit_code == 0, res.output

    def manifest(d):
        m = json.loads((d / "manifest.json").read_text())
        return (m["config_hash"], m["outputs"])

    data = tmp_path / "data"
    invoke(["make-toy", "--shape", "sphere", "--out", str(data),
            "--views", "3", "--res", "16", "--spp", "2", "--depth", "1",
            "--texel-res", "128"])

    s1_cfg = ["--set", "stage1.iterations=10", "--set",
              "stage1.fg_res_init=12", "--set", "stage1.fg_res_final=12",
              "--set", "stage1.bg_res_init=8", "--set",
              "stage1.bg_res_final=8", "--set", "stage1.upscale_until=0",
              "--set", "stage1.batch_rays=256", "--set",
              "stage1.hidden_width=16"]
    for tag in ("sa", "sb"):
        invoke(["surface", "--data", str(data), "--out",
                str(tmp_path / tag), "--deterministic"] + s1_cfg)
    assert manifest(tmp_path / "sa") == manifest(tmp_path / "sb")

    s2_cfg = ["--set", "stage2.iterations=2", "--set", "stage2.n_dirs=16",
              "--set", "stage2.n_sg_lobes=4", "--set", "stage2.bg_width=16",
              "--set", "stage2.bg_height=8"]
    for tag in ("da", "db"):
        invoke(["distill", "--data", str(data), "--surface-dir",
                str(tmp_path / "sa"), "--out", str(tmp_path / tag),
                "--deterministic"] + s2_cfg)
    assert manifest(tmp_path / "da") == manifest(tmp_path / "db")

    s3_cfg = ["--set", "stage3.step1_iters=1", "--set",
              "stage3.step2_iters=1", "--set", "stage3.step3_iters=1",
              "--set", "stage3.spp=1", "--set", "stage3.max_depth=1",
              "--set", "stage3.env_width=16", "--set", "stage3.env_height=8"]
    for tag in ("pa", "pb"):
        invoke(["pbir", "--data", str(data), "--distill-dir",
                str(tmp_path / "da"), "--out", str(tmp_path / tag),
                "--texel-res", "256", "--deterministic"] + s3_cfg)
    assert manifest(tmp_path / "pa") == manifest(tmp_path / "pb")
    _finish(7, t0, 600.0)


# ---------------------------------------------------------------------------
# Criterion 8: metric sanity
# ---------------------------------------------------------------------------

def test_criterion_8_metric_sanity():
    t0 = time.perf_counter()
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.1)
    assert psnr(a, b) == 20.0
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (24, 24, 3))
    assert ssim(img, img) == 1.0
    gt = rng.uniform(0.1, 0.9, (10, 10, 3))
    scale = albedo_alignment(gt / 2.0, gt)
    assert np.array_equal(scale, [2.0, 2.0, 2.0])
    _finish(8, t0, 1.0)
