"""Batch pipeline CLI.

Subcommands: surface, distill, pbir, render, relight, eval, make-toy.
Every subcommand writes a ``manifest.json`` into its output directory
recording the resolved configuration, its hash, and content hashes of
every artifact, so identical configs + seeds yield identical manifests.

Environment: ``NPBIR_THREADS`` caps torch/numba parallelism.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys

import click
import numpy as np
import torch

from .errors import ValidationError
from .grids import DTYPE, query_radiance, save_scene, load_scene, Aabb, VoxelGrid
from .volume import Camera, Stage1Config, train_surface, render_mask
from .geometry import (TriMesh, Bvh, marching_cubes, vertex_normals_from_sdf,
                       vertex_normals_area_weighted, uv_atlas_and_bake,
                       save_mesh_binary, load_mesh_binary, chamfer,
                       sample_surface)
from .shading import (SgMixture, EnvMap, envmap_from_sg, averaged_background)
from .distill import (DirectionSet, Stage2Config, precompute_transport,
                      train_distill, transport_cache_key, save_transport,
                      load_transport)
from .pbir import (TexturedAssets, RenderConfig, Stage3Schedule, path_trace,
                   run_pbir, view_seed)
from . import io_metrics as iom
from dataclasses import replace, fields


# ---------------------------------------------------------------------------
# Configuration and manifests
# ---------------------------------------------------------------------------

def _apply_threads():
    n = os.environ.get("NPBIR_THREADS")
    if n:
        torch.set_num_threads(int(n))
        try:
            import numba
            numba.set_num_threads(int(n))
        except Exception:
            pass


def load_config(path, overrides):
    """JSON config plus dotted --set key=value overrides.

    Override values are parsed as JSON when possible, else kept as
    strings.
    """
    cfg = {}
    if path:
        with open(path) as f:
            cfg = json.load(f)
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _dataclass_from(cfg_cls, section: dict):
    known = {f.name for f in fields(cfg_cls)}
    unknown = set(section) - known
    if unknown:
        raise click.BadParameter(
            f"unknown {cfg_cls.__name__} keys: {sorted(unknown)}")
    return cfg_cls(**section)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: dict, artifacts) -> dict:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "outputs": {os.path.relpath(p, out_dir): file_hash(p)
                    for p in sorted(artifacts)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def _collect(out_dir):
    """All regular files under out_dir except the manifest itself."""
    found = []
    for root, _, names in os.walk(out_dir):
        for n in names:
            if n != "manifest.json":
                found.append(os.path.join(root, n))
    return found


# ---------------------------------------------------------------------------
# Asset directory format
# ---------------------------------------------------------------------------

def save_assets(out_dir, assets: TexturedAssets) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_mesh_binary(assets.mesh, os.path.join(out_dir, "mesh.npbm"))
    light = assets.light
    if isinstance(light, SgMixture):
        env = envmap_from_sg(light, 64, 32).values
        np.savez(os.path.join(out_dir, "sg.npz"),
                 axes=light.axes.detach().numpy(),
                 lambdas=light.lambdas.detach().numpy(),
                 amplitudes=light.amplitudes.detach().numpy())
    else:
        env = light.values
    np.savez(os.path.join(out_dir, "assets.npz"),
             albedo_tex=assets.albedo_tex.detach().numpy(),
             roughness_tex=assets.roughness_tex.detach().numpy(),
             fresnel_f0=np.float64(assets.fresnel_f0))
    iom.write_pfm(os.path.join(out_dir, "envmap.pfm"),
                  env.detach().numpy().astype(np.float32))


def load_assets(dir_path) -> TexturedAssets:
    mesh_path = os.path.join(dir_path, "mesh.npbm")
    npz_path = os.path.join(dir_path, "assets.npz")
    if not (os.path.isfile(mesh_path) and os.path.isfile(npz_path)):
        raise ValidationError(f"{dir_path} is not an asset directory "
                              "(expected mesh.npbm and assets.npz)")
    mesh = load_mesh_binary(mesh_path)
    data = np.load(npz_path)
    sg_path = os.path.join(dir_path, "sg.npz")
    if os.path.isfile(sg_path):
        sg = np.load(sg_path)
        light = SgMixture(torch.as_tensor(sg["axes"], dtype=DTYPE),
                          torch.as_tensor(sg["lambdas"], dtype=DTYPE),
                          torch.as_tensor(sg["amplitudes"], dtype=DTYPE))
    else:
        env = iom.read_pfm(os.path.join(dir_path, "envmap.pfm"))
        light = EnvMap(torch.as_tensor(env, dtype=DTYPE))
    return TexturedAssets(
        mesh, torch.as_tensor(data["albedo_tex"], dtype=DTYPE),
        torch.as_tensor(data["roughness_tex"], dtype=DTYPE),
        light, float(data["fresnel_f0"]))


# ---------------------------------------------------------------------------
# Toy scenes
# ---------------------------------------------------------------------------

def _toy_light() -> SgMixture:
    """Fixed colored 16-lobe environment."""
    sg = SgMixture.init_fibonacci(16, 8.0, 0.4)
    tint = 0.25 + 0.3 * (sg.axes + 1.0) / 2.0
    return SgMixture(sg.axes, sg.lambdas, sg.amplitudes * tint)


def _toy_mesh(shape: str) -> TriMesh:
    bb = Aabb(np.full(3, -1.6), np.full(3, 1.6))
    if shape == "sphere":
        grid = VoxelGrid.from_function(
            (12, 12, 12), bb, lambda p: torch.linalg.norm(p, dim=-1) - 1.0)
        mesh = marching_cubes(grid)
        v = mesh.vertices
        albedo = np.stack([
            0.2 + 0.6 * (v[:, 0] + 1.6) / 3.2,
            np.full(len(v), 0.5),
            0.8 - 0.6 * (v[:, 2] + 1.6) / 3.2], axis=-1).clip(0, 0.999)
        rough = np.full(len(v), 0.4)
    elif shape == "two-spheres":
        c = 0.75
        def sdf(p):
            d1 = torch.linalg.norm(p - torch.tensor([-c, 0.0, 0.0]), dim=-1)
            d2 = torch.linalg.norm(p - torch.tensor([c, 0.0, 0.0]), dim=-1)
            return torch.minimum(d1, d2) - 0.7
        grid = VoxelGrid.from_function((16, 16, 16), bb, sdf)
        mesh = marching_cubes(grid)
        v = mesh.vertices
        left = v[:, 0] < 0
        albedo = np.where(left[:, None], [0.8, 0.15, 0.15],
                          [0.15, 0.25, 0.8]).astype(np.float64)
        rough = np.where(left, 0.25, 0.6)
    elif shape == "textured-plane":
        k = 8
        g = np.linspace(-1.2, 1.2, k + 1)
        gx, gy = np.meshgrid(g, g, indexing="ij")
        v = np.stack([gx.ravel(), gy.ravel(),
                      np.zeros((k + 1) ** 2)], axis=-1)
        tris = []
        for i in range(k):
            for j in range(k):
                a = i * (k + 1) + j
                b, cidx, d = a + 1, a + k + 1, a + k + 2
                tris += [[a, cidx, b], [b, cidx, d]]
        mesh = TriMesh(v, np.asarray(tris, dtype=np.int64))
        checker = ((np.floor((v[:, 0] + 1.2) / 0.3)
                    + np.floor((v[:, 1] + 1.2) / 0.3)) % 2)
        albedo = np.stack([0.15 + 0.7 * checker,
                           np.full(len(v), 0.4),
                           0.85 - 0.7 * checker], axis=-1)
        rough = np.where(checker > 0, 0.2, 0.7)
    else:
        raise click.BadParameter(f"unknown toy shape {shape!r}")
    mesh = replace(mesh, albedo=albedo, roughness=rough,
                   normals=vertex_normals_area_weighted(mesh))
    return mesh


def _toy_cameras(n: int, res: int, radius: float = 3.2):
    cams = []
    for i in range(n):
        phi = 2.0 * np.pi * i / n
        z = 0.6 * np.sin(4.0 * np.pi * i / max(n, 1))
        eye = np.array([radius * np.cos(phi), radius * np.sin(phi),
                        1.0 + z])
        fwd = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1] = right, down
        c2w[:3, 2], c2w[:3, 3] = fwd, eye
        f = 0.5 * res / np.tan(np.radians(40.0) / 2)
        cams.append(Camera(f, f, res / 2, res / 2, res, res, c2w))
    return cams


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@click.group()
def main():
    """Inverse-rendering pipeline: surface, distill, refine, evaluate."""
    _apply_threads()


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="JSON config file")(fn)
    fn = click.option("--set", "overrides", multiple=True,
                      help="dotted key=value config override")(fn)
    fn = click.option("--deterministic", is_flag=True,
                      help="fixed seeds and reduction order")(fn)
    return fn


def _resolve_seed(cfg: dict, deterministic: bool) -> int:
    seed = cfg.get("seed", 0)
    if deterministic and "seed" not in cfg:
        cfg["seed"] = seed
    return int(seed)


@main.command("make-toy")
@click.option("--shape", type=click.Choice(
    ["sphere", "two-spheres", "textured-plane"]), default="sphere")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--views", default=16, show_default=True)
@click.option("--res", default=64, show_default=True)
@click.option("--spp", default=16, show_default=True)
@click.option("--depth", default=2, show_default=True)
@click.option("--texel-res", default=128, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_make_toy(shape, out_dir, views, res, spp, depth, texel_res, seed):
    """Generate a synthetic posed dataset plus its ground-truth assets."""
    cfg = {"shape": shape, "views": views, "res": res, "spp": spp,
           "depth": depth, "texel_res": texel_res, "seed": seed}
    os.makedirs(out_dir, exist_ok=True)
    mesh = _toy_mesh(shape)
    split_mesh, tex_a, tex_r, covered = uv_atlas_and_bake(mesh, texel_res)
    light = _toy_light()
    assets = TexturedAssets(split_mesh, torch.as_tensor(tex_a, dtype=DTYPE),
                            torch.as_tensor(tex_r, dtype=DTYPE), light,
                            fresnel_f0=0.02)
    cams = _toy_cameras(views, res)
    view_list = []
    for j, cam in enumerate(cams):
        rc = RenderConfig(spp=spp, max_depth=depth,
                          seed=view_seed(seed, j))
        img = path_trace(assets, cam, rc).detach().numpy()
        mask = render_mask(split_mesh, cam, supersample=4)
        view_list.append(iom.View(cam, img, mask, f"view_{j:03d}"))
    gt_env = envmap_from_sg(light, 64, 32).values.numpy()
    ds = iom.PosedDataset(view_list, gt_env=gt_env)
    iom.save_dataset(out_dir, ds, image_format="pfm")
    gt_dir = os.path.join(out_dir, "gt")
    save_assets(gt_dir, assets)
    np.save(os.path.join(gt_dir, "coverage.npy"), covered)
    write_manifest(out_dir, "make-toy", cfg, _collect(out_dir))
    click.echo(f"wrote {views} views and ground truth to {out_dir}")


@main.command("surface")
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@_common
def cmd_surface(data_dir, out_dir, config_path, overrides, deterministic):
    """Stage 1: SDF surface reconstruction from posed images."""
    cfg = load_config(config_path, overrides)
    _resolve_seed(cfg, deterministic)
    stage_cfg = _dataclass_from(Stage1Config, cfg.get("stage1", {}))
    if "seed" in cfg:
        stage_cfg = replace(stage_cfg, seed=int(cfg["seed"]))
    dataset = iom.load_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    scene = train_surface(dataset, stage_cfg,
                          log_path=os.path.join(out_dir, "surface_loss.csv"))
    save_scene(scene, os.path.join(out_dir, "scene.npbs"))
    mesh = marching_cubes(scene.fg_sdf)
    mesh = replace(mesh, normals=vertex_normals_from_sdf(mesh, scene.fg_sdf))
    save_mesh_binary(mesh, os.path.join(out_dir, "mesh.npbm"))
    write_manifest(out_dir, "surface", cfg, _collect(out_dir))
    click.echo(f"surface stage done: {len(mesh.vertices)} vertices")


@main.command("distill")
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--surface-dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@_common
def cmd_distill(data_dir, surface_dir, out_dir, config_path, overrides,
                deterministic):
    """Stage 2: distill materials + SG environment from the field."""
    cfg = load_config(config_path, overrides)
    _resolve_seed(cfg, deterministic)
    stage_cfg = _dataclass_from(Stage2Config, cfg.get("stage2", {}))
    if "seed" in cfg:
        stage_cfg = replace(stage_cfg, seed=int(cfg["seed"]))
    scene_path = os.path.join(surface_dir, "scene.npbs")
    mesh_path = os.path.join(surface_dir, "mesh.npbm")
    if not (os.path.isfile(scene_path) and os.path.isfile(mesh_path)):
        click.echo(f"error: {surface_dir} lacks surface outputs "
                   "(scene.npbs, mesh.npbm); run `npbir surface` first",
                   err=True)
        sys.exit(1)
    scene = load_scene(scene_path)
    mesh = load_mesh_binary(mesh_path)
    dataset = iom.load_dataset(data_dir)
    field = lambda x, v: query_radiance(scene, x, v)  # noqa: E731
    directions = DirectionSet.stratified(stage_cfg.n_dirs)
    os.makedirs(out_dir, exist_ok=True)
    with open(scene_path, "rb") as f:
        key = transport_cache_key(mesh, directions, f.read())
    cache = os.path.join(out_dir, f"transport_{key[:16]}.npbt")
    if os.path.isfile(cache):
        tables = load_transport(cache)
    else:
        tables = precompute_transport(mesh, Bvh(mesh), field, directions)
        save_transport(tables, cache)
    bg_env, bg_cov = averaged_background(dataset, mesh, stage_cfg.bg_width,
                                         stage_cfg.bg_height)
    out_mesh, sg, history = train_distill(mesh, tables, field, directions,
                                          bg_env, bg_cov, stage_cfg)
    save_mesh_binary(out_mesh, os.path.join(out_dir, "mesh.npbm"))
    np.savez(os.path.join(out_dir, "sg.npz"),
             axes=sg.axes.numpy(), lambdas=sg.lambdas.numpy(),
             amplitudes=sg.amplitudes.numpy())
    iom.write_pfm(os.path.join(out_dir, "envmap.pfm"),
                  envmap_from_sg(sg, 64, 32).values.numpy()
                  .astype(np.float32))
    with open(os.path.join(out_dir, "distill_loss.csv"), "w") as f:
        f.write("iteration,L_distill,L_v_reg,L_bg,total\n")
        for row in history:
            f.write(",".join(repr(x) for x in row) + "\n")
    write_manifest(out_dir, "distill", cfg, _collect(out_dir))
    click.echo("distill stage done")


@main.command("pbir")
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--distill-dir", default=None, type=click.Path())
@click.option("--surface-dir", default=None, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--texel-res", default=128, show_default=True)
@click.option("--const-init", is_flag=True,
              help="constant material/light start (albedo and roughness "
                   "0.5, gray environment) instead of distill outputs")
@_common
def cmd_pbir(data_dir, distill_dir, surface_dir, out_dir, texel_res,
             const_init, config_path, overrides, deterministic):
    """Stage 3: physics-based refinement through the path tracer."""
    cfg = load_config(config_path, overrides)
    _resolve_seed(cfg, deterministic)
    sched = _dataclass_from(Stage3Schedule, cfg.get("stage3", {}))
    if "seed" in cfg:
        sched = replace(sched, seed=int(cfg["seed"]))
    have_distill = (distill_dir is not None
                    and os.path.isfile(os.path.join(distill_dir, "mesh.npbm"))
                    and os.path.isfile(os.path.join(distill_dir, "sg.npz")))
    if not have_distill and not const_init:
        click.echo("error: no distill outputs found; pass --distill-dir "
                   "with mesh.npbm + sg.npz, or opt into --const-init",
                   err=True)
        sys.exit(1)
    if have_distill:
        mesh = load_mesh_binary(os.path.join(distill_dir, "mesh.npbm"))
        sg_data = np.load(os.path.join(distill_dir, "sg.npz"))
        light = SgMixture(torch.as_tensor(sg_data["axes"], dtype=DTYPE),
                          torch.as_tensor(sg_data["lambdas"], dtype=DTYPE),
                          torch.as_tensor(sg_data["amplitudes"], dtype=DTYPE))
    else:
        src = surface_dir or distill_dir
        if src is None or not os.path.isfile(os.path.join(src, "mesh.npbm")):
            click.echo("error: --const-init still needs a mesh; pass "
                       "--surface-dir with mesh.npbm", err=True)
            sys.exit(1)
        mesh = load_mesh_binary(os.path.join(src, "mesh.npbm"))
        n_lobes, sharp = 64, 8.0
        # amplitude chosen so the mixture's spherical mean is 0.5 (gray)
        light = SgMixture.init_fibonacci(
            n_lobes, sharp, 2.0 * sharp * 0.5 / n_lobes)
    if const_init or mesh.albedo is None:
        mesh = replace(mesh,
                       albedo=np.full((len(mesh.vertices), 3), 0.5),
                       roughness=np.full(len(mesh.vertices), 0.5))
    if mesh.normals is None:
        mesh = replace(mesh, normals=vertex_normals_area_weighted(mesh))
    split_mesh, tex_a, tex_r, _ = uv_atlas_and_bake(mesh, texel_res)
    f0 = float(cfg.get("fresnel_f0", 0.02))
    initial = TexturedAssets(split_mesh,
                             torch.as_tensor(tex_a, dtype=DTYPE),
                             torch.as_tensor(tex_r, dtype=DTYPE), light, f0)
    dataset = iom.load_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    result = run_pbir(initial, dataset, sched, out_dir=out_dir)
    save_assets(out_dir, result)
    write_manifest(out_dir, "pbir", cfg, _collect(out_dir))
    click.echo("pbir stage done")


def _render_views(assets, dataset, out_dir, spp, depth, seed, suffix=""):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    written = []
    for j, view in enumerate(dataset.views):
        rc = RenderConfig(spp=spp, max_depth=depth,
                          seed=view_seed(seed, j))
        img = path_trace(assets, view.camera, rc).detach().numpy()
        name = (view.name or f"view_{j:03d}") + suffix
        path = os.path.join(out_dir, "images", f"{name}.pfm")
        iom.write_pfm(path, img.astype(np.float32))
        written.append(path)
    return written


@main.command("render")
@click.option("--assets", "assets_dir", required=True,
              type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True), help="dataset giving cameras")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--spp", default=64, show_default=True)
@click.option("--depth", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_render(assets_dir, data_dir, out_dir, spp, depth, seed):
    """Render the asset directory from the dataset's cameras."""
    cfg = {"assets": assets_dir, "spp": spp, "depth": depth, "seed": seed}
    assets = load_assets(assets_dir)
    dataset = iom.load_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    _render_views(assets, dataset, out_dir, spp, depth, seed)
    write_manifest(out_dir, "render", cfg, _collect(out_dir))
    click.echo(f"rendered {len(dataset.views)} views")


@main.command("relight")
@click.option("--assets", "assets_dir", required=True,
              type=click.Path(exists=True))
@click.option("--env", "env_path", required=True,
              type=click.Path(exists=True), help="PFM lat-long envmap")
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--spp", default=64, show_default=True)
@click.option("--depth", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_relight(assets_dir, env_path, data_dir, out_dir, spp, depth, seed):
    """Render the assets under a replacement environment light."""
    cfg = {"assets": assets_dir, "env": env_path, "spp": spp,
           "depth": depth, "seed": seed}
    assets = load_assets(assets_dir)
    env = EnvMap(torch.as_tensor(iom.read_pfm(env_path), dtype=DTYPE))
    assets = TexturedAssets(assets.mesh, assets.albedo_tex,
                            assets.roughness_tex, env, assets.fresnel_f0)
    dataset = iom.load_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    _render_views(assets, dataset, out_dir, spp, depth, seed)
    write_manifest(out_dir, "relight", cfg, _collect(out_dir))
    click.echo(f"relit {len(dataset.views)} views")


@main.command("eval")
@click.option("--pred", "pred_dir", required=True,
              type=click.Path(exists=True))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_eval(pred_dir, gt_dir, out_path):
    """Per-view PSNR/SSIM/MSE report plus asset-level metrics.

    Image rows go to the CSV at --out; when both directories also carry
    asset files (assets.npz / mesh.npbm), aligned and raw albedo error,
    roughness MSE, and Chamfer distance go to a JSON next to it.
    """
    def view_images(d):
        img_dir = os.path.join(d, "images")
        if not os.path.isdir(img_dir):
            raise ValidationError(f"{d} has no images/ directory")
        return {os.path.splitext(n)[0]: os.path.join(img_dir, n)
                for n in sorted(os.listdir(img_dir))
                if n.endswith((".pfm", ".png"))}

    pred, gt = view_images(pred_dir), view_images(gt_dir)
    missing = sorted(set(gt) - set(pred)) + sorted(set(pred) - set(gt))
    if missing:
        raise ValidationError(f"view mismatch between pred and gt: "
                              f"{missing}")
    rows = []
    for name in sorted(gt):
        a = _load_image(pred[name])
        b = _load_image(gt[name])
        rows.append((name, iom.psnr(a, b), iom.ssim(a, b), iom.mse(a, b)))
    iom.write_metric_report(out_path, rows)

    extra = {}
    p_npz = os.path.join(pred_dir, "assets.npz")
    g_npz = os.path.join(gt_dir, "assets.npz")
    if os.path.isfile(p_npz) and os.path.isfile(g_npz):
        pa, ga = np.load(p_npz), np.load(g_npz)
        ap, ag = pa["albedo_tex"], ga["albedo_tex"]
        if ap.shape == ag.shape:
            scale = iom.albedo_alignment(ap, ag)
            extra["albedo_mae_raw"] = float(np.abs(ap - ag).mean())
            extra["albedo_mae_aligned"] = float(
                np.abs(ap * scale - ag).mean())
            extra["albedo_alignment_scale"] = [float(s) for s in scale]
            extra["roughness_mse"] = iom.mse(pa["roughness_tex"],
                                             ga["roughness_tex"])
    p_mesh = os.path.join(pred_dir, "mesh.npbm")
    g_mesh = os.path.join(gt_dir, "mesh.npbm")
    if os.path.isfile(p_mesh) and os.path.isfile(g_mesh):
        mp, mg = load_mesh_binary(p_mesh), load_mesh_binary(g_mesh)
        extra["chamfer"] = chamfer(sample_surface(mp, 20000, seed=0),
                                   sample_surface(mg, 20000, seed=1))
    if extra:
        with open(os.path.splitext(out_path)[0] + "_assets.json", "w") as f:
            json.dump(extra, f, indent=1, sort_keys=True)
    click.echo(f"evaluated {len(rows)} views")


def _load_image(path):
    if path.endswith(".pfm"):
        return np.asarray(iom.read_pfm(path), dtype=np.float64)
    return iom.srgb_to_linear(iom.read_png(path))


if __name__ == "__main__":
    main()
