"""Stage 2: distill the radiance field into per-vertex materials and
SG illumination via precomputed visibility/indirect transport tables."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Bvh, TriMesh, ray_cast_many
from .grids import DTYPE
from .optim import Adam, mesh_edges
from .shading import BrdfParams, EnvMap, SgMixture, brdf_eval, sg_eval


@dataclass
class DirectionSet:
    """Stratified unit directions covering the full sphere with weights."""

    dirs: torch.Tensor     # (n, 3)
    weights: torch.Tensor  # (n,), sums to 4*pi

    @classmethod
    def stratified(cls, n: int = 256) -> "DirectionSet":
        """Deterministic cell-center stratification in (cos theta, phi)."""
        rows = int(np.sqrt(n))
        cols = n // rows
        if rows * cols != n:
            raise ValueError("direction count must factor into a grid")
        z = (np.arange(rows) + 0.5) / rows * 2.0 - 1.0
        phi = (np.arange(cols) + 0.5) / cols * 2.0 * np.pi
        zz, pp = np.meshgrid(z, phi, indexing="ij")
        r = np.sqrt(np.clip(1.0 - zz * zz, 0.0, 1.0))
        dirs = np.stack([r * np.cos(pp), zz, r * np.sin(pp)], axis=-1)
        return cls(torch.as_tensor(dirs.reshape(-1, 3), dtype=DTYPE),
                   torch.full((n,), 4.0 * np.pi / n, dtype=DTYPE))

    def __len__(self) -> int:
        return int(self.dirs.shape[0])


@dataclass
class TransportTables:
    """Per-(vertex, direction) visibility and one-bounce indirect radiance."""

    vis: torch.Tensor    # (V, n) in {0, 1}
    l_ind: torch.Tensor  # (V, n, 3), meaningful where vis == 0


@dataclass
class Stage2Config:
    iterations: int = 2000
    w_v_reg: float = 0.1
    w_bg: float = 10.0
    lr_attr: float = 0.01
    lr_sg: float = 0.001
    init_roughness: float = 0.25
    n_dirs: int = 256
    n_sg_lobes: int = 256
    sg_init_sharpness: float = 25.0
    fresnel_f0: float = 0.02
    bg_width: int = 64
    bg_height: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("w_v_reg", "w_bg", "lr_attr", "lr_sg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def precompute_transport(mesh: TriMesh, bvh: Bvh, radiance_field,
                         directions: DirectionSet,
                         offset_scale: float = 1e-4) -> TransportTables:
    """Trace one ray per (vertex, direction) against the mesh.

    radiance_field(x, view_dir) must return the radiance leaving x toward
    -view_dir; on a hit at x the table stores the field queried with the
    ray direction, i.e. the radiance flowing back to the vertex.
    """
    if mesh.normals is None:
        raise ValueError("mesh needs vertex normals for transport rays")
    n_verts = len(mesh.vertices)
    n_dirs = len(directions)
    eps = offset_scale * mesh.bbox.diagonal
    start = mesh.vertices + eps * mesh.normals
    origins = np.broadcast_to(start[:, None, :],
                              (n_verts, n_dirs, 3)).reshape(-1, 3)
    origins = np.ascontiguousarray(origins)
    dirs_np = directions.dirs.numpy()
    rays_d = np.broadcast_to(dirs_np[None], (n_verts, n_dirs, 3)).reshape(-1, 3)
    t_hit, _, _, _ = ray_cast_many(bvh, origins,
                                   np.ascontiguousarray(rays_d))
    hit = np.isfinite(t_hit)
    vis = torch.as_tensor(~hit, dtype=DTYPE).reshape(n_verts, n_dirs)
    l_ind = torch.zeros(n_verts, n_dirs, 3, dtype=DTYPE)
    if hit.any():
        x_hit = origins[hit] + t_hit[hit, None] * rays_d[hit]
        with torch.no_grad():
            rad = radiance_field(torch.as_tensor(x_hit, dtype=DTYPE),
                                 torch.as_tensor(rays_d[hit], dtype=DTYPE))
        l_ind.reshape(-1, 3)[np.flatnonzero(hit)] = rad
    return TransportTables(vis, l_ind)


def incident_radiance(tables: TransportTables, sg: SgMixture,
                      directions: DirectionSet,
                      vertex: int | None = None) -> torch.Tensor:
    """Environment-or-indirect radiance per table entry.

    With vertex=None returns the full (V, n, 3) table.
    """
    env = sg_eval(sg, directions.dirs)  # (n, 3)
    vis = tables.vis if vertex is None else tables.vis[vertex:vertex + 1]
    ind = tables.l_ind if vertex is None else tables.l_ind[vertex:vertex + 1]
    out = env[None] * vis[..., None] + ind * (1.0 - vis[..., None])
    return out if vertex is None else out[0]


def coarse_render(normals: torch.Tensor, albedo: torch.Tensor,
                  roughness: torch.Tensor, f0: float,
                  tables: TransportTables, sg: SgMixture,
                  wo: torch.Tensor, directions: DirectionSet) -> torch.Tensor:
    """Numerical-integration render at each vertex for outgoing wo.

    Uniform-sphere Monte Carlo with normalization Z = n / (4*pi); the
    clamped cosine zeroes sub-horizon directions so tables stay rectangular.
    """
    normals = torch.as_tensor(normals, dtype=DTYPE)
    wo = torch.as_tensor(wo, dtype=DTYPE)
    if bool(((normals * wo).sum(-1) <= 0).any()):
        raise ValueError("coarse_render requires wo above the horizon")
    n_verts, n_dirs = tables.vis.shape
    li = incident_radiance(tables, sg, directions)  # (V, n, 3)
    params = BrdfParams(albedo[:, None, :].expand(n_verts, n_dirs, 3),
                        roughness[:, None].expand(n_verts, n_dirs), f0)
    f = brdf_eval(params, normals[:, None, :],
                  directions.dirs[None, :, :].expand(n_verts, n_dirs, 3),
                  wo[:, None, :].expand(n_verts, n_dirs, 3))
    cos = torch.clamp((normals[:, None, :] * directions.dirs[None]).sum(-1),
                      min=0.0)
    z = n_dirs / (4.0 * np.pi)
    return (li * f * cos[..., None]).sum(dim=1) / z


def distill_losses(mesh: TriMesh, coarse: torch.Tensor,
                   teacher: torch.Tensor, albedo: torch.Tensor,
                   roughness: torch.Tensor, sg: SgMixture,
                   bg_env: EnvMap, bg_coverage: np.ndarray,
                   bg_dirs: torch.Tensor, cfg: Stage2Config):
    """(L_distill, L_v_reg, L_bg, total) for one sampled-direction batch."""
    l_distill = (coarse - teacher).abs().sum()
    edges = mesh_edges(mesh.triangles)
    e0, e1 = edges[:, 0], edges[:, 1]
    l_v_reg = ((albedo[e0] - albedo[e1]).abs().sum()
               + (roughness[e0] - roughness[e1]).abs().sum())
    cov = torch.as_tensor(bg_coverage.reshape(-1))
    if bool(cov.any()):
        pred = sg_eval(sg, bg_dirs.reshape(-1, 3)[cov])
        obs = bg_env.values.reshape(-1, 3)[cov]
        l_bg = (pred - obs).abs().sum()
    else:
        l_bg = torch.zeros((), dtype=DTYPE)
    total = l_distill + cfg.w_v_reg * l_v_reg + cfg.w_bg * l_bg
    return l_distill, l_v_reg, l_bg, total


def init_materials(mesh: TriMesh, radiance_field, directions: DirectionSet,
                   init_roughness: float = 0.25):
    """Per-vertex material start: fixed roughness, albedo from the
    per-channel lower median of the teacher's outgoing radiance over
    above-horizon directions."""
    if mesh.normals is None:
        raise ValueError("mesh needs vertex normals")
    n_verts = len(mesh.vertices)
    n_dirs = len(directions)
    verts = torch.as_tensor(mesh.vertices, dtype=DTYPE)
    normals = torch.as_tensor(mesh.normals, dtype=DTYPE)
    above = (normals @ directions.dirs.T) > 0  # (V, n)
    x = verts[:, None, :].expand(n_verts, n_dirs, 3).reshape(-1, 3)
    # field(x, view_dir) = radiance leaving x toward -view_dir, so the
    # outgoing radiance along wo is queried with view_dir = -wo
    view = (-directions.dirs[None, :, :]).expand(n_verts, n_dirs, 3)
    with torch.no_grad():
        rad = radiance_field(x, view.reshape(-1, 3)).reshape(n_verts, n_dirs, 3)
    rad = torch.where(above[..., None], rad, torch.full_like(rad, torch.inf))
    sorted_rad, _ = torch.sort(rad, dim=1)
    counts = above.sum(dim=1)
    idx = torch.clamp((counts - 1) // 2, min=0)
    albedo = torch.gather(
        sorted_rad, 1, idx[:, None, None].expand(n_verts, 1, 3))[:, 0, :]
    albedo = torch.where(counts[:, None] > 0, albedo,
                         torch.full_like(albedo, 0.5))
    albedo = torch.clamp(albedo, 0.0, 1.0 - 1e-4)
    roughness = torch.full((n_verts,), init_roughness, dtype=DTYPE)
    return albedo, roughness


def sample_outgoing(normals: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """One uniform above-horizon direction per vertex."""
    n = normals.shape[0]
    v = torch.randn(n, 3, dtype=DTYPE, generator=gen)
    v = v / torch.linalg.norm(v, dim=-1, keepdim=True)
    sign = torch.sign((v * normals).sum(-1, keepdim=True))
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    v = v * sign
    # nudge exactly tangent draws off the horizon
    tangent = (v * normals).sum(-1, keepdim=True) <= 1e-9
    v = torch.where(tangent, normals, v)
    return v


def train_distill(mesh: TriMesh, tables: TransportTables, radiance_field,
                  directions: DirectionSet, bg_env: EnvMap,
                  bg_coverage: np.ndarray, cfg: Stage2Config,
                  log=None):
    """Optimize per-vertex albedo/roughness and the SG environment.

    Returns (mesh with attributes set, SgMixture). Deterministic for a
    fixed cfg.seed.
    """
    from .shading import texel_center_directions
    gen = torch.Generator().manual_seed(cfg.seed)
    albedo, roughness = init_materials(mesh, radiance_field, directions,
                                       cfg.init_roughness)
    albedo = albedo.clone().requires_grad_(True)
    roughness = roughness.clone().requires_grad_(True)
    mean0 = float(bg_env.values[torch.as_tensor(bg_coverage)].mean()) \
        if bg_coverage.any() else 0.5
    # the mixture's spherical mean is n_lobes * amp / (2 * sharpness)
    amp0 = 2.0 * cfg.sg_init_sharpness * max(mean0, 1e-3) / cfg.n_sg_lobes
    sg = SgMixture.init_fibonacci(cfg.n_sg_lobes, cfg.sg_init_sharpness, amp0)
    for p in sg.parameters():
        p.requires_grad_(True)
    normals = torch.as_tensor(mesh.normals, dtype=DTYPE)
    verts = torch.as_tensor(mesh.vertices, dtype=DTYPE)
    bg_dirs = texel_center_directions(bg_env.width, bg_env.height)
    optimizer = Adam([
        {"params": [albedo, roughness], "lr": cfg.lr_attr},
        {"params": sg.parameters(), "lr": cfg.lr_sg},
    ], betas=(0.9, 0.999), eps=1e-8)
    history = []
    for it in range(cfg.iterations):
        wo = sample_outgoing(normals, gen)
        with torch.no_grad():
            teacher = radiance_field(verts, -wo)
        a = torch.clamp(albedo, 0.0, 1.0 - 1e-4)
        r = torch.clamp(roughness, 0.01, 1.0)
        coarse = coarse_render(normals, a, r, cfg.fresnel_f0, tables,
                               sg.constrained(), wo, directions)
        l_d, l_v, l_bg, total = distill_losses(
            mesh, coarse, teacher, a, r, sg.constrained(), bg_env,
            bg_coverage, bg_dirs, cfg)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        history.append((it, float(l_d.detach()), float(l_v.detach()),
                        float(l_bg.detach()), float(total.detach())))
        if log is not None:
            log(it, float(total))
    out = TriMesh(mesh.vertices, mesh.triangles, normals=mesh.normals,
                  uvs=mesh.uvs,
                  albedo=torch.clamp(albedo, 0.0, 1.0 - 1e-4).detach().numpy(),
                  roughness=torch.clamp(roughness, 0.01, 1.0).detach().numpy())
    with torch.no_grad():
        sg_final = sg.constrained()
    return out, SgMixture(sg_final.axes.detach(), sg_final.lambdas.detach(),
                          sg_final.amplitudes.detach()), history


# ---------------------------------------------------------------------------
# Transport table cache
# ---------------------------------------------------------------------------

TABLE_MAGIC = b"NPBT"


def transport_cache_key(mesh: TriMesh, directions: DirectionSet,
                        field_checkpoint: bytes) -> str:
    h = hashlib.sha256()
    h.update(mesh.vertices.tobytes())
    h.update(mesh.triangles.tobytes())
    if mesh.normals is not None:
        h.update(np.ascontiguousarray(mesh.normals).tobytes())
    h.update(directions.dirs.numpy().tobytes())
    h.update(field_checkpoint)
    return h.hexdigest()


def save_transport(tables: TransportTables, path) -> None:
    vis = tables.vis.numpy().astype(bool)
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        f.write(struct.pack("<3I", 1, vis.shape[0], vis.shape[1]))
        f.write(np.packbits(vis.reshape(-1)).tobytes())
        f.write(tables.l_ind.numpy().astype("<f4").tobytes())


def load_transport(path) -> TransportTables:
    with open(path, "rb") as f:
        if f.read(4) != TABLE_MAGIC:
            raise ValueError("not a transport table cache")
        version, nv, nd = struct.unpack("<3I", f.read(12))
        if version != 1:
            raise ValueError("unsupported transport cache version")
        nbits = nv * nd
        raw = f.read((nbits + 7) // 8)
        vis = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:nbits]
        l_ind = np.frombuffer(f.read(4 * nbits * 3), dtype="<f4")
        return TransportTables(
            torch.as_tensor(vis.reshape(nv, nd).copy(), dtype=DTYPE),
            torch.as_tensor(l_ind.reshape(nv, nd, 3).copy(), dtype=DTYPE))
