"""Meshes: marching-cubes extraction, SDF normals, BVH ray casting,
UV atlas baking, Chamfer distance, and mesh IO."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from numba import njit
from scipy.spatial import cKDTree
from skimage import measure

from .errors import CapacityError
from .grids import Aabb, VoxelGrid, sdf_gradient

MESH_MAGIC = b"NPBM"


@dataclass
class TriMesh:
    """Indexed triangle mesh with optional per-vertex attributes."""

    vertices: np.ndarray              # (n, 3) float64
    triangles: np.ndarray             # (m, 3) int64
    normals: np.ndarray | None = None       # (n, 3) unit
    uvs: np.ndarray | None = None           # (n, 2) in [0, 1]^2
    albedo: np.ndarray | None = None        # (n, 3) in [0, 1)
    roughness: np.ndarray | None = None     # (n,) > 0
    # For meshes split per-triangle for UV charts: index of the shared
    # (welded) vertex each split vertex came from.
    weld_map: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def bbox(self) -> Aabb:
        if len(self.vertices) == 0:
            return Aabb(np.zeros(3), np.ones(3))
        return Aabb(self.vertices.min(axis=0) - 1e-9,
                    self.vertices.max(axis=0) + 1e-9)

    def face_corners(self) -> np.ndarray:
        return self.vertices[self.triangles]  # (m, 3, 3)


def face_normals_areas(mesh: TriMesh):
    c = mesh.face_corners()
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    norms = np.linalg.norm(cross, axis=-1)
    areas = 0.5 * norms
    with np.errstate(invalid="ignore", divide="ignore"):
        n = cross / np.where(norms > 0, norms, 1.0)[:, None]
    return n, areas


def vertex_normals_area_weighted(mesh: TriMesh) -> np.ndarray:
    fn, areas = face_normals_areas(mesh)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn * areas[:, None])
    norms = np.linalg.norm(acc, axis=-1, keepdims=True)
    return acc / np.where(norms > 1e-20, norms, 1.0)


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------

def marching_cubes(grid: VoxelGrid, iso: float = 0.0) -> TriMesh:
    """Iso-surface triangulation oriented toward positive SDF values."""
    if grid.channels != 1:
        raise ValueError("marching_cubes expects a scalar grid")
    vol = grid.values[..., 0].detach().numpy()
    if vol.min() > iso or vol.max() < iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=iso, spacing=tuple(grid.voxel_size),
        gradient_direction="ascent")
    verts = verts + grid.bbox.lo
    mesh = _cleanup(TriMesh(verts, faces.astype(np.int64)), grid.bbox.diagonal)
    return _orient_outward(mesh, grid)


def _cleanup(mesh: TriMesh, diag: float) -> TriMesh:
    """Weld near-duplicate vertices and drop degenerate triangles."""
    if len(mesh.vertices) == 0:
        return mesh
    tol = 1e-7 * diag
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True,
                                  return_inverse=True)
    verts = mesh.vertices[first]
    tris = inverse[mesh.triangles]
    distinct = ((tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                & (tris[:, 0] != tris[:, 2]))
    tris = tris[distinct]
    clean = TriMesh(verts, tris)
    _, areas = face_normals_areas(clean)
    return TriMesh(verts, tris[areas > 1e-14 * diag * diag])


def _orient_outward(mesh: TriMesh, grid: VoxelGrid) -> TriMesh:
    """Flip winding if face normals point toward negative SDF."""
    if len(mesh.triangles) == 0:
        return mesh
    fn, areas = face_normals_areas(mesh)
    centroids = mesh.face_corners().mean(axis=1)
    centroids = np.clip(centroids, grid.bbox.lo, grid.bbox.hi)
    grad = sdf_gradient(grid, centroids).detach().numpy()
    score = float(np.sum(np.sum(fn * grad, axis=-1) * areas))
    if score < 0:
        mesh = TriMesh(mesh.vertices, mesh.triangles[:, ::-1].copy())
    return mesh


def vertex_normals_from_sdf(mesh: TriMesh, grid: VoxelGrid) -> np.ndarray:
    """Unit vertex normals from the SDF gradient, with an area-weighted
    face-normal fallback where the gradient vanishes."""
    pts = np.clip(mesh.vertices, grid.bbox.lo, grid.bbox.hi)
    grad = sdf_gradient(grid, pts).detach().numpy()
    mag = np.linalg.norm(grad, axis=-1)
    fallback = vertex_normals_area_weighted(mesh)
    ok = mag >= 1e-8
    normals = np.where(ok[:, None], grad / np.where(ok, mag, 1.0)[:, None],
                       fallback)
    norms = np.linalg.norm(normals, axis=-1, keepdims=True)
    return normals / np.where(norms > 1e-20, norms, 1.0)


# ---------------------------------------------------------------------------
# BVH ray casting
# ---------------------------------------------------------------------------

@njit(cache=True)
def _traverse_kernel(node_lo, node_hi, node_left, node_right, node_start,
                     node_count, tri_order, v0, e1, e2, origins, dirs, t_min,
                     out_t, out_tri, out_u, out_v):
    n_rays = origins.shape[0]
    stack = np.empty(128, dtype=np.int64)
    for r in range(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        inv_x = 1.0 / dx if dx != 0.0 else np.inf
        inv_y = 1.0 / dy if dy != 0.0 else np.inf
        inv_z = 1.0 / dz if dz != 0.0 else np.inf
        best_t = np.inf
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # slab test against current best
            tx0 = (node_lo[node, 0] - ox) * inv_x
            tx1 = (node_hi[node, 0] - ox) * inv_x
            if tx0 > tx1:
                tx0, tx1 = tx1, tx0
            ty0 = (node_lo[node, 1] - oy) * inv_y
            ty1 = (node_hi[node, 1] - oy) * inv_y
            if ty0 > ty1:
                ty0, ty1 = ty1, ty0
            tz0 = (node_lo[node, 2] - oz) * inv_z
            tz1 = (node_hi[node, 2] - oz) * inv_z
            if tz0 > tz1:
                tz0, tz1 = tz1, tz0
            t_enter = max(max(tx0, ty0), max(tz0, t_min))
            t_exit = min(min(tx1, ty1), min(tz1, best_t))
            if t_enter > t_exit:
                continue
            if node_left[node] < 0:  # leaf
                for k in range(node_start[node],
                               node_start[node] + node_count[node]):
                    tri = tri_order[k]
                    # Moller-Trumbore
                    px = dy * e2[tri, 2] - dz * e2[tri, 1]
                    py = dz * e2[tri, 0] - dx * e2[tri, 2]
                    pz = dx * e2[tri, 1] - dy * e2[tri, 0]
                    det = e1[tri, 0] * px + e1[tri, 1] * py + e1[tri, 2] * pz
                    if det > -1e-14 and det < 1e-14:
                        continue
                    inv_det = 1.0 / det
                    sx = ox - v0[tri, 0]
                    sy = oy - v0[tri, 1]
                    sz = oz - v0[tri, 2]
                    u = (sx * px + sy * py + sz * pz) * inv_det
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[tri, 2] - sz * e1[tri, 1]
                    qy = sz * e1[tri, 0] - sx * e1[tri, 2]
                    qz = sx * e1[tri, 1] - sy * e1[tri, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv_det
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[tri, 0] * qx + e2[tri, 1] * qy
                         + e2[tri, 2] * qz) * inv_det
                    if t > t_min and t < best_t:
                        best_t = t
                        best_tri = tri
                        best_u = u
                        best_v = v
            else:
                stack[top] = node_left[node]
                top += 1
                stack[top] = node_right[node]
                top += 1
        out_t[r] = best_t
        out_tri[r] = best_tri
        out_u[r] = best_u
        out_v[r] = best_v


class Bvh:
    """Median-split bounding-volume hierarchy over mesh triangles."""

    LEAF_SIZE = 4

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        corners = mesh.face_corners()
        m = len(mesh.triangles)
        self.v0 = np.ascontiguousarray(corners[:, 0]) if m else np.zeros((0, 3))
        self.e1 = (np.ascontiguousarray(corners[:, 1] - corners[:, 0])
                   if m else np.zeros((0, 3)))
        self.e2 = (np.ascontiguousarray(corners[:, 2] - corners[:, 0])
                   if m else np.zeros((0, 3)))
        self._build(corners)

    def _build(self, corners):
        m = len(self.mesh.triangles)
        lo_all = corners.min(axis=1) if m else np.zeros((0, 3))
        hi_all = corners.max(axis=1) if m else np.zeros((0, 3))
        centroids = corners.mean(axis=1) if m else np.zeros((0, 3))
        nodes_lo, nodes_hi = [], []
        left, right, start, count = [], [], [], []
        order = np.arange(m)

        def build(tri_ids):
            idx = len(nodes_lo)
            nodes_lo.append(lo_all[tri_ids].min(axis=0) if len(tri_ids)
                            else np.zeros(3))
            nodes_hi.append(hi_all[tri_ids].max(axis=0) if len(tri_ids)
                            else np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            if len(tri_ids) <= self.LEAF_SIZE:
                start[idx] = len(self._flat_order)
                count[idx] = len(tri_ids)
                self._flat_order.extend(tri_ids.tolist())
                return idx
            c = centroids[tri_ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            half = len(tri_ids) // 2
            part = tri_ids[np.argsort(c[:, axis], kind="stable")]
            left[idx] = build(part[:half])
            right[idx] = build(part[half:])
            return idx

        self._flat_order = []
        if m:
            import sys
            limit = sys.getrecursionlimit()
            sys.setrecursionlimit(max(limit, 10000))
            build(order)
        else:
            nodes_lo.append(np.zeros(3))
            nodes_hi.append(np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
        self.node_lo = np.ascontiguousarray(nodes_lo)
        self.node_hi = np.ascontiguousarray(nodes_hi)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_count = np.asarray(count, dtype=np.int64)
        self.tri_order = np.asarray(self._flat_order, dtype=np.int64)
        del self._flat_order


def ray_cast_many(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray,
                  t_min: float = 0.0):
    """Nearest hits for a batch of rays.

    Returns (t, tri_index, u, v); misses have t = inf and tri_index = -1.
    Barycentric weights of the hit are (1-u-v, u, v).
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    out_t = np.empty(n)
    out_tri = np.empty(n, dtype=np.int64)
    out_u = np.empty(n)
    out_v = np.empty(n)
    if len(bvh.mesh.triangles) == 0:
        out_t.fill(np.inf)
        out_tri.fill(-1)
        out_u.fill(0.0)
        out_v.fill(0.0)
        return out_t, out_tri, out_u, out_v
    _traverse_kernel(bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_right,
                     bvh.node_start, bvh.node_count, bvh.tri_order,
                     bvh.v0, bvh.e1, bvh.e2, origins, dirs, float(t_min),
                     out_t, out_tri, out_u, out_v)
    return out_t, out_tri, out_u, out_v


def ray_cast(bvh: Bvh, origin, direction, t_min: float = 0.0):
    """Nearest intersection of one ray, or None on a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit length")
    if t_min < 0:
        raise ValueError("t_min must be nonnegative")
    t, tri, u, v = ray_cast_many(bvh, np.asarray(origin)[None],
                                 direction[None], t_min)
    if tri[0] < 0:
        return None
    point = np.asarray(origin) + t[0] * direction
    return point, int(tri[0]), np.array([1.0 - u[0] - v[0], u[0], v[0]])


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------

def chamfer(points_a: np.ndarray, points_b: np.ndarray,
            squared: bool = False) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    if squared:
        return 0.5 * (float(np.mean(d_ab ** 2)) + float(np.mean(d_ba ** 2)))
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples."""
    _, areas = face_normals_areas(mesh)
    if areas.sum() == 0:
        raise ValueError("cannot sample an empty or degenerate mesh")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    c = mesh.face_corners()[tri]
    return c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) \
        + v[:, None] * (c[:, 2] - c[:, 0])


# ---------------------------------------------------------------------------
# UV atlas + bake
# ---------------------------------------------------------------------------

def uv_atlas_and_bake(mesh: TriMesh, texel_res: int):
    """Per-triangle chart atlas with baked vertex attributes.

    Each triangle gets its own right-triangle chart inside a square cell of
    a regular grid, so charts can never overlap. The returned mesh has its
    vertices split per triangle (weld_map points back to the shared mesh).
    Returns (split mesh with uvs, albedo texture (R,R,3), roughness (R,R),
    boolean chart-coverage mask (R,R)); uncovered texels hold dilated copies
    of their nearest covered texel.
    """
    if mesh.albedo is None or mesh.roughness is None:
        raise ValueError("mesh needs per-vertex albedo and roughness to bake")
    m = len(mesh.triangles)
    cells = int(np.ceil(np.sqrt(m)))
    cell_px = texel_res // max(cells, 1)
    margin = 1
    leg = cell_px - 2 * margin - 1
    if leg < 1:
        raise CapacityError(
            f"texel_res {texel_res} cannot hold {m} triangle charts")

    split_verts = mesh.vertices[mesh.triangles].reshape(-1, 3)
    split_tris = np.arange(3 * m, dtype=np.int64).reshape(m, 3)
    weld_map = mesh.triangles.reshape(-1).copy()
    albedo = mesh.albedo[weld_map]
    roughness = mesh.roughness[weld_map]
    normals = mesh.normals[weld_map] if mesh.normals is not None else None

    tex_a = np.zeros((texel_res, texel_res, 3))
    tex_r = np.zeros((texel_res, texel_res))
    covered = np.zeros((texel_res, texel_res), dtype=bool)
    uvs = np.zeros((3 * m, 2))

    # local texel lattice of one chart
    ta, tb = np.meshgrid(np.arange(leg + 1), np.arange(leg + 1), indexing="ij")
    inside = ta + tb <= leg
    la, lb = ta[inside], tb[inside]
    w1 = la / leg
    w2 = lb / leg
    w0 = 1.0 - w1 - w2

    for i in range(m):
        cx, cy = i % cells, i // cells
        x0 = cx * cell_px + margin
        y0 = cy * cell_px + margin
        corner_tex = np.array([[x0, y0], [x0 + leg, y0], [x0, y0 + leg]],
                              dtype=np.float64)
        uvs[3 * i:3 * i + 3] = (corner_tex + 0.5) / texel_res
        xs = x0 + la
        ys = y0 + lb
        va = albedo[3 * i:3 * i + 3]
        vr = roughness[3 * i:3 * i + 3]
        tex_a[xs, ys] = (w0[:, None] * va[0] + w1[:, None] * va[1]
                         + w2[:, None] * va[2])
        tex_r[xs, ys] = w0 * vr[0] + w1 * vr[1] + w2 * vr[2]
        covered[xs, ys] = True

    # dilate uncovered texels from the nearest covered texel
    cov_idx = np.argwhere(covered)
    if len(cov_idx) and not covered.all():
        un_idx = np.argwhere(~covered)
        _, nearest = cKDTree(cov_idx).query(un_idx)
        src = cov_idx[nearest]
        tex_a[un_idx[:, 0], un_idx[:, 1]] = tex_a[src[:, 0], src[:, 1]]
        tex_r[un_idx[:, 0], un_idx[:, 1]] = tex_r[src[:, 0], src[:, 1]]

    out = TriMesh(split_verts, split_tris, normals=normals, uvs=uvs,
                  albedo=albedo, roughness=roughness, weld_map=weld_map)
    return out, tex_a, tex_r, covered


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        if mesh.uvs is not None:
            for uv in mesh.uvs:
                f.write(f"vt {uv[0]:.17g} {uv[1]:.17g}\n")
        if mesh.normals is not None:
            for n in mesh.normals:
                f.write(f"vn {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n")
        has_uv = mesh.uvs is not None
        has_n = mesh.normals is not None
        for t in mesh.triangles:
            ids = [i + 1 for i in t]
            if has_uv and has_n:
                f.write("f {0}/{0}/{0} {1}/{1}/{1} {2}/{2}/{2}\n".format(*ids))
            elif has_uv:
                f.write("f {0}/{0} {1}/{1} {2}/{2}\n".format(*ids))
            elif has_n:
                f.write("f {0}//{0} {1}//{1} {2}//{2}\n".format(*ids))
            else:
                f.write("f {0} {1} {2}\n".format(*ids))


def load_obj(path) -> TriMesh:
    verts, uvs, normals, faces = [], [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(p) for p in parts[1:3]])
            elif parts[0] == "vn":
                normals.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(
        np.asarray(verts), np.asarray(faces, dtype=np.int64),
        normals=np.asarray(normals) if normals else None,
        uvs=np.asarray(uvs) if uvs else None)


def save_mesh_binary(mesh: TriMesh, path) -> None:
    """Exact (float64) round-trip format for internal checkpoints."""
    flags = ((mesh.normals is not None) | ((mesh.uvs is not None) << 1)
             | ((mesh.albedo is not None) << 2)
             | ((mesh.roughness is not None) << 3)
             | ((mesh.weld_map is not None) << 4))
    with open(path, "wb") as f:
        f.write(MESH_MAGIC)
        f.write(struct.pack("<3I", 1, len(mesh.vertices), len(mesh.triangles)))
        f.write(struct.pack("<I", flags))
        f.write(mesh.vertices.astype("<f8").tobytes())
        f.write(mesh.triangles.astype("<i8").tobytes())
        for attr in (mesh.normals, mesh.uvs, mesh.albedo):
            if attr is not None:
                f.write(np.ascontiguousarray(attr).astype("<f8").tobytes())
        if mesh.roughness is not None:
            f.write(np.ascontiguousarray(mesh.roughness).astype("<f8").tobytes())
        if mesh.weld_map is not None:
            f.write(np.ascontiguousarray(mesh.weld_map).astype("<i8").tobytes())


def load_mesh_binary(path) -> TriMesh:
    with open(path, "rb") as f:
        if f.read(4) != MESH_MAGIC:
            raise ValueError("not a mesh checkpoint")
        version, nv, nt = struct.unpack("<3I", f.read(12))
        if version != 1:
            raise ValueError(f"unsupported mesh format version {version}")
        (flags,) = struct.unpack("<I", f.read(4))
        verts = np.frombuffer(f.read(24 * nv), dtype="<f8").reshape(nv, 3)
        tris = np.frombuffer(f.read(24 * nt), dtype="<i8").reshape(nt, 3)
        normals = uvs = albedo = roughness = weld = None
        if flags & 1:
            normals = np.frombuffer(f.read(24 * nv), dtype="<f8").reshape(nv, 3)
        if flags & 2:
            uvs = np.frombuffer(f.read(16 * nv), dtype="<f8").reshape(nv, 2)
        if flags & 4:
            albedo = np.frombuffer(f.read(24 * nv), dtype="<f8").reshape(nv, 3)
        if flags & 8:
            roughness = np.frombuffer(f.read(8 * nv), dtype="<f8")
        if flags & 16:
            weld = np.frombuffer(f.read(8 * nv), dtype="<i8")
        return TriMesh(verts.copy(), tris.copy(),
                       normals=None if normals is None else normals.copy(),
                       uvs=None if uvs is None else uvs.copy(),
                       albedo=None if albedo is None else albedo.copy(),
                       roughness=None if roughness is None else roughness.copy(),
                       weld_map=None if weld is None else weld.copy())
