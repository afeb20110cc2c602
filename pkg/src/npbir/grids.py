"""Dense voxel grids, trilinear interpolation, and the small radiance head.

Grids store one value vector per grid point; a grid of resolution
(nx, ny, nz) spans its bounding box with grid points on the box corners,
so the voxel size is extent / (n - 1) per axis.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import OutOfDomainError

DTYPE = torch.float64

GRID_MAGIC = b"NPBG"
SCENE_MAGIC = b"NPBS"
FORMAT_VERSION = 1


@dataclass
class Aabb:
    """Axis-aligned box in world units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ValueError("Aabb corners must be 3-vectors")
        if not np.all(self.hi > self.lo):
            raise ValueError("Aabb must have strictly positive extent on all axes")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Inclusive containment test for points of shape (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def contains_box(self, other: "Aabb") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def scaled(self, factor: float) -> "Aabb":
        """Concentric box with extent scaled by `factor`."""
        c = 0.5 * (self.lo + self.hi)
        h = 0.5 * self.extent * factor
        return Aabb(c - h, c + h)


def _contains_torch(box: Aabb, x: torch.Tensor) -> torch.Tensor:
    lo = torch.as_tensor(box.lo, dtype=x.dtype)
    hi = torch.as_tensor(box.hi, dtype=x.dtype)
    return ((x >= lo) & (x <= hi)).all(dim=-1)


@dataclass
class VoxelGrid:
    """Dense grid of per-point value vectors (C=1 for an SDF)."""

    resolution: tuple[int, int, int]
    bbox: Aabb
    values: torch.Tensor  # (nx, ny, nz, C)

    def __post_init__(self):
        nx, ny, nz = self.resolution
        if min(nx, ny, nz) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        if self.values.shape[:3] != (nx, ny, nz):
            raise ValueError(
                f"value array shape {tuple(self.values.shape)} does not match "
                f"resolution {self.resolution}"
            )
        if self.values.dim() != 4:
            raise ValueError("values must have shape (nx, ny, nz, C)")

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def voxel_size(self) -> np.ndarray:
        n = np.asarray(self.resolution, dtype=np.float64)
        return self.bbox.extent / (n - 1.0)

    @classmethod
    def constant(cls, resolution, bbox: Aabb, value) -> "VoxelGrid":
        value = torch.as_tensor(value, dtype=DTYPE).reshape(-1)
        nx, ny, nz = resolution
        vals = value.expand(nx, ny, nz, value.numel()).clone()
        return cls(tuple(resolution), bbox, vals)

    @classmethod
    def from_function(cls, resolution, bbox: Aabb, fn) -> "VoxelGrid":
        """Sample `fn(points) -> (N, C)` at every grid point."""
        pts = grid_points(resolution, bbox)
        vals = fn(pts.reshape(-1, 3))
        vals = torch.as_tensor(vals, dtype=DTYPE)
        if vals.dim() == 1:
            vals = vals[:, None]
        nx, ny, nz = resolution
        return cls(tuple(resolution), bbox, vals.reshape(nx, ny, nz, -1))


def grid_points(resolution, bbox: Aabb) -> torch.Tensor:
    """World coordinates of every grid point, shape (nx, ny, nz, 3)."""
    axes = [
        torch.linspace(bbox.lo[d], bbox.hi[d], resolution[d], dtype=DTYPE)
        for d in range(3)
    ]
    xs, ys, zs = torch.meshgrid(*axes, indexing="ij")
    return torch.stack([xs, ys, zs], dim=-1)


def _corner_setup(grid: VoxelGrid, x: torch.Tensor):
    """Cell indices and fractional offsets for points of shape (N, 3)."""
    lo = torch.as_tensor(grid.bbox.lo, dtype=DTYPE)
    hi = torch.as_tensor(grid.bbox.hi, dtype=DTYPE)
    n = torch.as_tensor(grid.resolution, dtype=DTYPE)
    u = (x - lo) / (hi - lo) * (n - 1.0)
    i0 = torch.clamp(u.floor().long(), torch.zeros(3, dtype=torch.long),
                     torch.as_tensor(grid.resolution, dtype=torch.long) - 2)
    f = u - i0.to(DTYPE)
    return i0, f


def _gather_corners(grid: VoxelGrid, i0: torch.Tensor):
    """The 8 corner value vectors per query, each of shape (N, C)."""
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    v = grid.values
    return [
        v[ix + dx, iy + dy, iz + dz]
        for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)
    ]


def interp(grid: VoxelGrid, x) -> torch.Tensor:
    """Trilinear interpolation of grid values at world points x (..., 3)."""
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.dim() == 1
    pts = x.reshape(-1, 3)
    if not bool(_contains_torch(grid.bbox, pts).all()):
        raise OutOfDomainError("query point outside grid bounding box")
    i0, f = _corner_setup(grid, pts)
    nx, ny, nz = grid.resolution
    # one flat gather for all 8 corners keeps the autograd graph small
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = torch.tensor([((dx * ny + dy) * nz + dz)
                         for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
                        dtype=torch.long)
    corners = grid.values.reshape(-1, grid.channels)[
        base[:, None] + offs[None, :]]                       # (N, 8, C)
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    wx = torch.cat([1 - fx, fx], dim=1)                      # (N, 2)
    wy = torch.cat([1 - fy, fy], dim=1)
    wz = torch.cat([1 - fz, fz], dim=1)
    w = (wx[:, :, None, None] * wy[:, None, :, None]
         * wz[:, None, None, :]).reshape(-1, 8)              # (N, 8)
    out = (corners * w[:, :, None]).sum(dim=1)
    if single:
        return out[0]
    return out.reshape(*x.shape[:-1], grid.channels)


def sdf_gradient(grid: VoxelGrid, x) -> torch.Tensor:
    """Analytic spatial gradient of the trilinear interpolant at x.

    Piecewise linear per cell; on cell faces the cell owning the point
    (lower cell clamped at the boundary) is used.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.dim() == 1
    pts = x.reshape(-1, 3)
    if not bool(_contains_torch(grid.bbox, pts).all()):
        raise OutOfDomainError("query point outside grid bounding box")
    i0, f = _corner_setup(grid, pts)
    (c000, c001, c010, c011, c100, c101, c110, c111) = _gather_corners(grid, i0)
    fx, fy, fz = (f[:, d:d + 1] for d in range(3))
    # Derivatives of the trilinear blend with respect to fx, fy, fz.
    dfx = ((c100 - c000) * (1 - fy) * (1 - fz) + (c101 - c001) * (1 - fy) * fz
           + (c110 - c010) * fy * (1 - fz) + (c111 - c011) * fy * fz)
    dfy = ((c010 - c000) * (1 - fx) * (1 - fz) + (c011 - c001) * (1 - fx) * fz
           + (c110 - c100) * fx * (1 - fz) + (c111 - c101) * fx * fz)
    dfz = ((c001 - c000) * (1 - fx) * (1 - fy) + (c011 - c010) * (1 - fx) * fy
           + (c101 - c100) * fx * (1 - fy) + (c111 - c110) * fx * fy)
    scale = torch.as_tensor(
        (np.asarray(grid.resolution) - 1.0) / grid.bbox.extent, dtype=DTYPE)
    g = torch.stack([dfx, dfy, dfz], dim=-1) * scale  # (N, C, 3)
    if grid.channels == 1:
        g = g[:, 0, :]
        if single:
            return g[0]
        return g.reshape(*x.shape[:-1], 3)
    if single:
        return g[0]
    return g.reshape(*x.shape[:-1], grid.channels, 3)


def upscale(grid: VoxelGrid, factor: int = 2) -> VoxelGrid:
    """Refine the lattice to roughly double resolution per axis.

    The new resolution is 2n-1, which halves the voxel size and keeps every
    old grid point on the new lattice with its value unchanged.
    """
    if factor != 2:
        raise ValueError("only factor 2 upscaling is supported")
    new_res = tuple(2 * n - 1 for n in grid.resolution)
    pts = grid_points(new_res, grid.bbox).reshape(-1, 3)
    with torch.no_grad():
        vals = interp(grid, pts)
    return VoxelGrid(new_res, grid.bbox, vals.reshape(*new_res, grid.channels))


# ---------------------------------------------------------------------------
# Radiance head
# ---------------------------------------------------------------------------

def view_encoding(v: torch.Tensor, degree: int = 4) -> torch.Tensor:
    """Frequency encoding of directions: sin/cos of 2^k * v per axis."""
    feats = []
    for k in range(degree):
        s = (2.0 ** k) * v
        feats.append(torch.sin(s))
        feats.append(torch.cos(s))
    return torch.cat(feats, dim=-1)


def view_encoding_width(degree: int = 4) -> int:
    return 6 * degree


@dataclass
class RadianceHead:
    """One-hidden-layer MLP mapping (feature, encoded view dir) to radiance.

    ReLU hidden activation; softplus output so radiance stays nonnegative
    and unbounded above (HDR).
    """

    w1: torch.Tensor  # (hidden, in)
    b1: torch.Tensor  # (hidden,)
    w2: torch.Tensor  # (3, hidden)
    b2: torch.Tensor  # (3,)
    degree: int = 4

    @classmethod
    def create(cls, feat_width: int = 12, hidden: int = 128, degree: int = 4,
               generator: torch.Generator | None = None) -> "RadianceHead":
        din = feat_width + view_encoding_width(degree)
        def rand(*shape, scale):
            return scale * torch.randn(*shape, dtype=DTYPE, generator=generator)
        return cls(
            w1=rand(hidden, din, scale=(2.0 / din) ** 0.5),
            b1=torch.zeros(hidden, dtype=DTYPE),
            w2=rand(3, hidden, scale=(1.0 / hidden) ** 0.5),
            b2=torch.zeros(3, dtype=DTYPE),
            degree=degree,
        )

    @property
    def feat_width(self) -> int:
        return int(self.w1.shape[1]) - view_encoding_width(self.degree)

    def forward(self, feat: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
        z = torch.cat([feat, view_encoding(view_dir, self.degree)], dim=-1)
        h = torch.relu(z @ self.w1.T + self.b1)
        return torch.nn.functional.softplus(h @ self.w2.T + self.b2)

    def parameters(self) -> list[torch.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

@dataclass
class SdfScene:
    """Dual fg/bg SDF + feature grids, a radiance head, and sharpness."""

    fg_sdf: VoxelGrid
    fg_feat: VoxelGrid
    bg_sdf: VoxelGrid
    bg_feat: VoxelGrid
    head: RadianceHead
    sharpness: float
    # Raw parameter; softplus applied when compositing so the learned
    # background color stays nonnegative.
    bg_color_raw: torch.Tensor = field(
        default_factory=lambda: torch.full((3,), -2.0, dtype=DTYPE))

    def __post_init__(self):
        if not self.bg_bbox.contains_box(self.fg_bbox):
            raise ValueError("fg_bbox must lie inside bg_bbox")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")

    @property
    def fg_bbox(self) -> Aabb:
        return self.fg_sdf.bbox

    @property
    def bg_bbox(self) -> Aabb:
        return self.bg_sdf.bbox

    @property
    def bg_color(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.bg_color_raw)

    @classmethod
    def create(cls, fg_bbox: Aabb, fg_res: int = 96, bg_res: int = 48,
               bg_scale: float = 16.0, feat_width: int = 12, hidden: int = 128,
               sharpness: float = 30.0, seed: int = 0,
               init_sdf_radius: float | None = None) -> "SdfScene":
        """Fresh scene; the foreground SDF starts as a centered sphere."""
        gen = torch.Generator().manual_seed(seed)
        bg_bbox = fg_bbox.scaled(bg_scale)
        center = torch.as_tensor(0.5 * (fg_bbox.lo + fg_bbox.hi), dtype=DTYPE)
        if init_sdf_radius is None:
            init_sdf_radius = 0.4 * 0.5 * float(np.min(fg_bbox.extent))

        def sphere_sdf(pts):
            return torch.linalg.norm(pts - center, dim=-1) - init_sdf_radius

        fg_sdf = VoxelGrid.from_function((fg_res,) * 3, fg_bbox, sphere_sdf)
        # Background starts empty (positive SDF everywhere).
        bg_sdf = VoxelGrid.constant((bg_res,) * 3, bg_bbox,
                                    [0.5 * float(np.max(bg_bbox.extent))])
        feat0 = 0.01 * torch.randn(feat_width, dtype=DTYPE, generator=gen)
        fg_feat = VoxelGrid.constant((fg_res,) * 3, fg_bbox, feat0)
        bg_feat = VoxelGrid.constant((bg_res,) * 3, bg_bbox, feat0.clone())
        head = RadianceHead.create(feat_width, hidden, generator=gen)
        return cls(fg_sdf, fg_feat, bg_sdf, bg_feat, head, sharpness)

    def in_foreground(self, x: torch.Tensor) -> torch.Tensor:
        """Region tag; points on the fg box surface count as foreground."""
        return _contains_torch(self.fg_bbox, x)

    def parameters(self) -> list[torch.Tensor]:
        return ([self.fg_sdf.values, self.bg_sdf.values,
                 self.fg_feat.values, self.bg_feat.values]
                + self.head.parameters() + [self.bg_color_raw])


def query_sdf(scene: SdfScene, x) -> torch.Tensor:
    """Signed distance from the fg grid inside fg_bbox, else the bg grid."""
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.dim() == 1
    pts = x.reshape(-1, 3)
    if not bool(_contains_torch(scene.bg_bbox, pts).all()):
        raise OutOfDomainError("query point outside background bounding box")
    fg = scene.in_foreground(pts)
    out = torch.zeros(pts.shape[0], dtype=DTYPE)
    if bool(fg.any()):
        out[fg] = interp(scene.fg_sdf, pts[fg])[:, 0]
    if bool((~fg).any()):
        out[~fg] = interp(scene.bg_sdf, pts[~fg])[:, 0]
    if single:
        return out[0]
    return out.reshape(x.shape[:-1])


def query_radiance(scene: SdfScene, x, v) -> torch.Tensor:
    """Outgoing radiance at x for viewing direction v (unit length)."""
    x = torch.as_tensor(x, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    single = x.dim() == 1
    pts = x.reshape(-1, 3)
    dirs = v.reshape(-1, 3).expand(pts.shape[0], 3)
    norms = torch.linalg.norm(dirs, dim=-1)
    if not bool(torch.all(torch.abs(norms - 1.0) <= 1e-6)):
        raise ValueError("view directions must be unit length within 1e-6")
    if not bool(_contains_torch(scene.bg_bbox, pts).all()):
        raise OutOfDomainError("query point outside background bounding box")
    fg = scene.in_foreground(pts)
    feat = torch.zeros(pts.shape[0], scene.fg_feat.channels, dtype=DTYPE)
    if bool(fg.any()):
        feat[fg] = interp(scene.fg_feat, pts[fg])
    if bool((~fg).any()):
        feat[~fg] = interp(scene.bg_feat, pts[~fg])
    out = scene.head.forward(feat, dirs)
    if single:
        return out[0]
    return out.reshape(*x.shape[:-1], 3)


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------

def write_grid(f, grid: VoxelGrid) -> None:
    nx, ny, nz = grid.resolution
    f.write(GRID_MAGIC)
    f.write(struct.pack("<5I", FORMAT_VERSION, nx, ny, nz, grid.channels))
    f.write(struct.pack("<6d", *grid.bbox.lo, *grid.bbox.hi))
    vals = grid.values.detach().numpy().astype("<f4")
    # x-fastest point order, channels contiguous per point
    f.write(np.ascontiguousarray(vals.transpose(2, 1, 0, 3)).tobytes())


def read_grid(f) -> VoxelGrid:
    magic = f.read(4)
    if magic != GRID_MAGIC:
        raise ValueError(f"bad grid magic {magic!r}")
    version, nx, ny, nz, c = struct.unpack("<5I", f.read(20))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported grid format version {version}")
    box = struct.unpack("<6d", f.read(48))
    bbox = Aabb(np.array(box[:3]), np.array(box[3:]))
    raw = np.frombuffer(f.read(4 * nx * ny * nz * c), dtype="<f4")
    vals = raw.reshape(nz, ny, nx, c).transpose(2, 1, 0, 3)
    return VoxelGrid((nx, ny, nz),
                     bbox, torch.as_tensor(vals.copy(), dtype=DTYPE))


def write_head(f, head: RadianceHead) -> None:
    hidden, din = head.w1.shape
    f.write(struct.pack("<4I", din, hidden, 3, head.degree))
    for t in (head.w1, head.b1, head.w2, head.b2):
        f.write(t.detach().numpy().astype("<f4").tobytes())


def read_head(f) -> RadianceHead:
    din, hidden, dout, degree = struct.unpack("<4I", f.read(16))
    def block(*shape):
        n = int(np.prod(shape))
        raw = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
        return torch.as_tensor(raw.copy(), dtype=DTYPE)
    return RadianceHead(block(hidden, din), block(hidden),
                        block(dout, hidden), block(dout), degree=degree)


def save_grid(grid: VoxelGrid, path) -> None:
    with open(path, "wb") as f:
        write_grid(f, grid)


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as f:
        return read_grid(f)


def save_scene(scene: SdfScene, path) -> None:
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for g in (scene.fg_sdf, scene.fg_feat, scene.bg_sdf, scene.bg_feat):
            write_grid(f, g)
        write_head(f, scene.head)
        f.write(struct.pack("<d", scene.sharpness))
        f.write(scene.bg_color_raw.detach().numpy().astype("<f8").tobytes())


def load_scene(path) -> SdfScene:
    with open(path, "rb") as f:
        if f.read(4) != SCENE_MAGIC:
            raise ValueError("not a scene checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported scene format version {version}")
        grids = [read_grid(f) for _ in range(4)]
        head = read_head(f)
        (sharpness,) = struct.unpack("<d", f.read(8))
        bg_raw = np.frombuffer(f.read(24), dtype="<f8")
        return SdfScene(*grids, head, sharpness,
                        torch.as_tensor(bg_raw.copy(), dtype=DTYPE))
