"""Microfacet BRDF, spherical-Gaussian mixtures, and environment maps.

Directions are unit 3-vectors in world space. Environment maps use a
latitude-longitude parameterization with +Y up and phi = 0 at +X:
theta = acos(y) maps to rows, phi = atan2(z, x) to columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .grids import DTYPE

ROUGHNESS_MIN = 0.01
ROUGHNESS_MAX = 1.0


@dataclass
class BrdfParams:
    """Albedo in [0,1)^3, roughness clamped to [0.01, 1], constant F0."""

    albedo: torch.Tensor     # (..., 3)
    roughness: torch.Tensor  # (...)
    fresnel_f0: float = 0.04

    def __post_init__(self):
        self.albedo = torch.as_tensor(self.albedo, dtype=DTYPE)
        self.roughness = torch.as_tensor(self.roughness, dtype=DTYPE)


@dataclass
class SgMixture:
    """Spherical Gaussian lobes a * exp(lambda * (mu . w - 1))."""

    axes: torch.Tensor        # (L, 3) unit
    lambdas: torch.Tensor     # (L,) >= 0
    amplitudes: torch.Tensor  # (L, 3) >= 0

    def __post_init__(self):
        self.axes = torch.as_tensor(self.axes, dtype=DTYPE)
        self.lambdas = torch.as_tensor(self.lambdas, dtype=DTYPE)
        self.amplitudes = torch.as_tensor(self.amplitudes, dtype=DTYPE)
        norms = torch.linalg.norm(self.axes, dim=-1)
        if not bool(torch.all((norms - 1.0).abs() <= 1e-6)):
            raise ValueError("lobe axes must be unit length within 1e-6")

    @classmethod
    def init_fibonacci(cls, n_lobes: int = 256, sharpness: float = 25.0,
                       amplitude: float = 1.0) -> "SgMixture":
        """Lobes on a Fibonacci sphere covering with uniform amplitude."""
        axes = fibonacci_sphere(n_lobes)
        return cls(torch.as_tensor(axes, dtype=DTYPE),
                   torch.full((n_lobes,), sharpness, dtype=DTYPE),
                   torch.full((n_lobes, 3), amplitude, dtype=DTYPE))

    def parameters(self) -> list[torch.Tensor]:
        return [self.axes, self.lambdas, self.amplitudes]

    def constrained(self) -> "SgMixture":
        """View with axes normalized and lambda/amplitude clamped >= 0;
        keeps gradients flowing to the raw parameters."""
        axes = self.axes / torch.linalg.norm(self.axes, dim=-1, keepdim=True)
        return SgMixture(axes, torch.clamp(self.lambdas, min=0.0),
                         torch.clamp(self.amplitudes, min=0.0))


@dataclass
class EnvMap:
    """Latitude-longitude radiance grid, rows = theta, cols = phi."""

    values: torch.Tensor  # (H, W, 3) >= 0

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=DTYPE)
        if self.values.dim() != 3 or self.values.shape[2] != 3:
            raise ValueError("environment map must have shape (H, W, 3)")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly uniform unit directions."""
    i = np.arange(n) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, 1.0))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=-1)


def direction_to_latlong(w) -> tuple:
    """(u, v) in [0,1)x[0,1]: u from phi (wrapped), v from theta."""
    w = torch.as_tensor(w, dtype=DTYPE)
    theta = torch.acos(torch.clamp(w[..., 1], -1.0, 1.0))
    phi = torch.atan2(w[..., 2], w[..., 0]) % (2.0 * math.pi)
    return phi / (2.0 * math.pi), theta / math.pi


def latlong_to_direction(u, v) -> torch.Tensor:
    u = torch.as_tensor(u, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    theta = v * math.pi
    phi = u * 2.0 * math.pi
    st = torch.sin(theta)
    return torch.stack([st * torch.cos(phi), torch.cos(theta),
                        st * torch.sin(phi)], dim=-1)


def texel_center_directions(width: int, height: int) -> torch.Tensor:
    ys = (torch.arange(height, dtype=DTYPE) + 0.5) / height
    xs = (torch.arange(width, dtype=DTYPE) + 0.5) / width
    v, u = torch.meshgrid(ys, xs, indexing="ij")
    return latlong_to_direction(u, v)


# ---------------------------------------------------------------------------
# Spherical Gaussians
# ---------------------------------------------------------------------------

def sg_eval(mixture: SgMixture, w) -> torch.Tensor:
    """Mixture radiance toward unit directions w of shape (..., 3)."""
    w = torch.as_tensor(w, dtype=DTYPE)
    cos = w.reshape(-1, 3) @ mixture.axes.T  # (N, L)
    e = torch.exp(mixture.lambdas * (cos - 1.0))
    out = e @ mixture.amplitudes  # (N, 3)
    return out.reshape(*w.shape[:-1], 3)


def envmap_from_sg(mixture: SgMixture, width: int, height: int) -> EnvMap:
    """Pixelize the mixture by evaluating it at texel center directions."""
    if width < 2 or height < 2:
        raise ValueError("environment map needs at least 2x2 texels")
    dirs = texel_center_directions(width, height)
    return EnvMap(sg_eval(mixture, dirs))


def envmap_lookup(env: EnvMap | torch.Tensor, w) -> torch.Tensor:
    """Bilinear lookup with longitudinal wraparound and latitude clamp."""
    values = env.values if isinstance(env, EnvMap) else env
    h, width = values.shape[0], values.shape[1]
    u, v = direction_to_latlong(w)
    x = u * width - 0.5
    y = torch.clamp(v * h - 0.5, 0.0, h - 1.0)
    x0 = torch.floor(x)
    y0 = torch.floor(y).long().clamp(0, h - 2) if h > 1 else torch.zeros_like(y).long()
    fx = (x - x0)[..., None]
    fy = (y - y0.to(DTYPE))[..., None]
    x0i = x0.long() % width
    x1i = (x0.long() + 1) % width
    c00 = values[y0, x0i]
    c01 = values[y0, x1i]
    c10 = values[y0 + 1, x0i]
    c11 = values[y0 + 1, x1i]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# Microfacet BRDF
# ---------------------------------------------------------------------------

def _clamped_dot(a, b):
    return torch.clamp((a * b).sum(dim=-1), min=0.0)


def ggx_distribution(n_dot_h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    a2 = alpha * alpha
    denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def smith_g_height_correlated(n_dot_i, n_dot_o, alpha):
    a2 = alpha * alpha
    li = n_dot_o * torch.sqrt(a2 + (1.0 - a2) * n_dot_i * n_dot_i)
    lo = n_dot_i * torch.sqrt(a2 + (1.0 - a2) * n_dot_o * n_dot_o)
    return 2.0 * n_dot_i * n_dot_o / (li + lo)


def schlick_fresnel(f0: float, h_dot_o: torch.Tensor) -> torch.Tensor:
    m = torch.clamp(1.0 - h_dot_o, 0.0, 1.0)
    return f0 + (1.0 - f0) * m ** 5


def brdf_eval(p: BrdfParams, n, wi, wo) -> torch.Tensor:
    """Lambert diffuse plus GGX/Smith/Schlick specular, alpha = roughness^2.

    The diffuse lobe is scaled by (1 - F0) so the dielectric single-scatter
    model never gains energy at normal incidence. Zero below the horizon.
    """
    n = torch.as_tensor(n, dtype=DTYPE)
    wi = torch.as_tensor(wi, dtype=DTYPE)
    wo = torch.as_tensor(wo, dtype=DTYPE)
    n_dot_i = (n * wi).sum(dim=-1)
    n_dot_o = (n * wo).sum(dim=-1)
    valid = (n_dot_i > 0) & (n_dot_o > 0)
    rough = torch.clamp(p.roughness, ROUGHNESS_MIN, ROUGHNESS_MAX)
    alpha = rough * rough
    h = wi + wo
    h = h / torch.clamp(torch.linalg.norm(h, dim=-1, keepdim=True), min=1e-20)
    n_dot_h = _clamped_dot(n, h)
    h_dot_o = _clamped_dot(h, wo)
    f0 = p.fresnel_f0
    d = ggx_distribution(n_dot_h, alpha)
    f = schlick_fresnel(f0, h_dot_o)
    g = smith_g_height_correlated(torch.clamp(n_dot_i, min=1e-12),
                                  torch.clamp(n_dot_o, min=1e-12), alpha)
    spec = d * f * g / (4.0 * torch.clamp(n_dot_i, min=1e-12)
                        * torch.clamp(n_dot_o, min=1e-12))
    if f0 == 0.0:
        # index-matched dielectric: no reflection at any angle (the Schlick
        # lerp would still brighten grazing angles, which is unphysical here)
        spec = torch.zeros_like(spec)
    diffuse = (1.0 - f0) * p.albedo / math.pi
    out = diffuse + spec[..., None]
    return torch.where(valid[..., None], out, torch.zeros_like(out))


def _tangent_frame(n: torch.Tensor):
    """Deterministic orthonormal tangent/bitangent for unit normals."""
    a = torch.where(n[..., 2:3].abs() < 0.9,
                    torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand_as(n),
                    torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE).expand_as(n))
    t = torch.cross(a, n, dim=-1)
    t = t / torch.linalg.norm(t, dim=-1, keepdim=True)
    b = torch.cross(n, t, dim=-1)
    return t, b


def specular_weight(p: BrdfParams) -> torch.Tensor:
    """Probability of taking the specular strategy in brdf_sample.

    Depends only on F0, not on the optimized albedo/roughness, so the
    sampling density stays fixed while appearance parameters move.
    """
    lum = p.albedo.mean(dim=-1)
    f0 = p.fresnel_f0
    if f0 == 0.0:
        return torch.zeros_like(lum)
    return torch.full_like(lum.detach(), min(0.9, 4.0 * f0))


def brdf_pdf(p: BrdfParams, n, wi, wo) -> torch.Tensor:
    """Mixture density of brdf_sample at wi (cosine + GGX half-vector)."""
    n = torch.as_tensor(n, dtype=DTYPE)
    wi = torch.as_tensor(wi, dtype=DTYPE)
    wo = torch.as_tensor(wo, dtype=DTYPE)
    n_dot_i = _clamped_dot(n, wi)
    pdf_cos = n_dot_i / math.pi
    w_spec = specular_weight(p)
    rough = torch.clamp(p.roughness, ROUGHNESS_MIN, ROUGHNESS_MAX)
    alpha = rough * rough
    h = wi + wo
    h = h / torch.clamp(torch.linalg.norm(h, dim=-1, keepdim=True), min=1e-20)
    n_dot_h = _clamped_dot(n, h)
    h_dot_o = _clamped_dot(h, wo)
    pdf_spec = ggx_distribution(n_dot_h, alpha) * n_dot_h \
        / torch.clamp(4.0 * h_dot_o, min=1e-12)
    return (1.0 - w_spec) * pdf_cos + w_spec * pdf_spec


def brdf_sample(p: BrdfParams, n, wo, u):
    """Importance-sample an incident direction above the horizon.

    u holds two uniforms per sample, shape (..., 2). Specular draws whose
    reflected direction would fall below the horizon are replaced by a
    cosine-hemisphere draw from rescrambled uniforms; the reported pdf is
    the cosine/GGX mixture density (the tiny below-horizon mass is
    neglected). Returns (wi, pdf).
    """
    n = torch.as_tensor(n, dtype=DTYPE)
    wo = torch.as_tensor(wo, dtype=DTYPE)
    u = torch.as_tensor(u, dtype=DTYPE)
    if bool((_clamped_dot(n, wo) <= 0).any()):
        raise ValueError("brdf_sample requires wo above the horizon")
    w_spec = specular_weight(p)
    take_spec = u[..., 0] < w_spec
    u0 = torch.where(take_spec, u[..., 0] / torch.clamp(w_spec, min=1e-12),
                     (u[..., 0] - w_spec) / torch.clamp(1 - w_spec, min=1e-12))
    u0 = torch.clamp(u0, 0.0, 1.0 - 1e-12)
    u1 = u[..., 1]
    t, b = _tangent_frame(n)

    # cosine hemisphere
    r = torch.sqrt(u0)
    phi = 2.0 * math.pi * u1
    local_cos = torch.stack([r * torch.cos(phi), r * torch.sin(phi),
                             torch.sqrt(torch.clamp(1 - u0, min=0.0))], dim=-1)
    wi_cos = (local_cos[..., 0:1] * t + local_cos[..., 1:2] * b
              + local_cos[..., 2:3] * n)

    # GGX half-vector then mirror reflect
    rough = torch.clamp(p.roughness, ROUGHNESS_MIN, ROUGHNESS_MAX)
    alpha = rough * rough
    cos_th = torch.sqrt((1.0 - u0) / (1.0 + (alpha * alpha - 1.0) * u0))
    sin_th = torch.sqrt(torch.clamp(1.0 - cos_th * cos_th, min=0.0))
    h = (sin_th[..., None] * torch.cos(phi)[..., None] * t
         + sin_th[..., None] * torch.sin(phi)[..., None] * b
         + cos_th[..., None] * n)
    wi_spec = 2.0 * (wo * h).sum(dim=-1, keepdim=True) * h - wo

    wi = torch.where(take_spec[..., None], wi_spec, wi_cos)
    below = (wi * n).sum(dim=-1) <= 0
    if bool(below.any()):
        # rescramble and fall back to a cosine draw
        u0b = (u0 + 0.61803398874989485) % 1.0
        rb = torch.sqrt(u0b)
        phib = 2.0 * math.pi * ((u1 + 0.38196601125010515) % 1.0)
        local = torch.stack([rb * torch.cos(phib), rb * torch.sin(phib),
                             torch.sqrt(torch.clamp(1 - u0b, min=0.0))], dim=-1)
        wi_fb = (local[..., 0:1] * t + local[..., 1:2] * b
                 + local[..., 2:3] * n)
        wi = torch.where(below[..., None], wi_fb, wi)
    wi = wi / torch.linalg.norm(wi, dim=-1, keepdim=True)
    return wi, brdf_pdf(p, n, wi, wo)


# ---------------------------------------------------------------------------
# Averaged background observation
# ---------------------------------------------------------------------------

def averaged_background(dataset, mesh, width: int, height: int):
    """Mean background-pixel intensity binned by viewing direction.

    Pixels whose camera rays hit the mesh are excluded. Returns
    (EnvMap of texel means, boolean coverage mask (H, W)).
    """
    from .geometry import Bvh, ray_cast_many
    total = np.zeros((height, width, 3))
    count = np.zeros((height, width), dtype=np.int64)
    bvh = Bvh(mesh) if len(mesh.triangles) else None
    for view in dataset.views:
        o, d = view.camera.all_rays()
        if bvh is not None:
            t_hit, _, _, _ = ray_cast_many(bvh, o, d)
            miss = ~np.isfinite(t_hit)
        else:
            miss = np.ones(len(d), dtype=bool)
        if not miss.any():
            continue
        dirs = d[miss]
        colors = view.image.reshape(-1, 3)[miss]
        u, v = direction_to_latlong(torch.as_tensor(dirs))
        x = np.minimum((u.numpy() * width).astype(np.int64), width - 1)
        y = np.minimum((v.numpy() * height).astype(np.int64), height - 1)
        np.add.at(total, (y, x), colors)
        np.add.at(count, (y, x), 1)
    covered = count > 0
    mean = total / np.maximum(count, 1)[:, :, None]
    return EnvMap(torch.as_tensor(mean, dtype=DTYPE)), covered
