"""Spherical Gaussian, environment map, and BRDF tests."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from npbir.shading import (BrdfParams, SgMixture, EnvMap, sg_eval,
                           envmap_from_sg, envmap_lookup, brdf_eval,
                           brdf_pdf, brdf_sample, direction_to_latlong,
                           latlong_to_direction, texel_center_directions,
                           schlick_fresnel, averaged_background)

F64 = torch.float64


def unit(v):
    v = torch.as_tensor(v, dtype=F64)
    return v / torch.linalg.norm(v)


def test_sg_lobe_scalar_oracle():
    mu = unit([0.3, 0.8, -0.5])
    lam, amp = 12.0, torch.tensor([0.5, 1.0, 2.0], dtype=F64)
    sg = SgMixture(mu[None], torch.tensor([lam], dtype=F64), amp[None])
    w = unit([0.0, 1.0, 0.0])
    expected = amp * np.exp(lam * (float((mu * w).sum()) - 1.0))
    got = sg_eval(sg, w)
    assert float((got - expected).abs().max()) < 1e-12


def test_sg_eval_additive_in_lobes():
    gen = torch.Generator().manual_seed(0)
    axes = torch.randn(6, 3, dtype=F64, generator=gen)
    axes = axes / torch.linalg.norm(axes, dim=-1, keepdim=True)
    lams = torch.rand(6, dtype=F64, generator=gen) * 20
    amps = torch.rand(6, 3, dtype=F64, generator=gen)
    full = SgMixture(axes, lams, amps)
    w = torch.randn(40, 3, dtype=F64, generator=gen)
    w = w / torch.linalg.norm(w, dim=-1, keepdim=True)
    total = sum(sg_eval(SgMixture(axes[i:i + 1], lams[i:i + 1],
                                  amps[i:i + 1]), w) for i in range(6))
    assert float((sg_eval(full, w) - total).abs().max()) < 1e-12


def test_envmap_from_sg_matches_pointwise():
    sg = SgMixture.init_fibonacci(16, 8.0, 0.4)
    env = envmap_from_sg(sg, 32, 16)
    dirs = texel_center_directions(32, 16)
    assert torch.allclose(env.values, sg_eval(sg, dirs), atol=1e-14)


@given(u=st.floats(0.01, 0.99), v=st.floats(0.01, 0.99))
@settings(max_examples=50, deadline=None)
def test_latlong_roundtrip(u, v):
    w = latlong_to_direction(torch.tensor(u, dtype=F64),
                             torch.tensor(v, dtype=F64))
    u2, v2 = direction_to_latlong(w)
    assert abs(float(u2) - u) < 1e-10
    assert abs(float(v2) - v) < 1e-10


def test_latlong_conventions():
    # +Y is up (v=0); phi=0 lies along +X
    u, v = direction_to_latlong(torch.tensor([0.0, 1.0, 0.0], dtype=F64))
    assert abs(float(v)) < 1e-12
    u, v = direction_to_latlong(torch.tensor([1.0, 0.0, 0.0], dtype=F64))
    assert abs(float(u)) < 1e-12 and abs(float(v) - 0.5) < 1e-12


def test_envmap_lookup_texel_centers_and_wrap():
    gen = torch.Generator().manual_seed(1)
    env = EnvMap(torch.rand(8, 16, 3, dtype=F64, generator=gen))
    dirs = texel_center_directions(16, 8)
    got = envmap_lookup(env, dirs.reshape(-1, 3)).reshape(8, 16, 3)
    assert float((got - env.values).abs().max()) < 1e-12
    # wraparound: just left of u=0 equals just right, up to bilinear weight
    a = envmap_lookup(env, latlong_to_direction(
        torch.tensor(1e-9, dtype=F64), torch.tensor(0.5, dtype=F64)))
    b = envmap_lookup(env, latlong_to_direction(
        torch.tensor(1.0 - 1e-9, dtype=F64), torch.tensor(0.5, dtype=F64)))
    assert float((a - b).abs().max()) < 1e-6


def _np_brdf(albedo, rough, f0, n, wi, wo):
    """Independent numpy evaluation: Lambert*(1-F0) + GGX/Smith/Schlick."""
    n, wi, wo = (np.asarray(x, float) for x in (n, wi, wo))
    ndi, ndo = n @ wi, n @ wo
    if ndi <= 0 or ndo <= 0:
        return np.zeros(3)
    h = wi + wo
    h = h / np.linalg.norm(h)
    ndh, hdo = n @ h, h @ wo
    alpha = rough ** 2
    d = alpha ** 2 / (np.pi * (ndh ** 2 * (alpha ** 2 - 1) + 1) ** 2)
    lv = ndo * np.sqrt(alpha ** 2 + (1 - alpha ** 2) * ndi ** 2)
    ll = ndi * np.sqrt(alpha ** 2 + (1 - alpha ** 2) * ndo ** 2)
    g = 2.0 * ndi * ndo / (lv + ll)
    f = f0 + (1 - f0) * (1 - hdo) ** 5
    spec = d * g * f / (4 * ndi * ndo)
    if f0 == 0.0:
        spec = 0.0
    return np.asarray(albedo) / np.pi * (1 - f0) + spec


def test_brdf_eval_matches_numpy_oracle():
    albedo = [0.6, 0.3, 0.1]
    n = unit([0.0, 0.0, 1.0])
    wi = unit([0.3, 0.1, 0.8])
    wo = unit([-0.2, 0.4, 0.9])
    for rough, f0 in [(0.3, 0.04), (0.8, 0.2), (0.05, 0.04)]:
        p = BrdfParams(torch.tensor([albedo], dtype=F64),
                       torch.tensor([rough], dtype=F64), f0)
        got = brdf_eval(p, n[None], wi[None], wo[None])[0].numpy()
        expect = _np_brdf(albedo, rough, f0, n.numpy(), wi.numpy(),
                          wo.numpy())
        assert np.abs(got - expect).max() < 1e-12


def test_brdf_reciprocity():
    gen = torch.Generator().manual_seed(2)
    n = torch.tensor([0.0, 0.0, 1.0], dtype=F64)
    p = BrdfParams(torch.tensor([[0.5, 0.5, 0.5]], dtype=F64),
                   torch.tensor([0.4], dtype=F64), 0.04)
    for _ in range(10):
        wi = torch.randn(3, dtype=F64, generator=gen)
        wo = torch.randn(3, dtype=F64, generator=gen)
        wi[2], wo[2] = wi[2].abs() + 0.1, wo[2].abs() + 0.1
        wi, wo = unit(wi), unit(wo)
        a = brdf_eval(p, n[None], wi[None], wo[None])
        b = brdf_eval(p, n[None], wo[None], wi[None])
        assert float((a - b).abs().max()) < 1e-12


def test_f0_zero_is_pure_diffuse():
    n = unit([0.0, 0.0, 1.0])
    wi = unit([0.1, 0.0, 1.0])
    wo = unit([0.0, 0.2, 1.0])
    p = BrdfParams(torch.tensor([[0.7, 0.2, 0.1]], dtype=F64),
                   torch.tensor([0.05], dtype=F64), 0.0)
    got = brdf_eval(p, n[None], wi[None], wo[None])[0]
    expect = torch.tensor([0.7, 0.2, 0.1], dtype=F64) / np.pi
    assert float((got - expect).abs().max()) < 1e-15


def test_schlick_oracle():
    h_dot_o = torch.tensor([0.3], dtype=F64)
    got = float(schlick_fresnel(0.04, h_dot_o))
    assert abs(got - (0.04 + 0.96 * (1 - 0.3) ** 5)) < 1e-15


def test_brdf_pdf_normalizes():
    # MC estimate of the pdf's integral over the upper hemisphere
    gen = torch.Generator().manual_seed(3)
    n = torch.tensor([0.0, 0.0, 1.0], dtype=F64)
    wo = unit([0.3, 0.0, 0.9])
    m = 500_000
    wi = torch.randn(m, 3, dtype=F64, generator=gen)
    wi = wi / torch.linalg.norm(wi, dim=-1, keepdim=True)
    wi[:, 2] = wi[:, 2].abs()
    p = BrdfParams(torch.full((m, 3), 0.5, dtype=F64),
                   torch.full((m,), 0.5, dtype=F64), 0.1)
    pdf = brdf_pdf(p, n.expand(m, 3), wi, wo.expand(m, 3))
    integral = float(pdf.mean()) * 2 * np.pi
    assert abs(integral - 1.0) < 0.03


def test_brdf_sample_matches_pdf():
    gen = torch.Generator().manual_seed(4)
    m = 5000
    n = torch.tensor([0.0, 0.0, 1.0], dtype=F64).expand(m, 3)
    wo = unit([0.2, -0.1, 0.95]).expand(m, 3)
    p = BrdfParams(torch.full((m, 3), 0.4, dtype=F64),
                   torch.full((m,), 0.35, dtype=F64), 0.08)
    u = torch.rand(m, 2, dtype=F64, generator=gen)
    wi, pdf = brdf_sample(p, n, wo, u)
    assert float(torch.linalg.norm(wi, dim=-1).sub(1).abs().max()) < 1e-9
    pdf2 = brdf_pdf(p, n, wi, wo)
    ok = pdf > 1e-9
    rel = ((pdf - pdf2).abs() / pdf.clamp(min=1e-9))[ok]
    assert float(rel.max()) < 1e-9


def test_averaged_background_constant_views():
    from npbir.volume import Camera
    from npbir.geometry import TriMesh
    from npbir.io_metrics import View, PosedDataset
    cam = Camera(10, 10, 8, 8, 16, 16, np.eye(4))
    img = np.full((16, 16, 3), 0.25)
    ds = PosedDataset([View(cam, img)])
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    env, covered = averaged_background(ds, empty, 16, 8)
    assert covered.any() and not covered.all()
    vals = env.values.numpy()[covered]
    assert np.abs(vals - 0.25).max() < 1e-12
