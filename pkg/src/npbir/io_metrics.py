"""Dataset IO (posed images + cameras), PNG/PFM image IO, and metrics.

Conventions
-----------
* LDR images are stored as sRGB PNG (8- or 16-bit) and decoded to linear
  radiance with the exact piecewise IEC 61966-2-1 transfer on load.
* HDR images (renders, environment maps) are stored as little-endian PFM
  with the standard bottom-up row order. Environment maps are
  latitude-longitude with +Y up and azimuth 0 at +X.
* ``cameras.json`` holds per-view intrinsics and a row-major 4x4
  camera-to-world transform (OpenCV camera axes: x right, y down,
  z forward).
"""
from __future__ import annotations

import json
import os
import struct
import warnings
import csv as _csv
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ValidationError
from .volume import Camera


# ---------------------------------------------------------------------------
# Color transfer
# ---------------------------------------------------------------------------

def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    """Exact IEC 61966-2-1 sRGB electro-optical transfer."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    """Exact IEC 61966-2-1 inverse transfer; input clipped to [0, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x,
                    1.055 * x ** (1.0 / 2.4) - 0.055)


# ---------------------------------------------------------------------------
# PNG / PFM
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """PNG -> float array in [0, 1] (H, W) or (H, W, 3); no color decode."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        out = arr.astype(np.float64) / 65535.0
    else:
        raise ValidationError(f"unsupported PNG sample type {arr.dtype}")
    if out.ndim == 3 and out.shape[2] == 4:
        out = out[:, :, :3]
    return out


def write_png(path, values: np.ndarray, bitdepth: int = 8) -> None:
    """Float array in [0, 1] -> 8- or 16-bit PNG (values are quantized)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if bitdepth == 8:
        q = np.round(v * 255.0).astype(np.uint8)
        Image.fromarray(q).save(path)
    elif bitdepth == 16:
        q = np.round(v * 65535.0).astype(np.uint16)
        if q.ndim == 2:
            Image.fromarray(q, mode="I;16").save(path)
        else:
            raise ValidationError("16-bit PNG output supports grayscale only")
    else:
        raise ValidationError(f"unsupported PNG bit depth {bitdepth}")


def read_pfm(path) -> np.ndarray:
    """PFM -> float32 array (H, W) or (H, W, 3), row 0 at the top."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValidationError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        fmt = "<" if scale < 0 else ">"
        count = w * h * channels
        data = np.frombuffer(f.read(4 * count), dtype=fmt + "f4", count=count)
    img = data.reshape(h, w, channels)[::-1]  # PFM rows are bottom-up
    img = img * abs(scale) if abs(scale) != 1.0 else img
    return np.ascontiguousarray(img[..., 0] if channels == 1 else img)


def write_pfm(path, values: np.ndarray) -> None:
    """Float array (H, W) or (H, W, 3) -> little-endian PFM (scale -1)."""
    v = np.asarray(values, dtype=np.float32)
    if not np.isfinite(v).all():
        raise ValidationError("PFM values must be finite")
    if v.ndim == 2:
        header, img = b"Pf", v[:, :, None]
    elif v.ndim == 3 and v.shape[2] == 3:
        header, img = b"PF", v
    else:
        raise ValidationError(f"unsupported PFM shape {v.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Posed datasets
# ---------------------------------------------------------------------------

@dataclass
class View:
    """One posed image: camera, linear radiance image, optional mask."""
    camera: Camera
    image: np.ndarray                       # (H, W, 3) linear
    mask: np.ndarray | None = None          # (H, W) in [0, 1]
    name: str = ""
    split: str = "train"


@dataclass
class PosedDataset:
    views: list = field(default_factory=list)
    gt_env: np.ndarray | None = None        # (H, W, 3) lat-long radiance

    def __len__(self):
        return len(self.views)

    def subset(self, split: str) -> "PosedDataset":
        return PosedDataset([v for v in self.views if v.split == split],
                            self.gt_env)


def _camera_to_json(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "cam_to_world": [float(x) for x in cam.cam_to_world.reshape(-1)]}


def _camera_from_json(d: dict, idx: int) -> Camera:
    c2w = np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4)
    r = c2w[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-4):
        raise ValidationError(
            f"view {idx}: camera rotation is not orthonormal within 1e-4")
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                  float(d["cy"]), int(d["width"]), int(d["height"]), c2w)


def save_dataset(root, dataset: PosedDataset, *, image_format: str = "pfm",
                 png_bitdepth: int = 8) -> None:
    """Write ``cameras.json``, ``images/``, and ``masks/`` under root.

    ``image_format`` 'pfm' stores linear radiance exactly (float32);
    'png' encodes to sRGB and quantizes.
    """
    if image_format not in ("pfm", "png"):
        raise ValidationError(f"unsupported image format {image_format!r}")
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    have_masks = any(v.mask is not None for v in dataset.views)
    if have_masks:
        os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    entries = []
    for i, v in enumerate(dataset.views):
        name = v.name or f"view_{i:03d}"
        img_rel = f"images/{name}.{image_format}"
        img = np.asarray(v.image, dtype=np.float64)
        if img.shape[:2] != (v.camera.height, v.camera.width):
            raise ValidationError(
                f"view {i}: image shape {img.shape[:2]} does not match "
                f"camera {v.camera.height}x{v.camera.width}")
        if image_format == "pfm":
            write_pfm(os.path.join(root, img_rel), img.astype(np.float32))
        else:
            write_png(os.path.join(root, img_rel), linear_to_srgb(img),
                      png_bitdepth)
        mask_rel = None
        if v.mask is not None:
            mask_rel = f"masks/{name}.png"
            write_png(os.path.join(root, mask_rel), np.asarray(v.mask))
        entries.append({"file": img_rel, "mask": mask_rel, "split": v.split,
                        **_camera_to_json(v.camera)})
    manifest = {"views": entries}
    if dataset.gt_env is not None:
        write_pfm(os.path.join(root, "gt_env.pfm"),
                  np.asarray(dataset.gt_env, dtype=np.float32))
        manifest["gt_env"] = "gt_env.pfm"
    with open(os.path.join(root, "cameras.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(root) -> PosedDataset:
    """Read and validate a dataset directory written by `save_dataset`.

    LDR PNGs are decoded sRGB -> linear; PFM images are linear already.
    """
    cams_path = os.path.join(root, "cameras.json")
    if not os.path.isfile(cams_path):
        raise ValidationError(f"missing cameras.json under {root}")
    with open(cams_path) as f:
        manifest = json.load(f)
    views = []
    for i, entry in enumerate(manifest.get("views", [])):
        cam = _camera_from_json(entry, i)
        img_path = os.path.join(root, entry["file"])
        if not os.path.isfile(img_path):
            raise ValidationError(f"view {i}: missing image {entry['file']}")
        if img_path.endswith(".pfm"):
            img = np.asarray(read_pfm(img_path), dtype=np.float64)
        else:
            img = srgb_to_linear(read_png(img_path))
        if img.ndim != 3 or img.shape != (cam.height, cam.width, 3):
            raise ValidationError(
                f"view {i}: image shape {img.shape} does not match camera "
                f"{cam.height}x{cam.width}x3")
        mask = None
        if entry.get("mask"):
            mask_path = os.path.join(root, entry["mask"])
            if not os.path.isfile(mask_path):
                raise ValidationError(
                    f"view {i}: missing mask {entry['mask']}")
            mask = read_png(mask_path)
            if mask.ndim != 2 or mask.shape != (cam.height, cam.width):
                raise ValidationError(
                    f"view {i}: mask shape {mask.shape} does not match "
                    f"camera {cam.height}x{cam.width}")
        name = os.path.splitext(os.path.basename(entry["file"]))[0]
        views.append(View(cam, img, mask, name,
                          entry.get("split", "train")))
    gt_env = None
    if manifest.get("gt_env"):
        gt_env = np.asarray(
            read_pfm(os.path.join(root, manifest["gt_env"])),
            dtype=np.float64)
    return PosedDataset(views, gt_env)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give the +inf sentinel."""
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity: 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, averaged over channels."""
    from skimage.metrics import structural_similarity
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValidationError("images must be at least 11x11 for SSIM")
    kwargs = dict(win_size=11, gaussian_weights=True, sigma=1.5,
                  use_sample_covariance=False, K1=0.01, K2=0.03,
                  data_range=data_range)
    if a.ndim == 3:
        kwargs["channel_axis"] = -1
    return float(structural_similarity(a, b, **kwargs))


def albedo_alignment(pred: np.ndarray, gt: np.ndarray,
                     mask: np.ndarray | None = None) -> np.ndarray:
    """Per-channel least-squares scale s = <pred,gt>/<pred,pred> over the
    masked pixels (directional: pred is scaled toward gt). An all-zero
    predicted channel gets scale 1 with a warning."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValidationError("pred/gt shape mismatch")
    if mask is not None:
        m = np.asarray(mask).reshape(-1) > 0.5
        if not m.any():
            raise ValidationError("alignment mask is empty")
        pred, gt = pred[m], gt[m]
    num = (pred * gt).sum(axis=0)
    den = (pred * pred).sum(axis=0)
    scale = np.ones(3)
    for c in range(3):
        if den[c] == 0.0:
            warnings.warn(f"albedo channel {c} is identically zero; "
                          "using alignment scale 1")
        else:
            scale[c] = num[c] / den[c]
    return scale


def write_metric_report(path, rows) -> None:
    """CSV report with columns (view, psnr, ssim, mse) plus a mean row.

    ``rows`` is a list of (view_name, psnr, ssim, mse). The mean row
    averages finite PSNR values only.
    """
    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["view", "psnr", "ssim", "mse"])
        for name, p, s, m in rows:
            w.writerow([name, repr(float(p)), repr(float(s)),
                        repr(float(m))])
        if rows:
            ps = [r[1] for r in rows if np.isfinite(r[1])]
            mean_p = float(np.mean(ps)) if ps else float("inf")
            w.writerow(["mean", repr(mean_p),
                        repr(float(np.mean([r[2] for r in rows]))),
                        repr(float(np.mean([r[3] for r in rows])))])
