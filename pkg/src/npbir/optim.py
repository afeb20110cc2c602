"""Optimizers: Adam and the uniform-Laplacian-preconditioned variant."""
from __future__ import annotations

import numpy as np
import torch

from .errors import NumericalError
from .grids import DTYPE


class Adam:
    """Bias-corrected Adam over parameter groups of torch tensors.

    Each group is a dict with keys ``params`` (list of tensors), ``lr``,
    and optionally ``lr_schedule``: a list of (step, lr) pairs switching the
    learning rate from the given step onward (piecewise-constant).
    """

    def __init__(self, groups, betas=(0.9, 0.99), eps=1e-12):
        if isinstance(groups, (list, tuple)) and groups and torch.is_tensor(groups[0]):
            groups = [{"params": list(groups), "lr": 1e-3}]
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [[torch.zeros_like(p) for p in g["params"]] for g in groups]
        self.v = [[torch.zeros_like(p) for p in g["params"]] for g in groups]

    def _lr(self, group) -> float:
        lr = group["lr"]
        for threshold, value in group.get("lr_schedule", []):
            if self.step_count >= threshold:
                lr = value
        return lr

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for gi, group in enumerate(self.groups):
            lr = self._lr(group)
            for pi, p in enumerate(group["params"]):
                if p.grad is None:
                    continue
                grad = p.grad
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
                v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
                p.addcdiv_(m / c1, (v / c2).sqrt() + self.eps, value=-lr)

    def state_dict(self):
        return {
            "step": self.step_count,
            "m": [[t.clone() for t in row] for row in self.m],
            "v": [[t.clone() for t in row] for row in self.v],
        }

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for row, saved in zip(self.m, state["m"]):
            for t, s in zip(row, saved):
                t.copy_(s)
        for row, saved in zip(self.v, state["v"]):
            for t, s in zip(row, saved):
                t.copy_(s)


def conjugate_gradient(matvec, b: torch.Tensor, tol: float = 1e-8,
                       max_iters: int | None = None) -> torch.Tensor:
    """CG solve of an SPD operator applied columnwise to b (n,) or (n, C)."""
    n = b.shape[0]
    if max_iters is None:
        max_iters = 10 * n
    x = torch.zeros_like(b)
    r = b.clone()
    p = r.clone()
    rs = float((r * r).sum())
    b_norm = max(1.0, float(b.norm()))
    if rs ** 0.5 <= tol * b_norm:
        return x
    for _ in range(max_iters):
        ap = matvec(p)
        alpha = rs / float((p * ap).sum())
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float((r * r).sum())
        if rs_new ** 0.5 <= tol * b_norm:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise NumericalError("conjugate gradient failed to converge")


class UniformLaplacian:
    """Smoothed descent for graph-structured parameters.

    Gradients are preconditioned by solving (I + lam*L)^2 x = g with CG
    (reparameterized descent: the smoothing operator applied twice), then
    stepped with Adam-style first moments and a single second-moment scalar
    shared across the block, tracked as the running max of squared entries.
    """

    def __init__(self, param: torch.Tensor, laplacian, lam: float, lr: float,
                 betas=(0.9, 0.999), eps=1e-8):
        self.param = param
        self.L = laplacian  # torch sparse or dense (n, n), PSD
        self.lam = lam
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = torch.zeros_like(param)
        self.v = 0.0

    def _apply(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(x.shape[0], -1)
        lx = torch.sparse.mm(self.L, flat) if self.L.is_sparse else self.L @ flat
        return (flat + self.lam * lx).reshape(x.shape)

    def precondition(self, grad: torch.Tensor) -> torch.Tensor:
        if self.lam == 0.0:
            return grad.clone()
        return conjugate_gradient(lambda p: self._apply(self._apply(p)), grad)

    def zero_grad(self):
        self.param.grad = None

    @torch.no_grad()
    def step(self, grad: torch.Tensor | None = None):
        if grad is None:
            grad = self.param.grad
        g = self.precondition(grad)
        self.step_count += 1
        t = self.step_count
        self.m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
        self.v = max(self.beta2 * self.v, float((g * g).max()))
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        self.param.add_(m_hat / (v_hat ** 0.5 + self.eps), alpha=-self.lr)

    def state_dict(self):
        return {"step": self.step_count, "m": self.m.clone(), "v": self.v}

    def load_state_dict(self, state):
        self.step_count = state["step"]
        self.m.copy_(state["m"])
        self.v = state["v"]


def laplacian_from_edges(n: int, edges: np.ndarray) -> torch.Tensor:
    """Uniform graph Laplacian L = D - A as a torch sparse tensor."""
    edges = np.asarray(edges, dtype=np.int64)
    if edges.size == 0:
        return torch.sparse_coo_tensor(
            torch.zeros(2, 0, dtype=torch.long), torch.zeros(0, dtype=DTYPE),
            (n, n)).coalesce()
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    vals = -np.ones(i.shape[0])
    deg = np.bincount(i, minlength=n).astype(np.float64)
    rows = np.concatenate([i, np.arange(n)])
    cols = np.concatenate([j, np.arange(n)])
    data = np.concatenate([vals, deg])
    idx = torch.as_tensor(np.stack([rows, cols]), dtype=torch.long)
    return torch.sparse_coo_tensor(
        idx, torch.as_tensor(data, dtype=DTYPE), (n, n)).coalesce()


def mesh_edges(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle mesh, shape (E, 2)."""
    t = np.asarray(triangles, dtype=np.int64)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def image_grid_laplacian(width: int, height: int, wrap_x: bool = False) -> torch.Tensor:
    """4-neighbor grid Laplacian over texels indexed y * width + x."""
    edges = []
    for y in range(height):
        for x in range(width):
            idx = y * width + x
            if x + 1 < width:
                edges.append((idx, idx + 1))
            elif wrap_x:
                edges.append((idx, y * width))
            if y + 1 < height:
                edges.append((idx, idx + width))
    return laplacian_from_edges(width * height, np.asarray(edges))
