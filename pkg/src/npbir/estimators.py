"""Scikit-learn style wrappers around the three stage trainers.

Each estimator is a thin `BaseEstimator` holding a stage config; `fit`
runs the corresponding training loop and stores its outputs on trailing-
underscore attributes.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .grids import query_radiance
from .volume import Stage1Config, train_surface
from .geometry import (Bvh, marching_cubes, vertex_normals_from_sdf)
from .distill import (DirectionSet, Stage2Config, precompute_transport,
                      train_distill)
from .shading import averaged_background
from .pbir import Stage3Schedule, run_pbir
from dataclasses import replace


class SurfaceReconstructor(BaseEstimator):
    """Stage 1: optimize an SDF scene from posed images.

    After `fit`: ``scene_`` (the trained SdfScene) and ``mesh_`` (the
    extracted triangle mesh with SDF-gradient vertex normals).
    """

    def __init__(self, config: Stage1Config | None = None):
        self.config = config

    def fit(self, dataset, y=None):
        cfg = self.config if self.config is not None else Stage1Config()
        self.scene_ = train_surface(dataset, cfg)
        self.mesh_ = marching_cubes(self.scene_.fg_sdf)
        self.mesh_ = replace(
            self.mesh_,
            normals=vertex_normals_from_sdf(self.mesh_, self.scene_.fg_sdf))
        return self


class MaterialDistiller(BaseEstimator):
    """Stage 2: distill the radiance field into per-vertex materials
    plus a spherical-Gaussian environment.

    After `fit`: ``mesh_`` (with albedo/roughness), ``light_`` (the SG
    mixture), ``tables_``, and ``history_``.
    """

    def __init__(self, config: Stage2Config | None = None):
        self.config = config

    def fit(self, dataset, y=None, *, scene=None, mesh=None):
        if scene is None or mesh is None:
            raise ValueError("MaterialDistiller.fit needs scene= and mesh= "
                             "from the surface stage")
        cfg = self.config if self.config is not None else Stage2Config()
        field = lambda x, v: query_radiance(scene, x, v)  # noqa: E731
        directions = DirectionSet.stratified(cfg.n_dirs)
        self.tables_ = precompute_transport(mesh, Bvh(mesh), field, directions)
        bg_env, bg_cov = averaged_background(dataset, mesh, cfg.bg_width,
                                             cfg.bg_height)
        self.mesh_, self.light_, self.history_ = train_distill(
            mesh, self.tables_, field, directions, bg_env, bg_cov, cfg)
        return self


class PbirRefiner(BaseEstimator):
    """Stage 3: refine textured assets through the differentiable path
    tracer.

    After `fit`: ``assets_`` (refined TexturedAssets) and ``history_``.
    """

    def __init__(self, schedule: Stage3Schedule | None = None):
        self.schedule = schedule

    def fit(self, dataset, y=None, *, initial=None, out_dir=None):
        if initial is None:
            raise ValueError("PbirRefiner.fit needs initial= TexturedAssets")
        sched = self.schedule if self.schedule is not None \
            else Stage3Schedule()
        self.assets_ = run_pbir(initial, dataset, sched, out_dir=out_dir)
        self.history_ = self.assets_.history
        return self
