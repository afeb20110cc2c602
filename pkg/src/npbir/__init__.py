"""Three-stage inverse rendering: grid-SDF surface reconstruction,
material/lighting distillation, and physics-based refinement."""

from .errors import (OutOfDomainError, CapacityError, NumericalError,
                     ValidationError)
from .grids import (Aabb, VoxelGrid, RadianceHead, SdfScene, interp,
                    query_sdf, query_radiance, sdf_gradient, upscale,
                    save_scene, load_scene)
from .volume import (Camera, Stage1Config, train_surface, render_image,
                     render_mask)
from .geometry import (TriMesh, Bvh, marching_cubes, ray_cast, ray_cast_many,
                       chamfer, sample_surface, uv_atlas_and_bake,
                       vertex_normals_from_sdf, save_obj, load_obj,
                       save_mesh_binary, load_mesh_binary)
from .shading import (BrdfParams, SgMixture, EnvMap, sg_eval, envmap_from_sg,
                      envmap_lookup, brdf_eval, brdf_pdf, brdf_sample,
                      averaged_background)
from .distill import (DirectionSet, TransportTables, Stage2Config,
                      precompute_transport, coarse_render, train_distill)
from .pbir import (TexturedAssets, RenderConfig, Stage3Schedule, path_trace,
                   run_pbir, view_seed, FINAL_RENDER)
from .io_metrics import (PosedDataset, View, load_dataset, save_dataset,
                         read_pfm, write_pfm, read_png, write_png,
                         srgb_to_linear, linear_to_srgb, psnr, ssim, mse,
                         albedo_alignment)
from .estimators import SurfaceReconstructor, MaterialDistiller, PbirRefiner

__version__ = "0.1.0"
