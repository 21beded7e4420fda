"""dressform: layered avatar geometry toolkit.

Hybrid shell fields on tet grids, differentiable watertight / open mesh
extraction, garment template initialization from a masked body, geometric
fitting losses with analytic gradients, a small rasterizer, an optimization
engine with pluggable guidance, and avatar assembly / animation / export.
"""

from .mesh import TriMesh, load_obj, save_obj
from .tetgrid import GShellParams, TetGrid, build_grid, sample_field, save_field, load_field
from .extract import ExtractionRecord, extraction_gradients, gshell_extract, marching_tets
from .meshsdf import SignUndefinedError, batch_signed_distance, unsigned_distance
from .apparel import (HoleDescriptor, closed_template, crop_by_mask, fit_pie,
                      init_gshell, open_template)
from .losses import (LossValue, SamplePointSet, build_sample_points,
                     chamfer_loss, collision_loss, edge_loss, fit_loss,
                     hole_loss, laplacian_loss, normal_consistency_loss,
                     prior_loss, template_loss)

__all__ = [
    "TriMesh", "load_obj", "save_obj",
    "GShellParams", "TetGrid", "build_grid", "sample_field", "save_field", "load_field",
    "ExtractionRecord", "extraction_gradients", "gshell_extract", "marching_tets",
    "SignUndefinedError", "batch_signed_distance", "unsigned_distance",
    "HoleDescriptor", "closed_template", "crop_by_mask", "fit_pie",
    "init_gshell", "open_template",
    "LossValue", "SamplePointSet", "build_sample_points",
    "chamfer_loss", "collision_loss", "edge_loss", "fit_loss",
    "hole_loss", "laplacian_loss", "normal_consistency_loss",
    "prior_loss", "template_loss",
]

__version__ = "0.1.0"
