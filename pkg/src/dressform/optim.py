"""Optimization engine: image-guidance gradient assembly with a pluggable
noise predictor, the body loop with a periodically refit template prior,
and the apparel loop with template / hole / collision terms.

Guidance contract: a denoiser is any callable (noised image, context,
timestep) -> predicted noise of identical shape, deterministic in its
inputs.  The engine never looks inside it; the desk-scale stand-ins are
`target_denoiser` (image matching in closed form) and, at the pipeline
level, chamfer fitting against a target mesh.

Determinism: one RNG seeded from the config drives timestep draws, noise,
and sample-set refreshes; all reductions are fixed-order numpy, so a run is
bit-reproducible from (config, seed, initial state).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses
from .body import EvolvableTemplate, apply_offsets
from .extract import extraction_gradients, gshell_extract
from .losses import (build_sample_points, chamfer_loss, collision_loss,
                     fit_loss, hole_loss, prior_loss, template_loss)
from .mesh import TriMesh
from .render import Camera, rasterize, rasterize_gradients, ring_cameras
from .tetgrid import GShellParams, save_field

DenoiserOracle = Callable[[np.ndarray, "GuidanceContext", float], np.ndarray]

TIMESTEP_LO, TIMESTEP_HI = 0.02, 0.98


@dataclass(frozen=True)
class GuidanceContext:
    """Opaque semantic label for a guidance source plus a view descriptor."""
    tag: str
    view: str = ""

    def __post_init__(self):
        if not self.tag:
            raise ValueError("guidance context needs a non-empty tag")


@dataclass
class OptimConfig:
    iterations: int = 3000
    lr_fields: float = 1e-3
    lr_deform: float = 1e-4
    refit_period: int = 500          # template refit cadence (body runs)
    refit_steps: int = 150           # inner iterations per refit
    refit_lr: float = 5e-4
    # refit weights: closeness and rigidity dominate.  Random per-vertex
    # pulls toward the nearest extracted vertex stretch edges and are
    # resisted at first order, while a coherent inflation only changes the
    # metric at second order, so the offsets track shape changes without
    # picking up tangential jitter; the laplacian stays low because its
    # absolute form otherwise biases a curved template inward.
    refit_lambda_chamfer: float = 200.0
    refit_lambda_edge: float = 200.0
    refit_lambda_normal: float = 0.1
    refit_lambda_laplacian: float = 1.0
    lambda_prior: float = losses.LAMBDA_PRIOR
    lambda_template: float = losses.LAMBDA_TEMPLATE
    lambda_hole: float = losses.LAMBDA_HOLE
    lambda_collision: float = losses.LAMBDA_COLLISION
    lambda_fit: float = 2000.0       # chamfer pull toward target_geometry
    halfway_decay: float = 0.1       # prior/template weight drop at midpoint
    n_sample_points: int = losses.SAMPLE_SET_SIZE
    sample_refresh: int = losses.SAMPLE_REFRESH_PERIOD
    n_target_points: int = 4096
    seed: int = 0
    cameras: Sequence[Camera] | None = None   # default: ring at desk scale
    checkpoint_every: int = 0        # 0 disables periodic checkpoints
    checkpoint_dir: str | None = None

    def camera_list(self) -> list[Camera]:
        if self.cameras is not None:
            return list(self.cameras)
        return ring_cameras(resolution=(128, 128))


@dataclass
class OptimState:
    params: GShellParams
    iteration: int = 0
    template: EvolvableTemplate | None = None
    seed: int = 0
    loss_history: list[dict] = field(default_factory=list)
    abort_reason: str | None = None
    final_mesh: TriMesh | None = None


# -- guidance gradient assembly ------------------------------------------------

def sds_gradient(render: np.ndarray, denoiser: DenoiserOracle,
                 context: GuidanceContext, t: float, noise: np.ndarray,
                 weight: float = 1.0) -> np.ndarray:
    """Image-space cotangent pulled from a noise predictor: add the noise,
    ask the predictor for it back, and the residual (weighted) is the pixel
    gradient to push through the rasterizer."""
    render = np.asarray(render, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != render.shape:
        raise ValueError("noise shape must match the rendered image")
    if not 0.0 < t <= 1.0:
        raise ValueError("timestep must lie in (0, 1]")
    if weight == 0.0:
        return np.zeros_like(render)
    predicted = np.asarray(denoiser(render + noise, context, t), dtype=np.float64)
    if predicted.shape != render.shape:
        raise ValueError("denoiser returned a wrong-shaped prediction")
    return weight * (predicted - noise)


def target_denoiser(target: np.ndarray) -> DenoiserOracle:
    """Stub predictor whose SDS cotangent collapses to (image - target):
    plain image matching, used by tests and demo configs."""
    target = np.asarray(target, dtype=np.float64)

    def predict(noised: np.ndarray, context: GuidanceContext, t: float) -> np.ndarray:
        return np.asarray(noised, dtype=np.float64) - target

    return predict


# -- adaptive first-order stepper ------------------------------------------------

class Adam:
    """Per-array moment-based step; beta defaults are the textbook ones."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.steps += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.steps)
        vhat = self.v / (1 - self.beta2 ** self.steps)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base: float, iteration: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + np.cos(np.pi * iteration / (total - 1)))


# -- shared loop plumbing --------------------------------------------------------

def _target_points(target: TriMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted surface samples of the fitting target."""
    rng = np.random.default_rng(seed)
    tri = target.vertices[target.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    picks = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    return np.einsum("nk,nkc->nc", w, tri[picks])


def _guidance_cotangents(mesh, guidance, cameras, iteration, rng):
    """Render the mesh for each guidance source and pull the image-space
    cotangents back to vertex-position cotangents."""
    d_verts = np.zeros_like(mesh.vertices)
    magnitude = 0.0
    for g_idx, (denoiser, context, kind) in enumerate(guidance):
        cam = cameras[(iteration * len(guidance) + g_idx) % len(cameras)]
        out = rasterize(mesh, cam)
        if kind == "normal":
            image = out.normal
        elif kind == "depth":
            image = out.depth
        else:
            raise ValueError(f"unknown guidance map kind {kind!r}")
        t = rng.uniform(TIMESTEP_LO, TIMESTEP_HI)
        noise = rng.normal(size=image.shape)
        cot = sds_gradient(image, denoiser, context, t, noise)
        if kind == "normal":
            d_verts = d_verts + rasterize_gradients(out, d_normal=cot)
        else:
            d_verts = d_verts + rasterize_gradients(out, d_depth=cot)
        magnitude += float(np.abs(cot).sum())
    return d_verts, magnitude


def _finite(*arrays) -> bool:
    return all(a is None or np.all(np.isfinite(a)) for a in arrays)


def write_checkpoint(state: OptimState, mesh: TriMesh, directory,
                     config: OptimConfig) -> None:
    """fields (binary containers), extracted mesh OBJ, loss CSV, config."""
    from .mesh import save_obj
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = state.params
    save_field(directory / "sdf.bin", p.grid, p.sdf)
    if p.msdf is not None:
        save_field(directory / "msdf.bin", p.grid, p.msdf)
    if p.deform is not None:
        for axis, label in enumerate("xyz"):
            save_field(directory / f"deform_{label}.bin", p.grid,
                       p.deform[:, axis])
    save_obj(directory / "mesh.obj", mesh)
    with open(directory / "history.csv", "w", newline="") as fh:
        if state.loss_history:
            names = list(state.loss_history[0])
            for row in state.loss_history[1:]:
                names += [k for k in row if k not in names]
            writer = csv.DictWriter(fh, fieldnames=names, restval="")
            writer.writeheader()
            writer.writerows(state.loss_history)
    payload = {k: v for k, v in vars(config).items() if k != "cameras"}
    payload["iteration"] = state.iteration
    payload["seed"] = config.seed
    with open(directory / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2, default=str)


def _decayed(lam: float, iteration: int, total: int, factor: float) -> float:
    return lam * factor if iteration >= total // 2 else lam


def _maybe_checkpoint(state, mesh, config, iteration):
    if config.checkpoint_dir and config.checkpoint_every and \
            (iteration + 1) % config.checkpoint_every == 0:
        write_checkpoint(state, mesh,
                         Path(config.checkpoint_dir) / f"iter_{iteration + 1:06d}",
                         config)


# -- body loop -------------------------------------------------------------------

def refit_template(template: EvolvableTemplate, target_points: np.ndarray,
                   config: OptimConfig) -> None:
    """Move the per-vertex offsets so the offset template tracks the current
    extracted surface, balancing closeness against rigidity/smoothness.  The
    step size decays to zero within the refit so the offsets settle at the
    equilibrium instead of oscillating around it."""
    base = template.base.template
    opt = Adam(template.offsets.shape)
    for k in range(config.refit_steps):
        mesh = TriMesh(base.vertices + template.offsets, base.faces)
        res = fit_loss(mesh, base, target_points,
                       lambda_chamfer=config.refit_lambda_chamfer,
                       lambda_edge=config.refit_lambda_edge,
                       lambda_normal=config.refit_lambda_normal,
                       lambda_laplacian=config.refit_lambda_laplacian)
        grad = res.gradients["vertices"]
        if not _finite(grad):
            break
        opt.step(template.offsets, grad,
                 cosine_lr(config.refit_lr, k, config.refit_steps))
    cap = template.offset_cap
    norms = np.linalg.norm(template.offsets, axis=1)
    over = norms > cap
    if np.any(over):
        template.offsets[over] *= (cap / norms[over])[:, None]


def optimize_body(state: OptimState, guidance=(), target_geometry: TriMesh | None = None,
                  config: OptimConfig | None = None) -> OptimState:
    """Descend the watertight body fields: guidance and/or target fitting
    through the extraction Jacobian, plus the evolving-template prior."""
    config = config or OptimConfig()
    if state.params.msdf is not None:
        raise ValueError("body optimization runs in watertight mode (no trim field)")
    if state.template is None:
        raise ValueError("body optimization needs an evolvable template in the state")
    return _run_loop(state, config, guidance, target_geometry, mode="body",
                     body_mesh=None, m_temp=None, pies=None)


def optimize_apparel(state: OptimState, body_mesh: TriMesh, m_temp: TriMesh,
                     pies: Sequence[TriMesh] = (), guidance=(),
                     target_geometry: TriMesh | None = None,
                     config: OptimConfig | None = None) -> OptimState:
    """Descend the apparel fields against template, hole (open mode),
    collision, and guidance/fitting terms."""
    config = config or OptimConfig()
    if state.params.msdf is None and pies:
        raise ValueError("pies supplied but the state has no trim field")
    if state.params.msdf is not None and not pies:
        raise ValueError("open mode needs the pies that seeded the trim field")
    if not body_mesh.is_watertight():
        raise ValueError("collision needs a watertight body mesh")
    return _run_loop(state, config, guidance, target_geometry, mode="apparel",
                     body_mesh=body_mesh, m_temp=m_temp, pies=list(pies))


def _run_loop(state, config, guidance, target_geometry, mode, body_mesh,
              m_temp, pies) -> OptimState:
    params = state.params
    grid = params.grid
    rng = np.random.default_rng(config.seed)
    cameras = config.camera_list()
    open_mode = params.msdf is not None

    opt_sdf = Adam(params.sdf.shape)
    opt_msdf = Adam(params.msdf.shape) if open_mode else None
    opt_deform = Adam(params.deform.shape) if params.deform is not None else None

    target_pts = None
    if target_geometry is not None:
        target_pts = _target_points(target_geometry, config.n_target_points,
                                    config.seed)

    samples = None
    mesh = None
    for it in range(state.iteration, state.iteration + config.iterations):
        if samples is None or it % config.sample_refresh == 0:
            anchor = apply_offsets(state.template) if mode == "body" else m_temp
            samples = build_sample_points(grid, anchor, config.n_sample_points,
                                          seed=config.seed + it)
        mesh, record = gshell_extract(grid, params.sdf, params.msdf,
                                      params.deform)

        row = {"iteration": it}
        total = 0.0
        d_sdf = np.zeros_like(params.sdf)
        d_msdf = np.zeros_like(params.msdf) if open_mode else None
        d_verts = np.zeros_like(mesh.vertices)

        if guidance:
            g_verts, g_mag = _guidance_cotangents(mesh, guidance, cameras, it, rng)
            d_verts += g_verts
            row["guidance"] = g_mag

        if target_pts is not None and config.lambda_fit:
            res = chamfer_loss(mesh.vertices, target_pts)
            total += config.lambda_fit * res.value
            d_verts += config.lambda_fit * res.gradients["a"]
            row["fit"] = res.value

        if mode == "body":
            lam = _decayed(config.lambda_prior, it - state.iteration,
                           config.iterations, config.halfway_decay)
            if lam:
                anchor = apply_offsets(state.template)
                res = prior_loss(grid, params.sdf, anchor, samples)
                total += lam * res.value
                d_sdf += lam * res.gradients["field"]
                row["prior"] = res.value
        else:
            lam = _decayed(config.lambda_template, it - state.iteration,
                           config.iterations, config.halfway_decay)
            if lam:
                res = template_loss(grid, params.sdf, m_temp, samples)
                total += lam * res.value
                d_sdf += lam * res.gradients["field"]
                row["template"] = res.value
            if open_mode and config.lambda_hole:
                res = hole_loss(grid, params.msdf, pies, samples)
                total += config.lambda_hole * res.value
                d_msdf += config.lambda_hole * res.gradients["field"]
                row["hole"] = res.value
            if config.lambda_collision:
                res = collision_loss(mesh.vertices, body_mesh)
                total += config.lambda_collision * res.value
                d_verts += config.lambda_collision * res.gradients["vertices"]
                row["collision"] = res.value

        row["total"] = total
        if not np.isfinite(total):
            state.abort_reason = f"non-finite loss at iteration {it}"
            state.loss_history.append(row)
            state.iteration = it
            state.final_mesh = mesh
            if config.checkpoint_dir:
                write_checkpoint(state, mesh,
                                 Path(config.checkpoint_dir) / "abort", config)
            return state

        if np.any(d_verts):
            pulled = extraction_gradients(record, d_verts)
            d_sdf += pulled["sdf"]
            if open_mode and "msdf" in pulled:
                d_msdf += pulled["msdf"]
            d_deform = pulled.get("deform")
        else:
            d_deform = None

        if not _finite(d_sdf, d_msdf, d_deform):
            row["skipped"] = "non-finite gradient"
            state.loss_history.append(row)
            continue

        lr = cosine_lr(config.lr_fields, it - state.iteration, config.iterations)
        row["lr"] = lr
        opt_sdf.step(params.sdf, d_sdf, lr)
        if open_mode:
            opt_msdf.step(params.msdf, d_msdf, lr)
        if opt_deform is not None and d_deform is not None:
            opt_deform.step(
                params.deform, d_deform,
                cosine_lr(config.lr_deform, it - state.iteration,
                          config.iterations))
            params.clamp_deform()
        state.loss_history.append(row)

        if mode == "body" and config.refit_period and \
                (it + 1 - state.iteration) % config.refit_period == 0:
            refit_template(state.template, mesh.vertices, config)

        _maybe_checkpoint(state, mesh, config, it)

    state.iteration += config.iterations
    state.final_mesh, _ = (gshell_extract(grid, params.sdf, params.msdf,
                                          params.deform))
    if config.checkpoint_dir:
        write_checkpoint(state, state.final_mesh,
                         Path(config.checkpoint_dir) / "final", config)
    return state
