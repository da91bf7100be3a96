"""End-to-end stages: prepare, train, sample, control, reconstruct, eval.

Every stage writes its artifacts under the run directory and records
content hashes in the manifest. Completed stages are skipped on re-run
unless forced; downstream stages fail fast when an upstream checkpoint is
missing.
"""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from . import container
from .autoencoder import (
    AutoencoderConfig,
    AutoencoderParams,
    decode_volume,
    encode,
    make_color_query,
    train_autoencoder,
)
from .config import PipelineConfig
from .control import duplicate_patch, outpaint, retarget
from .diffusion import (
    DenoiserParams,
    DiffusionSchedule,
    make_schedule,
    resolve_depth_preset,
    sample_latents,
    train_diffusion,
)
from .geometry import (
    GridGeometry,
    SdfColorGrid,
    TexturedMesh,
    build_grid,
    export_textured_mesh,
    load_textured_mesh,
    marching_cubes,
    normalize_mesh,
    uv_atlas_and_bake,
)
from .geometry.procedural import make_box, make_icosphere, make_striped_column
from .metrics import evaluate_set, iou, voxelize
from .triplane import TriplaneLatent

log = logging.getLogger(__name__)

DEMO_ASSETS = {
    "striped-column": make_striped_column,
    "box": make_box,
    "icosphere": make_icosphere,
}


class MissingArtifactError(FileNotFoundError):
    pass


class Paths:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.manifest = os.path.join(out_dir, "manifest.json")
        self.config = os.path.join(out_dir, "config.json")
        self.asset_dir = os.path.join(out_dir, "asset")
        self.asset_obj = os.path.join(self.asset_dir, "input.obj")
        self.grid = os.path.join(out_dir, "grid.s3dm")
        self.ae_ckpt = os.path.join(out_dir, "ae.ckpt")
        self.ae_loss = os.path.join(out_dir, "ae_loss.csv")
        self.latent = os.path.join(out_dir, "latent.ckpt")
        self.schedule = os.path.join(out_dir, "schedule.json")
        self.denoiser = os.path.join(out_dir, "denoiser.ckpt")
        self.diff_loss = os.path.join(out_dir, "diffusion_loss.csv")
        self.samples_dir = os.path.join(out_dir, "samples")
        self.recon_dir = os.path.join(out_dir, "recon")
        self.eval_report = os.path.join(out_dir, "eval", "report.json")
        self.eval_iou_csv = os.path.join(out_dir, "eval", "pairwise_iou.csv")


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {path}; run `{hint}` first")
    return path


def _seeds(config: PipelineConfig) -> dict[str, int]:
    ss = np.random.SeedSequence(config.seed)
    names = ("asset", "ae", "diffusion", "sampling")
    children = ss.spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config.validate()
        self.paths = Paths(config.out_dir)
        os.makedirs(config.out_dir, exist_ok=True)
        self.seeds = _seeds(config)

    # ---- manifest helpers

    def _manifest(self) -> dict:
        return container.read_manifest(self.paths.manifest)

    def _stage_done(self, stage: str, artifacts: list[str], force: bool) -> bool:
        if force:
            return False
        man = self._manifest()
        entry = man.get("stages", {}).get(stage)
        if entry is None or entry.get("config_hash") != self.config.config_hash():
            return False
        for art in artifacts:
            if not os.path.exists(art):
                return False
        log.info("stage %s already complete, skipping (use force to redo)", stage)
        return True

    def _record_stage(self, stage: str, artifacts: list[str], elapsed: float,
                      extra: dict | None = None) -> None:
        man = self._manifest()
        man.setdefault("config_hash", self.config.config_hash())
        man.setdefault("seeds", self.seeds)
        stages = man.setdefault("stages", {})
        stages[stage] = {
            "config_hash": self.config.config_hash(),
            "artifacts": {os.path.relpath(a, self.config.out_dir):
                          container.file_sha256(a) for a in artifacts},
            "elapsed_s": round(elapsed, 3),
            **(extra or {}),
        }
        container.write_manifest(self.paths.manifest, man)

    # ---- shared loaders

    def _ae_config(self) -> AutoencoderConfig:
        c = self.config
        return AutoencoderConfig(latent_channels=c.latent_channels,
                                 feature_channels=c.feature_channels,
                                 mlp_width=c.mlp_width, dtype=c.dtype)

    def load_mesh(self) -> TexturedMesh:
        _require(self.paths.asset_obj, "s3dm prepare")
        return load_textured_mesh(self.paths.asset_obj)

    def load_grid(self) -> SdfColorGrid:
        _require(self.paths.grid, "s3dm prepare")
        values = container.load_grid_values(self.paths.grid)
        geom = GridGeometry.from_dims(values.shape[:3], self.config.eps)
        return SdfColorGrid(values, geom, self.config.eps)

    def load_ae(self) -> AutoencoderParams:
        _require(self.paths.ae_ckpt, "s3dm train-ae")
        arrays, meta = container.load_tensors(self.paths.ae_ckpt)
        params = AutoencoderParams.init(self._ae_config(),
                                        np.random.default_rng(0))
        buffers = {k[len("buffer."):]: v for k, v in arrays.items()
                   if k.startswith("buffer.")}
        weights = {k: v for k, v in arrays.items() if not k.startswith("buffer.")}
        params.store.load_arrays(weights)
        params.buffers = buffers
        return params

    def load_latent(self) -> TriplaneLatent:
        _require(self.paths.latent, "s3dm train-ae")
        arrays, _ = container.load_tensors(self.paths.latent)
        return TriplaneLatent(arrays["h_xy"], arrays["h_xz"], arrays["h_yz"])

    def load_denoiser(self) -> tuple[DenoiserParams, DiffusionSchedule]:
        _require(self.paths.denoiser, "s3dm train-diff")
        schedule = DiffusionSchedule.from_json(
            _require(self.paths.schedule, "s3dm train-diff"))
        arrays, meta = container.load_tensors(self.paths.denoiser)
        layout = resolve_depth_preset(self.config.depth_preset,
                                      self.config.plane_resolution,
                                      self.config.denoiser_base_channels)
        params = DenoiserParams.init(layout, self.config.latent_channels,
                                     np.random.default_rng(0), self.config.dtype)
        params.store.load_arrays(arrays)
        return params, schedule

    def _geometry(self, latent: TriplaneLatent) -> GridGeometry:
        trained = GridGeometry.from_dims(self.load_grid().dims, self.config.eps)
        return GridGeometry(tuple(2 * d for d in latent.dims), trained.spacing)

    # ---- stages

    def prepare(self, force: bool = False) -> None:
        arts = [self.paths.asset_obj, self.paths.grid]
        if self._stage_done("prepare", arts, force):
            return
        t0 = time.time()
        c = self.config
        if c.mesh_path:
            mesh = load_textured_mesh(c.mesh_path)
        else:
            name = c.demo_asset or "striped-column"
            if name not in DEMO_ASSETS:
                raise ValueError(f"unknown demo asset {name!r}; "
                                 f"expected one of {sorted(DEMO_ASSETS)}")
            mesh = DEMO_ASSETS[name]()
        mesh = normalize_mesh(mesh)
        export_textured_mesh(mesh, self.paths.asset_dir, "input")
        grid = build_grid(mesh, c.grid_resolution, c.eps)
        grid.validate()
        container.save_grid_values(grid.values, self.paths.grid)
        with open(self.paths.config, "w", encoding="utf-8") as fh:
            fh.write(self.config.canonical_json())
        self._record_stage("prepare", arts, time.time() - t0,
                           {"grid_dims": list(grid.dims)})
        log.info("prepared grid %s in %.1fs", grid.dims, time.time() - t0)

    def train_ae(self, force: bool = False) -> None:
        arts = [self.paths.ae_ckpt, self.paths.latent, self.paths.ae_loss]
        if self._stage_done("train_ae", arts, force):
            return
        t0 = time.time()
        c = self.config
        grid = self.load_grid()
        mesh = self.load_mesh()
        rng = np.random.default_rng(self.seeds["ae"])
        result = train_autoencoder(grid, mesh, self._ae_config(),
                                   iterations=c.ae_iterations, batch_size=c.ae_batch,
                                   lr=c.ae_lr, near_surface_count=c.near_surface_count,
                                   sigma_offset=c.sigma, rng=rng,
                                   log_every=max(c.ae_iterations // 10, 1), logger=log)
        meta = {"config_hash": c.config_hash(), "iterations": c.ae_iterations,
                "loss_trace": os.path.basename(self.paths.ae_loss)}
        arrays = {n: t.data for n, t in result.params.store.items()}
        arrays.update({f"buffer.{k}": v for k, v in result.params.buffers.items()})
        container.save_tensors(arrays, self.paths.ae_ckpt, meta)
        container.save_tensors({"h_xy": result.latent.xy, "h_xz": result.latent.xz,
                                "h_yz": result.latent.yz}, self.paths.latent, meta)
        np.savetxt(self.paths.ae_loss, result.loss_trace, fmt="%.9e")
        self._record_stage("train_ae", arts, time.time() - t0,
                           {"final_loss": float(result.loss_trace[-1])})

    def train_diff(self, force: bool = False) -> None:
        arts = [self.paths.denoiser, self.paths.schedule, self.paths.diff_loss]
        if self._stage_done("train_diff", arts, force):
            return
        t0 = time.time()
        c = self.config
        latent = self.load_latent()
        schedule = make_schedule(c.diffusion_T, c.beta_min, c.beta_max)
        schedule.to_json(self.paths.schedule)
        layout = resolve_depth_preset(c.depth_preset, c.plane_resolution,
                                      c.denoiser_base_channels)
        rng = np.random.default_rng(self.seeds["diffusion"])
        result = train_diffusion(
            latent, schedule, layout, iterations=c.diffusion_iterations,
            batch_size=c.diffusion_batch, lr=c.diffusion_lr, rng=rng, dtype=c.dtype,
            log_every=max(c.diffusion_iterations // 10, 1), logger=log)
        meta = {"config_hash": c.config_hash(), "iterations": c.diffusion_iterations,
                "depth_preset": c.depth_preset,
                "loss_trace": os.path.basename(self.paths.diff_loss)}
        container.save_tensors({n: t.data for n, t in result.params.store.items()},
                               self.paths.denoiser, meta)
        np.savetxt(self.paths.diff_loss, result.loss_trace, fmt="%.9e")
        self._record_stage("train_diff", arts, time.time() - t0,
                           {"final_loss": float(result.loss_trace[-1])})

    # ---- generation

    def _decode_to_mesh(self, latent: TriplaneLatent, params: AutoencoderParams,
                        out_dir: str, name: str = "mesh", bake: bool = True) -> TexturedMesh:
        geometry = self._geometry(latent)
        sdf = decode_volume(latent, params, geometry)
        mesh = marching_cubes(sdf, geometry)
        if mesh.num_triangles and bake:
            query = make_color_query(latent, params, geometry)
            mesh = uv_atlas_and_bake(mesh, query, self.config.texture_size)
        export_textured_mesh(mesh, out_dir, name)
        return mesh

    def _emit_samples(self, stage: str, latents: list[TriplaneLatent], seed: int,
                      bake: bool, subdir: str) -> list[str]:
        params = self.load_ae()
        out_root = os.path.join(self.paths.samples_dir, subdir)
        arts = []
        for i, latent in enumerate(latents):
            d = os.path.join(out_root, f"sample_{i:03d}")
            os.makedirs(d, exist_ok=True)
            container.save_tensors(
                {"h_xy": latent.xy, "h_xz": latent.xz, "h_yz": latent.yz},
                os.path.join(d, "latent.ckpt"), {"seed": seed, "index": i})
            self._decode_to_mesh(latent, params, d, bake=bake)
            arts += [os.path.join(d, "latent.ckpt"), os.path.join(d, "mesh.obj")]
        return arts

    def sample(self, count: int = 1, seed: int | None = None, bake: bool = True,
               force: bool = False) -> list[str]:
        seed = self.seeds["sampling"] if seed is None else seed
        subdir = f"random_seed{seed}"
        stage = f"sample:{subdir}:{count}"
        probe = os.path.join(self.paths.samples_dir, subdir,
                             f"sample_{count - 1:03d}", "mesh.obj")
        if self._stage_done(stage, [probe], force):
            return [probe]
        t0 = time.time()
        params, schedule = self.load_denoiser()
        latent0 = self.load_latent()
        latents = sample_latents(params, schedule, latent0.dims, seed, count)
        arts = self._emit_samples(stage, latents, seed, bake, subdir)
        self._record_stage(stage, arts, time.time() - t0, {"seed": seed})
        return arts

    def retarget(self, scales, count: int = 1, seed: int | None = None,
                 bake: bool = True, force: bool = False) -> list[str]:
        seed = self.seeds["sampling"] if seed is None else seed
        tag = "x".join(f"{s:g}" for s in np.atleast_1d(scales))
        subdir = f"retarget_{tag}_seed{seed}"
        stage = f"retarget:{subdir}:{count}"
        probe = os.path.join(self.paths.samples_dir, subdir,
                             f"sample_{count - 1:03d}", "mesh.obj")
        if self._stage_done(stage, [probe], force):
            return [probe]
        t0 = time.time()
        params, schedule = self.load_denoiser()
        latent0 = self.load_latent()
        latents = retarget(params, schedule, scales, latent0.dims, seed, count)
        arts = self._emit_samples(stage, latents, seed, bake, subdir)
        self._record_stage(stage, arts, time.time() - t0,
                           {"seed": seed, "scales": list(np.atleast_1d(scales))})
        return arts

    def outpaint(self, pad_cells, count: int = 1, seed: int | None = None,
                 bake: bool = True, force: bool = False) -> list[str]:
        seed = self.seeds["sampling"] if seed is None else seed
        subdir = f"outpaint_seed{seed}"
        stage = f"outpaint:{subdir}:{count}"
        probe = os.path.join(self.paths.samples_dir, subdir,
                             f"sample_{count - 1:03d}", "mesh.obj")
        if self._stage_done(stage, [probe], force):
            return [probe]
        t0 = time.time()
        params, schedule = self.load_denoiser()
        h0 = self.load_latent()
        latents, _ = outpaint(h0, pad_cells, params, schedule, seed,
                              self.config.mask_ramp_width, count)
        arts = self._emit_samples(stage, latents, seed, bake, subdir)
        self._record_stage(stage, arts, time.time() - t0, {"seed": seed})
        return arts

    def duplicate(self, src_box, dst_boxes, count: int = 1, seed: int | None = None,
                  bake: bool = True, force: bool = False) -> list[str]:
        seed = self.seeds["sampling"] if seed is None else seed
        subdir = f"duplicate_seed{seed}"
        stage = f"duplicate:{subdir}:{count}"
        probe = os.path.join(self.paths.samples_dir, subdir,
                             f"sample_{count - 1:03d}", "mesh.obj")
        if self._stage_done(stage, [probe], force):
            return [probe]
        t0 = time.time()
        params, schedule = self.load_denoiser()
        h0 = self.load_latent()
        spacing = self._geometry(h0).spacing
        latents, _ = duplicate_patch(h0, src_box, dst_boxes, params, schedule,
                                     seed, spacing, self.config.mask_ramp_width, count)
        arts = self._emit_samples(stage, latents, seed, bake, subdir)
        self._record_stage(stage, arts, time.time() - t0, {"seed": seed})
        return arts

    def reconstruct(self, bake: bool = True, force: bool = False) -> dict:
        mesh_path = os.path.join(self.paths.recon_dir, "mesh.obj")
        if self._stage_done("reconstruct", [mesh_path], force):
            return self._manifest()["stages"]["reconstruct"]
        t0 = time.time()
        params = self.load_ae()
        grid = self.load_grid()
        latent = TriplaneLatent(*encode(grid, params).planes)
        mesh = self._decode_to_mesh(latent, params, self.paths.recon_dir, bake=bake)
        res = self.config.eval_resolution
        recon_iou = iou(voxelize(self.load_mesh(), res), voxelize(mesh, res))
        self._record_stage("reconstruct", [mesh_path], time.time() - t0,
                           {"iou_vs_input": recon_iou})
        log.info("reconstruction IoU vs input: %.4f", recon_iou)
        return {"iou_vs_input": recon_iou}

    def evaluate(self, samples_subdir: str | None = None, force: bool = False) -> dict:
        if self._stage_done("eval", [self.paths.eval_report], force):
            import json
            with open(self.paths.eval_report, "r", encoding="utf-8") as fh:
                return json.load(fh)
        t0 = time.time()
        if samples_subdir is None:
            samples_subdir = f"random_seed{self.seeds['sampling']}"
        root = os.path.join(self.paths.samples_dir, samples_subdir)
        _require(root, "s3dm sample")
        meshes = []
        for entry in sorted(os.listdir(root)):
            p = os.path.join(root, entry, "mesh.obj")
            if os.path.exists(p):
                meshes.append(load_textured_mesh(p))
        os.makedirs(os.path.dirname(self.paths.eval_report), exist_ok=True)
        report = evaluate_set(self.load_mesh(), meshes,
                              resolution=self.config.eval_resolution,
                              eps_d=self.config.eps,
                              report_path=self.paths.eval_report,
                              iou_csv_path=self.paths.eval_iou_csv)
        self._record_stage("eval", [self.paths.eval_report], time.time() - t0)
        return report

    def export(self, latent_path: str, out_name: str = "export",
               bake: bool = True) -> str:
        arrays, _ = container.load_tensors(_require(latent_path, "s3dm sample"))
        latent = TriplaneLatent(arrays["h_xy"], arrays["h_xz"], arrays["h_yz"])
        params = self.load_ae()
        out_dir = os.path.join(self.config.out_dir, "exports")
        self._decode_to_mesh(latent, params, out_dir, out_name, bake=bake)
        return os.path.join(out_dir, f"{out_name}.obj")
