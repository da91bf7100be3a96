"""Triplane autoencoder: compress a distance/color grid, decode fields.

The encoder is a single strided 3D convolution with instance norm and a
tanh squash, followed by full-axis average pooling onto the three planes.
Decoding refines each plane with a 2D residual block, gathers bilinear
features at the projected query point, sums them, and feeds two MLP heads
(distance, color). Heads are 5 ReLU layers of one width with the raw
feature vector concatenated onto the middle layer's input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry.grid import SamplePoints, SdfColorGrid, grid_sample_points, sample_near_surface_points
from .tensor import (
    AdamW,
    ParamStore,
    Tape,
    Tensor,
    absval,
    add,
    avg_pool,
    bilinear_interp2d,
    concat,
    conv2d,
    conv3d,
    linear,
    mean,
    normalize,
    relu,
    reshape,
    silu,
    sub,
    tanh_,
    tsum,
)
from .triplane import PLANE_NAMES, TriplaneLatent


@dataclass
class AutoencoderConfig:
    latent_channels: int = 12
    feature_channels: int = 64
    mlp_width: int = 256
    enc_kernel: int = 4
    res_kernel: int = 5
    dtype: str = "f64"

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AutoencoderParams:
    config: AutoencoderConfig
    store: ParamStore = field(default_factory=ParamStore)
    # non-trainable eval-mode statistics of the refinement norms, keyed
    # dec.<plane>.norm.{mean,var}; populated after training
    buffers: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: AutoencoderConfig, rng: np.random.Generator) -> "AutoencoderParams":
        p = cls(config)
        s = p.store
        dt = config.np_dtype
        c = config.latent_channels
        f = config.feature_channels
        w = config.mlp_width
        ek = config.enc_kernel
        rk = config.res_kernel

        s.register("enc.w", kaiming_uniform(rng, (c, 4, ek, ek, ek), 4 * ek ** 3, dt))
        s.register("enc.b", kaiming_uniform(rng, (c,), 4 * ek ** 3, dt))
        s.register("enc.norm.scale", np.ones(c, dt))
        s.register("enc.norm.shift", np.zeros(c, dt))

        for name in PLANE_NAMES:
            s.register(f"dec.{name}.w1", kaiming_uniform(rng, (f, c, rk, rk), c * rk * rk, dt))
            s.register(f"dec.{name}.b1", kaiming_uniform(rng, (f,), c * rk * rk, dt))
            s.register(f"dec.{name}.norm.scale", np.ones(f, dt))
            s.register(f"dec.{name}.norm.shift", np.zeros(f, dt))
            s.register(f"dec.{name}.w2", kaiming_uniform(rng, (f, f, rk, rk), f * rk * rk, dt))
            s.register(f"dec.{name}.b2", kaiming_uniform(rng, (f,), f * rk * rk, dt))
            s.register(f"dec.{name}.sc.w", kaiming_uniform(rng, (f, c, 1, 1), c, dt))
            s.register(f"dec.{name}.sc.b", kaiming_uniform(rng, (f,), c, dt))

        for head, out_dim in (("geo", 1), ("tex", 3)):
            dims_in = [f, w, w + f, w, w]
            for i, din in enumerate(dims_in):
                s.register(f"{head}.w{i}", kaiming_uniform(rng, (w, din), din, dt))
                s.register(f"{head}.b{i}", kaiming_uniform(rng, (w,), din, dt))
            s.register(f"{head}.out.w", kaiming_uniform(rng, (out_dim, w), w, dt))
            s.register(f"{head}.out.b", kaiming_uniform(rng, (out_dim,), w, dt))
        return p

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.store.items())


def encode_tensors(grid_values: Tensor, params: AutoencoderParams) -> tuple[Tensor, Tensor, Tensor]:
    """Encoder forward on a [4,H,W,D] tensor; returns taped plane tensors."""
    if any(e % 2 for e in grid_values.shape[1:]):
        raise ValueError(f"grid extents must be even, got {grid_values.shape[1:]}")
    s = params.store
    h = conv3d(grid_values, s["enc.w"], s["enc.b"], stride=2, padding=1)
    h = normalize(h, "instance", 0, s["enc.norm.scale"], s["enc.norm.shift"],
                  spatial_ndim=3)
    h = tanh_(h)
    return (avg_pool(h, axes=3), avg_pool(h, axes=2), avg_pool(h, axes=1))


def encode(grid: SdfColorGrid, params: AutoencoderParams) -> TriplaneLatent:
    """Encode a grid into its triplane latent (no gradient recording)."""
    values = np.moveaxis(grid.values, 3, 0).astype(params.config.np_dtype)
    xy, xz, yz = encode_tensors(Tensor(values), params)
    return TriplaneLatent(xy.data, xz.data, yz.data)


def refine_plane(plane: Tensor, params: AutoencoderParams, name: str,
                 eval_mode: bool = False) -> Tensor:
    s = params.store
    pad = params.config.res_kernel // 2
    y = conv2d(plane, s[f"dec.{name}.w1"], s[f"dec.{name}.b1"], 1, pad)
    stats = None
    if eval_mode and f"dec.{name}.norm.mean" in params.buffers:
        # frozen statistics keep decoding local, so enlarged or edited
        # latents decode identically on preserved regions
        stats = (params.buffers[f"dec.{name}.norm.mean"],
                 params.buffers[f"dec.{name}.norm.var"])
    y = normalize(y, "instance", 0, s[f"dec.{name}.norm.scale"],
                  s[f"dec.{name}.norm.shift"], stats=stats)
    y = silu(y)
    y = conv2d(y, s[f"dec.{name}.w2"], s[f"dec.{name}.b2"], 1, pad)
    shortcut = conv2d(plane, s[f"dec.{name}.sc.w"], s[f"dec.{name}.sc.b"], 1, 0)
    return add(y, shortcut)


def refine_planes(planes, params: AutoencoderParams, eval_mode: bool = False):
    return tuple(refine_plane(p, params, n, eval_mode)
                 for p, n in zip(planes, PLANE_NAMES))


def record_norm_buffers(latent: TriplaneLatent, params: AutoencoderParams) -> None:
    """Freeze the refinement norm statistics of the trained latent."""
    s = params.store
    pad = params.config.res_kernel // 2
    for p, name in zip(latent.planes, PLANE_NAMES):
        y = conv2d(Tensor(p.astype(params.config.np_dtype)),
                   s[f"dec.{name}.w1"], s[f"dec.{name}.b1"], 1, pad).data
        params.buffers[f"dec.{name}.norm.mean"] = y.mean(axis=(1, 2))
        params.buffers[f"dec.{name}.norm.var"] = y.var(axis=(1, 2))


def _plane_points(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project per-axis normalized coords [N,3] onto the three planes."""
    return coords[:, (0, 1)], coords[:, (0, 2)], coords[:, (1, 2)]


def gather_features(refined, coords: np.ndarray, clamp_counter: dict | None = None):
    """Bilinear gather from refined planes at normalized coords, summed."""
    if clamp_counter is not None:
        out = int((np.abs(coords) > 1.0).any(axis=1).sum())
        clamp_counter["clamped"] = clamp_counter.get("clamped", 0) + out
    dtype = refined[0].dtype
    pts = [Tensor(p.astype(dtype)) for p in _plane_points(np.asarray(coords))]
    f = add(bilinear_interp2d(refined[0], pts[0]),
            bilinear_interp2d(refined[1], pts[1]))
    return add(f, bilinear_interp2d(refined[2], pts[2]))


def decode_features(latent: TriplaneLatent, params: AutoencoderParams,
                    coords: np.ndarray, refine: bool = True,
                    clamp_counter: dict | None = None,
                    eval_mode: bool = True) -> Tensor:
    """Features at normalized [-1,1] per-axis coords; [N, feature_channels].

    With refine=False the raw latent planes are gathered directly, a test
    hook that exposes the linearity of the interpolation stage.
    """
    planes = [Tensor(p) for p in latent.planes]
    if refine:
        planes = refine_planes(planes, params, eval_mode)
    return gather_features(planes, coords, clamp_counter)


def predict_sdf_color(features: Tensor, params: AutoencoderParams) -> tuple[Tensor, Tensor]:
    """MLP heads mapping summed plane features to distance and color."""
    if features.shape[1] != params.config.feature_channels:
        raise ValueError(
            f"feature width {features.shape[1]} != {params.config.feature_channels}")
    s = params.store

    def head(name: str) -> Tensor:
        h = features
        for i in range(5):
            if i == 2:
                h = concat([h, features], axis=1)
            h = relu(linear(h, s[f"{name}.w{i}"], s[f"{name}.b{i}"]))
        return linear(h, s[f"{name}.out.w"], s[f"{name}.out.b"])

    d_hat = reshape(head("geo"), (features.shape[0],))
    c_hat = head("tex")
    return d_hat, c_hat


def reconstruction_loss(d_hat: Tensor, c_hat: Tensor, d_target: np.ndarray,
                        c_target: np.ndarray) -> Tensor:
    """Mean over the batch of |d error| plus channel-summed |color error|."""
    dt = d_hat.dtype
    l_d = absval(sub(d_hat, Tensor(np.asarray(d_target, dtype=dt))))
    l_c = tsum(absval(sub(c_hat, Tensor(np.asarray(c_target, dtype=dt)))), axes=1)
    return mean(add(l_d, l_c))


def ae_loss(batch: SamplePoints, latent: TriplaneLatent, params: AutoencoderParams,
            geometry) -> Tensor:
    """Field reconstruction loss of a sample batch against its targets."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    coords = geometry.plane_coords(batch.positions)
    feats = decode_features(latent, params, coords)
    d_hat, c_hat = predict_sdf_color(feats, params)
    return reconstruction_loss(d_hat, c_hat, batch.dists, batch.colors)


@dataclass
class TrainResult:
    params: AutoencoderParams
    latent: TriplaneLatent
    loss_trace: np.ndarray


def cosine_lr(base_lr: float, step: int, total: int, floor_frac: float = 0.02) -> float:
    t = min(step / max(total - 1, 1), 1.0)
    lo = base_lr * floor_frac
    return lo + 0.5 * (base_lr - lo) * (1.0 + math.cos(math.pi * t))


def train_autoencoder(grid: SdfColorGrid, mesh, config: AutoencoderConfig,
                      iterations: int, batch_size: int, lr: float,
                      near_surface_count: int, sigma_offset: float,
                      rng: np.random.Generator, weight_decay: float = 1e-6,
                      log_every: int = 0, logger=None) -> TrainResult:
    """Fit the autoencoder to one grid's field by sampled point batches.

    Batches draw half from grid cell centers and half from near-surface
    samples. Aborts on a non-finite loss.
    """
    dt = config.np_dtype
    params = AutoencoderParams.init(config, rng)
    grid_pts = grid_sample_points(grid)
    near_pts = sample_near_surface_points(mesh, near_surface_count, sigma_offset,
                                          grid.eps_d, rng)
    pools = [grid_pts, near_pts if len(near_pts) else grid_pts]
    pools = [SamplePoints(p.positions, p.dists.astype(dt), p.colors.astype(dt))
             for p in pools]
    coord_pools = [grid.geometry.plane_coords(p.positions).astype(np.float64)
                   for p in pools]

    values = np.moveaxis(grid.values, 3, 0).astype(dt)
    grid_tensor = Tensor(values)
    opt = AdamW(params.store.tensors(), lr=lr, weight_decay=weight_decay)
    trace = np.zeros(iterations)

    half = batch_size // 2
    counts = (batch_size - half, half)
    for it in range(iterations):
        sel = [rng.integers(0, len(pool), n) for pool, n in zip(pools, counts)]
        coords = np.concatenate([cp[s] for cp, s in zip(coord_pools, sel)])
        d_t = np.concatenate([pool.dists[s] for pool, s in zip(pools, sel)])
        c_t = np.concatenate([pool.colors[s] for pool, s in zip(pools, sel)])

        with Tape() as tape:
            planes = encode_tensors(grid_tensor, params)
            refined = refine_planes(planes, params)
            feats = gather_features(refined, coords)
            d_hat, c_hat = predict_sdf_color(feats, params)
            loss = reconstruction_loss(d_hat, c_hat, d_t, c_t)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"autoencoder loss non-finite at iteration {it}")
        trace[it] = value
        opt.lr = cosine_lr(lr, it, iterations)
        opt.step(tape.gradients(loss, opt.params))
        if log_every and logger and (it + 1) % log_every == 0:
            logger.info("ae iter %d/%d loss %.5f", it + 1, iterations, value)

    xy, xz, yz = encode_tensors(grid_tensor, params)
    latent = TriplaneLatent(xy.data, xz.data, yz.data)
    record_norm_buffers(latent, params)
    return TrainResult(params, latent, trace)


def fit_latent_direct(grid: SdfColorGrid, config: AutoencoderConfig,
                      iterations: int, batch_size: int, lr: float,
                      rng: np.random.Generator) -> TrainResult:
    """Encoder-free ablation: optimize raw latent planes with the decoder.

    Kept as an experiment hook only; the supported path trains the encoder,
    which regularizes the latent.
    """
    dt = config.np_dtype
    params = AutoencoderParams.init(config, rng)
    dims = grid.geometry.latent_dims
    c = config.latent_channels
    shapes = [(c, dims[0], dims[1]), (c, dims[0], dims[2]), (c, dims[1], dims[2])]
    planes = [Tensor(0.01 * rng.standard_normal(s).astype(dt), requires_grad=True,
                     name=f"latent.{n}") for s, n in zip(shapes, PLANE_NAMES)]
    pts = grid_sample_points(grid)
    coords = grid.geometry.plane_coords(pts.positions)
    dists = pts.dists.astype(dt)
    colors = pts.colors.astype(dt)
    trainable = planes + params.store.tensors()
    opt = AdamW(trainable, lr=lr, weight_decay=0.0)
    trace = np.zeros(iterations)
    for it in range(iterations):
        sel = rng.integers(0, len(pts), batch_size)
        with Tape() as tape:
            refined = refine_planes(planes, params)
            feats = gather_features(refined, coords[sel])
            d_hat, c_hat = predict_sdf_color(feats, params)
            loss = reconstruction_loss(d_hat, c_hat, dists[sel], colors[sel])
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"latent fit loss non-finite at iteration {it}")
        trace[it] = value
        opt.lr = cosine_lr(lr, it, iterations)
        opt.step(tape.gradients(loss, trainable))
    latent = TriplaneLatent(*(p.data for p in planes))
    return TrainResult(params, latent, trace)


def decode_volume(latent: TriplaneLatent, params: AutoencoderParams, geometry,
                  dims: tuple[int, int, int] | None = None,
                  chunk: int = 65536, with_color: bool = False):
    """Decode the latent into a dense SDF (and optionally color) grid."""
    dims = dims or tuple(2 * d for d in latent.dims)
    planes = refine_planes([Tensor(p) for p in latent.planes], params,
                           eval_mode=True)
    xs = [(np.arange(n) + 0.5 - n / 2.0) * geometry.spacing for n in dims]
    pts = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 3)
    coords = pts / np.array([latent.dims[a] * geometry.spacing for a in range(3)])
    sdf = np.empty(len(pts))
    color = np.empty((len(pts), 3)) if with_color else None
    for s in range(0, len(pts), chunk):
        feats = gather_features(planes, coords[s:s + chunk])
        d_hat, c_hat = predict_sdf_color(feats, params)
        sdf[s:s + chunk] = d_hat.data
        if with_color:
            color[s:s + chunk] = np.clip(c_hat.data, 0.0, 1.0)
    sdf = sdf.reshape(dims)
    if with_color:
        return sdf, color.reshape(dims + (3,))
    return sdf


def make_color_query(latent: TriplaneLatent, params: AutoencoderParams, geometry):
    """Color callback for texture baking: positions -> clamped RGB."""
    planes = refine_planes([Tensor(p) for p in latent.planes], params,
                           eval_mode=True)
    half_span = np.array([latent.dims[a] * geometry.spacing for a in range(3)])

    def query(points: np.ndarray) -> np.ndarray:
        out = np.empty((len(points), 3))
        coords = np.asarray(points, dtype=np.float64) / half_span
        for s in range(0, len(points), 65536):
            feats = gather_features(planes, coords[s:s + 65536])
            _, c_hat = predict_sdf_color(feats, params)
            out[s:s + 65536] = c_hat.data
        return np.clip(out, 0.0, 1.0)

    return query
