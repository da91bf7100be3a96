"""Latent denoising diffusion over triplanes.

The denoiser is a fully convolutional U-Net with a single downsample.
Every convolution is triplane-aware: partner planes are average-pooled
along their off-plane axis, re-expanded, and concatenated onto the plane
before a regular 2D convolution, so the three planes stay coherent.
The network predicts the clean latent (x0 prediction) and sampling runs
the ancestral reverse chain from unit Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    AdamW,
    ParamStore,
    Tape,
    Tensor,
    add,
    avg_pool2d,
    broadcast_to,
    concat,
    conv2d,
    linear,
    mean,
    normalize,
    reshape,
    scale,
    silu,
    square,
    sub,
    time_embedding,
    tsum,
    upsample2x,
)
from .triplane import PLANE_NAMES, TriplaneLatent, plane_dims_for

from .autoencoder import cosine_lr, kaiming_uniform

TIME_EMBED_DIM = 64

# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray        # [T], t = 1..T
    beta_min: float
    beta_max: float

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at step t with alpha_bar(0) defined as 1."""
        bars = np.concatenate([[1.0], self.alpha_bars])
        return bars[np.asarray(t)]

    def validate(self) -> "DiffusionSchedule":
        b = self.betas
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie strictly in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        bars = self.alpha_bars
        if np.any(np.diff(bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if bars[-1] > 5e-3:
            raise ValueError(f"alpha_bar at T={self.T} is {bars[-1]:.2e} > 5e-3; "
                             "terminal noise level too low")
        return self

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"T": self.T, "beta_min": self.beta_min,
                       "beta_max": self.beta_max}, fh, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "DiffusionSchedule":
        with open(path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        return make_schedule(meta["T"], meta["beta_min"], meta["beta_max"])


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with endpoints scaled by 1000/T.

    The scaling keeps the terminal alpha_bar comparable across step counts.
    """
    if T < 10:
        raise ValueError("T must be >= 10")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    s = 1000.0 / T
    betas = np.linspace(beta_min * s, beta_max * s, T)
    return DiffusionSchedule(betas, beta_min, beta_max).validate()


def q_sample(h0: TriplaneLatent, t: int, eps: TriplaneLatent,
             schedule: DiffusionSchedule) -> TriplaneLatent:
    """Forward-process draw: sqrt(ab_t) h0 + sqrt(1 - ab_t) eps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    ab = float(schedule.alpha_bar(t))
    c0, c1 = math.sqrt(ab), math.sqrt(1.0 - ab)
    out = []
    for h, e in zip(h0.planes, eps.planes):
        if h.shape != e.shape:
            raise ValueError(f"noise shape {e.shape} != latent shape {h.shape}")
        out.append(c0 * h + c1 * e)
    return TriplaneLatent(*out)


# ---------------------------------------------------------------------------
# layout and receptive field


@dataclass(frozen=True)
class DenoiserLayout:
    pre_blocks: int = 1
    mid_blocks: int = 2
    post_blocks: int = 1
    base_channels: int = 64
    kernel: int = 3

    def block_plan(self, latent_channels: int):
        """Per-block (stage, c_in, c_out) plus head channel bookkeeping."""
        b = self.base_channels
        plan = []
        for i in range(self.pre_blocks):
            plan.append(("pre", b, b))
        mid_out = b
        for i in range(self.mid_blocks):
            plan.append(("mid", mid_out, 2 * b))
            mid_out = 2 * b
        cat = mid_out + b if self.pre_blocks else mid_out
        cin = cat
        for i in range(self.post_blocks):
            plan.append(("post", cin, b))
            cin = b
        return plan, cin


def receptive_field_interval(layout: DenoiserLayout, index: int, size: int) -> tuple[int, int]:
    """Exact index interval of the impulse response along one plane axis.

    Interval arithmetic over the layer sequence, independent of the conv
    kernels themselves; the measured impulse spread must match it exactly.
    """
    p = (layout.kernel - 1) // 2
    lo = hi = index
    n = size

    def conv(lo, hi, n, r):
        return max(0, lo - r), min(n - 1, hi + r)

    for _ in range(2 * layout.pre_blocks):
        lo, hi = conv(lo, hi, n, p)
    lo, hi, n = lo // 2, hi // 2, n // 2
    for _ in range(2 * layout.mid_blocks):
        lo, hi = conv(lo, hi, n, p)
    lo, hi, n = max(0, 2 * lo - 1), min(2 * n - 1, 2 * hi + 2), 2 * n
    for _ in range(2 * layout.post_blocks):
        lo, hi = conv(lo, hi, n, p)
    return lo, hi


def receptive_field_extent(layout: DenoiserLayout, size: int = 4096) -> int:
    """Impulse-response width at the center of a large plane."""
    lo, hi = receptive_field_interval(layout, size // 2, size)
    return hi - lo + 1


PRESET_FRACTIONS = {"small": 0.2, "default": 0.4, "large": 0.8}


def resolve_depth_preset(preset: str, plane_size: int, base_channels: int = 64,
                         kernel: int = 3) -> DenoiserLayout:
    """Pick the block layout whose receptive field best covers the target
    fraction of the plane."""
    if preset not in PRESET_FRACTIONS:
        raise ValueError(f"unknown depth preset {preset!r}; "
                         f"expected one of {sorted(PRESET_FRACTIONS)}")
    target = PRESET_FRACTIONS[preset] * plane_size
    candidates = [DenoiserLayout(1, 0, 0, base_channels, kernel)]
    candidates += [DenoiserLayout(1, m, 1, base_channels, kernel) for m in range(17)]
    best = min(candidates,
               key=lambda lay: (abs(receptive_field_extent(lay) - target),
                                lay.pre_blocks + lay.mid_blocks + lay.post_blocks))
    return best


# ---------------------------------------------------------------------------
# parameters

# For each output plane: its two partners, the partner axis to pool, and
# whether the pooled vector varies along the output's rows or columns.
_PARTNERS = {
    0: ((1, -1, "rows"), (2, -1, "cols")),
    1: ((0, -1, "rows"), (2, -2, "cols")),
    2: ((0, -2, "rows"), (1, -2, "cols")),
}


def _norm_groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return g


@dataclass
class DenoiserParams:
    layout: DenoiserLayout
    latent_channels: int
    dtype: str = "f64"
    store: ParamStore = field(default_factory=ParamStore)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @classmethod
    def init(cls, layout: DenoiserLayout, latent_channels: int,
             rng: np.random.Generator, dtype: str = "f64") -> "DenoiserParams":
        p = cls(layout, latent_channels, dtype)
        s = p.store
        dt = p.np_dtype
        k = layout.kernel
        b = layout.base_channels
        c = latent_channels

        def tconv(prefix, cin, cout, kk):
            for name in PLANE_NAMES:
                s.register(f"{prefix}.{name}.w",
                           kaiming_uniform(rng, (cout, 3 * cin, kk, kk), 3 * cin * kk * kk, dt))
                s.register(f"{prefix}.{name}.b",
                           kaiming_uniform(rng, (cout,), 3 * cin * kk * kk, dt))

        tconv("entry", c, b, 1)
        plan, head_in = layout.block_plan(c)
        for i, (stage, cin, cout) in enumerate(plan):
            pre = f"block{i}"
            tconv(f"{pre}.tc1", cin, cout, k)
            s.register(f"{pre}.time.w1",
                       kaiming_uniform(rng, (TIME_EMBED_DIM, TIME_EMBED_DIM), TIME_EMBED_DIM, dt))
            s.register(f"{pre}.time.b1",
                       kaiming_uniform(rng, (TIME_EMBED_DIM,), TIME_EMBED_DIM, dt))
            s.register(f"{pre}.time.w2",
                       kaiming_uniform(rng, (cout, TIME_EMBED_DIM), TIME_EMBED_DIM, dt))
            s.register(f"{pre}.time.b2",
                       kaiming_uniform(rng, (cout,), TIME_EMBED_DIM, dt))
            s.register(f"{pre}.norm.scale", np.ones(cout, dt))
            s.register(f"{pre}.norm.shift", np.zeros(cout, dt))
            tconv(f"{pre}.tc2", cout, cout, k)
            tconv(f"{pre}.sc", cin, cout, 1)
        s.register("out.norm.scale", np.ones(head_in, dt))
        s.register("out.norm.shift", np.zeros(head_in, dt))
        tconv("out", head_in, c, 1)
        return p

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.store.items())


# ---------------------------------------------------------------------------
# forward


def _expand_partner(partner: Tensor, pool_axis: int, place: str, out_spatial) -> Tensor:
    pooled = mean(partner, axes=pool_axis, keepdims=True)
    lead = pooled.shape[:-2]
    v = pooled.shape[-2] if pool_axis in (-1, partner.ndim - 1) else pooled.shape[-1]
    target = lead + ((v, 1) if place == "rows" else (1, v))
    if pooled.shape != target:
        pooled = reshape(pooled, target)
    return broadcast_to(pooled, lead + tuple(out_spatial))


def triplane_conv(planes, weights, biases, kernel: int, padding: int | None = None,
                  cross_plane: bool = True):
    """Triplane-aware convolution producing all three output planes.

    For each output plane the two partners are average-pooled along their
    off-plane axis, re-expanded over the missing axis, concatenated after
    the plane's own features ([own; row partner; col partner]), and run
    through that output's own 2D convolution.
    """
    if padding is None:
        padding = (kernel - 1) // 2
    shapes = [p.shape for p in planes]
    if shapes[0][-2] != shapes[1][-2] or shapes[0][-1] != shapes[2][-2] \
            or shapes[1][-1] != shapes[2][-1]:
        raise ValueError(f"inconsistent plane extents: {shapes}")
    outs = []
    for o, plane in enumerate(planes):
        parts = [plane]
        for partner_idx, pool_axis, place in _PARTNERS[o]:
            expanded = _expand_partner(planes[partner_idx], pool_axis, place,
                                       plane.shape[-2:])
            if not cross_plane:
                expanded = scale(expanded, 0.0)
            parts.append(expanded)
        stacked = concat(parts, axis=plane.ndim - 3)
        outs.append(conv2d(stacked, weights[o], biases[o], 1, padding))
    return tuple(outs)


def _tconv_params(params: DenoiserParams, prefix: str):
    s = params.store
    ws = [s[f"{prefix}.{n}.w"] for n in PLANE_NAMES]
    bs = [s[f"{prefix}.{n}.b"] for n in PLANE_NAMES]
    return ws, bs


def _resblock(planes, temb: Tensor, params: DenoiserParams, idx: int,
              frozen_norm: bool, cross_plane: bool):
    s = params.store
    pre = f"block{idx}"
    k = params.layout.kernel
    w1, b1 = _tconv_params(params, f"{pre}.tc1")
    y = triplane_conv(planes, w1, b1, k, cross_plane=cross_plane)
    hidden = silu(linear(temb, s[f"{pre}.time.w1"], s[f"{pre}.time.b1"]))
    bias = linear(hidden, s[f"{pre}.time.w2"], s[f"{pre}.time.b2"])
    bias = reshape(bias, bias.shape[:-1] + (bias.shape[-1], 1, 1))
    y = tuple(add(p, bias) for p in y)
    y = tuple(normalize(p, "group", _norm_groups(p.shape[-3]),
                        s[f"{pre}.norm.scale"], s[f"{pre}.norm.shift"],
                        frozen_stats=frozen_norm) for p in y)
    y = tuple(silu(p) for p in y)
    w2, b2 = _tconv_params(params, f"{pre}.tc2")
    y = triplane_conv(y, w2, b2, k, cross_plane=cross_plane)
    wsc, bsc = _tconv_params(params, f"{pre}.sc")
    sc = triplane_conv(planes, wsc, bsc, 1, cross_plane=cross_plane)
    return tuple(add(a, b) for a, b in zip(y, sc))


def denoiser_apply(planes, t, params: DenoiserParams, frozen_norm: bool = False,
                   cross_plane: bool = True):
    """U-Net forward on batched plane tensors [N,C,A,B]; t is [N] steps."""
    for p in planes:
        a, b = p.shape[-2:]
        if a < 8 or b < 8 or a % 2 or b % 2:
            raise ValueError(f"plane extents must be even and >= 8, got {p.shape}")
    s = params.store
    temb = time_embedding(np.atleast_1d(np.asarray(t)), TIME_EMBED_DIM,
                          dtype=params.np_dtype)

    we, be = _tconv_params(params, "entry")
    h = triplane_conv(planes, we, be, 1, cross_plane=cross_plane)
    plan, head_in = params.layout.block_plan(params.latent_channels)
    idx = 0
    for stage, cin, cout in plan:
        if stage != "pre":
            break
        h = _resblock(h, temb, params, idx, frozen_norm, cross_plane)
        idx += 1
    skip = h
    h = tuple(avg_pool2d(p, 2) for p in h)
    for j, (stage, cin, cout) in enumerate(plan):
        if stage != "mid":
            continue
        h = _resblock(h, temb, params, j, frozen_norm, cross_plane)
    h = tuple(upsample2x(p) for p in h)
    if params.layout.pre_blocks:
        h = tuple(concat([u, sk], axis=u.ndim - 3) for u, sk in zip(h, skip))
    for j, (stage, cin, cout) in enumerate(plan):
        if stage != "post":
            continue
        h = _resblock(h, temb, params, j, frozen_norm, cross_plane)
    h = tuple(normalize(p, "group", _norm_groups(p.shape[-3]),
                        s["out.norm.scale"], s["out.norm.shift"],
                        frozen_stats=frozen_norm) for p in h)
    h = tuple(silu(p) for p in h)
    wo, bo = _tconv_params(params, "out")
    return triplane_conv(h, wo, bo, 1, cross_plane=cross_plane)


def denoiser_forward(noisy: TriplaneLatent, t: int, params: DenoiserParams) -> TriplaneLatent:
    """Predicted clean latent for a single noisy latent at step t."""
    planes = [Tensor(p[None].astype(params.np_dtype)) for p in noisy.planes]
    out = denoiser_apply(planes, np.array([t]), params)
    return TriplaneLatent(*(o.data[0] for o in out))


# ---------------------------------------------------------------------------
# training


def diffusion_loss(h0: TriplaneLatent, t, eps_planes, params: DenoiserParams,
                   schedule: DiffusionSchedule, predict: str = "x0") -> Tensor:
    """Mean squared error over all plane elements, batched over draws.

    predict="x0" trains the network to output the clean latent; "eps" is
    kept only as an ablation hook.
    """
    t = np.atleast_1d(np.asarray(t))
    n = len(t)
    dt = params.np_dtype
    ab = schedule.alpha_bar(t).astype(dt)[:, None, None, None]
    noisy, targets = [], []
    for h, e in zip(h0.planes, eps_planes):
        hb = np.broadcast_to(h.astype(dt), (n,) + h.shape)
        eb = np.asarray(e, dtype=dt)
        if eb.shape != hb.shape:
            raise ValueError(f"noise shape {eb.shape} != batched plane {hb.shape}")
        noisy.append(Tensor(np.sqrt(ab) * hb + np.sqrt(1.0 - ab) * eb))
        targets.append(hb if predict == "x0" else eb)
    preds = denoiser_apply(noisy, t, params)
    total = sum(p.size for p in preds)
    acc = None
    for pred, tgt in zip(preds, targets):
        term = tsum(square(sub(pred, Tensor(tgt))))
        acc = term if acc is None else add(acc, term)
    return scale(acc, 1.0 / total)


@dataclass
class DiffusionTrainResult:
    params: DenoiserParams
    loss_trace: np.ndarray


def train_diffusion(h0: TriplaneLatent, schedule: DiffusionSchedule,
                    layout: DenoiserLayout, iterations: int, batch_size: int,
                    lr: float, rng: np.random.Generator, dtype: str = "f64",
                    weight_decay: float = 1e-6, predict: str = "x0",
                    log_every: int = 0, logger=None) -> DiffusionTrainResult:
    """Fit the denoiser to one latent with uniform timestep draws."""
    params = DenoiserParams.init(layout, h0.channels, rng, dtype)
    opt = AdamW(params.store.tensors(), lr=lr, weight_decay=weight_decay)
    trace = np.zeros(iterations)
    h0 = h0.astype(params.np_dtype)
    for it in range(iterations):
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        eps = [rng.standard_normal((batch_size,) + p.shape).astype(params.np_dtype)
               for p in h0.planes]
        with Tape() as tape:
            loss = diffusion_loss(h0, t, eps, params, schedule, predict)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"diffusion loss non-finite at iteration {it}")
        trace[it] = value
        opt.lr = cosine_lr(lr, it, iterations)
        opt.step(tape.gradients(loss, opt.params))
        if log_every and logger and (it + 1) % log_every == 0:
            logger.info("diffusion iter %d/%d loss %.6f", it + 1, iterations, value)
    return DiffusionTrainResult(params, trace)


# ---------------------------------------------------------------------------
# sampling


def ddpm_coefficients(t: int, schedule: DiffusionSchedule) -> tuple[float, float, float]:
    """(clean weight, noisy weight, sigma) of the reverse-step mean."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    # plain floats: numpy scalars would silently promote f32 latents
    beta = float(schedule.betas[t - 1])
    alpha = 1.0 - beta
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t - 1))
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    c1 = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    sigma = math.sqrt(beta)
    return c0, c1, sigma


def ddpm_step(h_t: TriplaneLatent, t: int, params: DenoiserParams,
              schedule: DiffusionSchedule, rng: np.random.Generator) -> TriplaneLatent:
    """One reverse transition; the noise term is dropped at t=1."""
    c0, c1, sigma = ddpm_coefficients(t, schedule)
    pred = denoiser_forward(h_t, t, params)
    out = []
    for p, x in zip(pred.planes, h_t.planes):
        step = c0 * p + c1 * x
        if t > 1:
            step = step + sigma * rng.standard_normal(x.shape)
        out.append(step)
    return TriplaneLatent(*out)


def sample_latents(params: DenoiserParams, schedule: DiffusionSchedule,
                   plane_dims: tuple[int, int, int], seed: int, count: int = 1,
                   step_hook=None) -> list[TriplaneLatent]:
    """Ancestral sampling from unit Gaussian noise, batched over samples.

    plane_dims are latent cells along x, y, z. step_hook(h_planes, t) may
    rewrite the [N,C,A,B] numpy planes after each step (masked control).
    """
    for d in plane_dims:
        if d < 8 or d % 2:
            raise ValueError(f"latent dims must be even and >= 8, got {plane_dims}")
    rng = np.random.default_rng(seed)
    c = params.latent_channels
    dt = params.np_dtype
    shapes = [(count, c) + s for s in plane_dims_for(plane_dims)]
    h = [rng.standard_normal(sh).astype(dt) for sh in shapes]
    for t in range(schedule.T, 0, -1):
        c0, c1, sigma = ddpm_coefficients(t, schedule)
        preds = denoiser_apply([Tensor(p) for p in h], np.full(count, t), params)
        nxt = []
        for pred, x in zip(preds, h):
            step = c0 * pred.data + c1 * x
            if t > 1:
                step = step + sigma * rng.standard_normal(x.shape).astype(dt)
            nxt.append(step)
        h = nxt
        if step_hook is not None:
            h = step_hook(h, t)
    return [TriplaneLatent(*(p[i] for p in h)) for i in range(count)]


def sample_latent(params: DenoiserParams, schedule: DiffusionSchedule,
                  plane_dims: tuple[int, int, int], seed: int,
                  step_hook=None) -> TriplaneLatent:
    latent = sample_latents(params, schedule, plane_dims, seed, 1, step_hook)[0]
    band = max(float(np.abs(p).max()) for p in latent.planes)
    if band > 3.0:
        import logging
        logging.getLogger(__name__).warning(
            "sampled latent magnitude %.2f outside the expected [-3,3] band", band)
    return latent


# ---------------------------------------------------------------------------
# receptive field measurement


def measure_receptive_field(layout: DenoiserLayout, latent_channels: int,
                            plane_size: int, seed: int = 0) -> dict:
    """Impulse-response support of the per-plane conv stack.

    Uses magnitude weights, zero biases, frozen normalization statistics,
    and disabled cross-plane pooling so the response support is exactly
    the convolutional footprint.
    """
    rng = np.random.default_rng(seed)
    params = DenoiserParams.init(layout, latent_channels, rng)
    for name, tensor in params.store.items():
        if name.endswith(".scale"):
            continue   # keep unit norm scales
        if name.endswith((".b", ".shift")) or "time" in name:
            tensor.data = np.zeros_like(tensor.data)
        else:
            tensor.data = np.abs(tensor.data) + 1e-3
    n = plane_size
    center = n // 2
    base = [Tensor(np.zeros((1, latent_channels, n, n))) for _ in range(3)]
    out0 = denoiser_apply(base, np.array([1]), params, frozen_norm=True,
                          cross_plane=False)
    imp = [np.zeros((1, latent_channels, n, n)) for _ in range(3)]
    imp[0][0, 0, center, center] = 1.0
    out1 = denoiser_apply([Tensor(p) for p in imp], np.array([1]), params,
                          frozen_norm=True, cross_plane=False)
    diff = np.abs(out1[0].data - out0[0].data).sum(axis=(0, 1))
    rows = np.flatnonzero(diff.sum(axis=1) > 0)
    cols = np.flatnonzero(diff.sum(axis=0) > 0)
    measured = (int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))
    lo, hi = receptive_field_interval(layout, center, n)
    return {
        "measured": measured,
        "analytic": (lo, hi, lo, hi),
        "extent": receptive_field_extent(layout),
        "plane_size": n,
    }
