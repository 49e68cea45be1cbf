"""Noise schedule, deterministic DDIM sampling/inversion and the lockstep
multi-stream runners used for inversion and generation.

Step indices run 0..T with 0 the clean latent and T the noisiest one.
Index 0 uses alpha_bar = 1; index k >= 1 uses the training step
``sched.timestep(k)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .attention import (
    Ablation,
    AttentionMode,
    KVRegistry,
    Mode,
    Router,
    STANDARD,
    Stream,
)
from .imagemask import BinaryMask, resize_mask_to


class NonFiniteLatentError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    num_train_steps: int
    alpha_bar: np.ndarray
    sampled_steps: np.ndarray  # length T, descending training-step indices

    @property
    def T(self) -> int:
        return len(self.sampled_steps)

    def timestep(self, idx: int) -> int:
        if not 1 <= idx <= self.T:
            raise IndexError(f"step index {idx} has no training timestep (valid 1..{self.T})")
        return int(self.sampled_steps[self.T - idx])

    def alpha(self, idx: int) -> float:
        if idx == 0:
            return 1.0
        return float(self.alpha_bar[self.timestep(idx)])


def make_schedule(num_train_steps: int = 1000, T: int = 25, beta_start: float = 0.00085,
                  beta_end: float = 0.012) -> NoiseSchedule:
    """Linear-beta schedule with ``T`` evenly spaced sampled steps ending at
    the last training step."""
    if not 1 <= T <= num_train_steps:
        raise ValueError(f"need 1 <= T <= num_train_steps, got T={T}, N={num_train_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    k = np.arange(T, 0, -1)
    steps = np.round(k * num_train_steps / T).astype(np.int64) - 1
    alpha_bar.setflags(write=False)
    steps.setflags(write=False)
    return NoiseSchedule(num_train_steps, alpha_bar, steps)


@dataclass(frozen=True, eq=False)
class Latent:
    data: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"latent must be h x w x c, got shape {d.shape}")
        _guard(d)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class InpaintCond:
    """Extra denoiser inputs: latent-resolution mask and masked-image latent."""

    mask_latent: np.ndarray
    masked_image_latent: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask_latent, dtype=np.float64)
        z = np.array(self.masked_image_latent, dtype=np.float64)
        if m.shape != z.shape[:2]:
            raise ValueError(f"mask {m.shape} does not match masked latent {z.shape}")
        m.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "mask_latent", m)
        object.__setattr__(self, "masked_image_latent", z)


class DenoiserBackend(Protocol):
    latent_shape: tuple[int, int, int]
    attention_layers: dict[int, tuple[int, int]]  # layer id -> token grid (H, W)

    def predict_noise(self, z: np.ndarray, t: int, cond: InpaintCond, router) -> np.ndarray: ...


def _guard(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLatentError("latent contains NaN or Inf")
    return arr


def _coeffs(sched, from_idx, to_idx):
    a_from, a_to = sched.alpha(from_idx), sched.alpha(to_idx)
    return a_from, a_to


def denoise_given_eps(z, eps, sched: NoiseSchedule, from_idx: int, to_idx: int) -> np.ndarray:
    a_from, a_to = _coeffs(sched, from_idx, to_idx)
    x0 = (z - np.sqrt(1.0 - a_from) * eps) / np.sqrt(a_from)
    return _guard(np.sqrt(a_to) * x0 + np.sqrt(1.0 - a_to) * eps)


def invert_given_eps(z_prev, eps, sched: NoiseSchedule, from_idx: int, to_idx: int) -> np.ndarray:
    """Exact algebraic inverse of :func:`denoise_given_eps` for fixed ``eps``."""
    a_from, a_to = _coeffs(sched, from_idx, to_idx)
    if a_from == a_to:
        return np.array(z_prev)
    ratio = np.sqrt(a_to / a_from)
    coef = np.sqrt(1.0 - a_to) - ratio * np.sqrt(1.0 - a_from)
    return _guard(ratio * z_prev + coef * eps)


def ddim_denoise_step(z_t: Latent, eps, sched: NoiseSchedule, from_idx: int, to_idx: int) -> Latent:
    if from_idx <= to_idx:
        raise ValueError("denoising must go from a noisier to a cleaner step index")
    return Latent(denoise_given_eps(z_t.data, eps, sched, from_idx, to_idx), to_idx)


def ddim_invert_step(z_prev: Latent, sched: NoiseSchedule, from_idx: int, to_idx: int,
                     backend: DenoiserBackend, cond: InpaintCond, router, iters: int = 5) -> Latent:
    """One inversion step refined by ``iters`` fixed-point iterations.

    Starting from ``sqrt(a_to / a_from) * z_prev``, each iteration predicts
    the noise at the current estimate and re-applies the inverse DDIM update.
    ``router`` may be a callable ``iteration -> router`` so that each
    iteration captures attention under its own key.
    """
    if to_idx <= from_idx:
        raise ValueError("inversion must go from a cleaner to a noisier step index")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a_from, a_to = _coeffs(sched, from_idx, to_idx)
    if a_from == a_to:
        return Latent(z_prev.data, to_idx)
    t = sched.timestep(to_idx)
    z = np.sqrt(a_to / a_from) * z_prev.data
    for k in range(iters):
        r = router(k) if isinstance(router, _RouterFactory) else router
        eps = backend.predict_noise(z, t, cond, r)
        z = invert_given_eps(z_prev.data, eps, sched, from_idx, to_idx)
    return Latent(z, to_idx)


class _RouterFactory:
    def __init__(self, fn: Callable[[int], object]):
        self.fn = fn

    def __call__(self, k):
        return self.fn(k)


def per_iteration(fn: Callable[[int], object]) -> _RouterFactory:
    """Mark ``fn(iteration) -> router`` for :func:`ddim_invert_step`."""
    return _RouterFactory(fn)


class TokenMasks:
    """Source mask resampled to each attention layer's token grid, cached."""

    def __init__(self, mask: BinaryMask):
        self.mask = mask
        self._cache = {}

    def __call__(self, layer, grid):
        grid = tuple(grid)
        if grid not in self._cache:
            self._cache[grid] = resize_mask_to(self.mask, *grid).bits.reshape(-1)
        return self._cache[grid]


@dataclass
class StreamInput:
    latent: Latent
    cond: InpaintCond


@dataclass
class InversionResult:
    latents: dict
    registry: KVRegistry
    trajectory: dict = field(default_factory=dict)


INVERSION_ORDER = (Stream.SRC, Stream.TAR, Stream.GEO)


def invert_streams(streams: dict, sched: NoiseSchedule, backend: DenoiserBackend, iters: int = 5,
                   ta_ablation=Ablation.BOTH, layers=None, registry: KVRegistry | None = None,
                   keep_trajectory: bool = False) -> InversionResult:
    """Invert the src, tar and geo streams in lockstep.

    For every step and fixed-point iteration the streams run in the order
    src, tar, geo so that the geometry stream's texture-aligning attention
    finds the target's K/V for the same (timestep, layer, iteration).
    Streams missing from ``streams`` are skipped.
    """
    registry = registry if registry is not None else KVRegistry()
    order = [Stream(s) for s in INVERSION_ORDER if Stream(s) in {Stream(k) for k in streams}]
    inputs = {Stream(k): v for k, v in streams.items()}
    for s in order:
        if inputs[s].latent.step_index != 0:
            raise ValueError(f"stream {s.value} must start from a clean latent")
    routes = {s: STANDARD for s in order}
    if Stream.GEO in routes:
        routes[Stream.GEO] = AttentionMode(Mode.TEXTURE_ALIGNING, ta_ablation)

    cur = {s: inputs[s].latent.data for s in order}
    traj = {s: [cur[s]] for s in order} if keep_trajectory else {}
    for to_idx in range(1, sched.T + 1):
        from_idx = to_idx - 1
        t = sched.timestep(to_idx)
        ratio = np.sqrt(sched.alpha(to_idx) / sched.alpha(from_idx))
        est = {s: ratio * cur[s] for s in order}
        for k in range(iters):
            for s in order:
                router = Router(registry, s, t, k, routes[s], layers=layers)
                eps = backend.predict_noise(est[s], t, inputs[s].cond, router)
                est[s] = invert_given_eps(cur[s], eps, sched, from_idx, to_idx)
        registry.release(t)
        cur = est
        if keep_trajectory:
            for s in order:
                traj[s].append(cur[s])
    return InversionResult({s: Latent(cur[s], sched.T) for s in order}, registry, traj)


def generate(z_out_T: Latent, z_src_T: Latent | None, src_mask: BinaryMask | None,
             sched: NoiseSchedule, backend: DenoiserBackend, out_cond: InpaintCond,
             src_cond: InpaintCond | None = None, gp_ablation=Ablation.BOTH, layers=None,
             registry: KVRegistry | None = None) -> Latent:
    """Denoise the blended latent with geometry-preserving attention.

    The source stream is denoised alongside with standard attention; at
    every (timestep, layer) it runs first so the output stream can read its
    K/V, filtered to the source-mask tokens. With ``gp_ablation=self_only``
    the source stream is not needed and is skipped.
    """
    registry = registry if registry is not None else KVRegistry()
    route = AttentionMode(Mode.GEOMETRY_PRESERVING, gp_ablation)
    use_src = route.reads_other
    if z_out_T.step_index != sched.T:
        raise ValueError("output latent must be at step index T")
    if use_src:
        if z_src_T is None or src_mask is None or src_cond is None:
            raise ValueError("geometry-preserving attention needs the source latent, mask and cond")
        if z_src_T.step_index != sched.T:
            raise ValueError("source latent must be at step index T")
        masks = TokenMasks(src_mask)
        z_src = z_src_T.data
    z_out = z_out_T.data
    for from_idx in range(sched.T, 0, -1):
        to_idx = from_idx - 1
        t = sched.timestep(from_idx)
        if use_src:
            eps_src = backend.predict_noise(z_src, t, src_cond, Router(registry, Stream.SRC, t))
        eps_out = backend.predict_noise(
            z_out, t, out_cond,
            Router(registry, Stream.OUT, t, route=route, layers=layers, token_masks=masks if use_src else None),
        )
        if use_src:
            z_src = denoise_given_eps(z_src, eps_src, sched, from_idx, to_idx)
        z_out = denoise_given_eps(z_out, eps_out, sched, from_idx, to_idx)
        registry.release(t)
    return Latent(z_out, 0)


def sample(z_T: Latent, sched: NoiseSchedule, backend: DenoiserBackend, cond: InpaintCond,
           registry: KVRegistry | None = None, stream=Stream.OUT) -> Latent:
    """Plain DDIM sampling with standard attention."""
    registry = registry if registry is not None else KVRegistry()
    z = z_T.data
    for from_idx in range(z_T.step_index, 0, -1):
        t = sched.timestep(from_idx)
        eps = backend.predict_noise(z, t, cond, Router(registry, stream, t))
        z = denoise_given_eps(z, eps, sched, from_idx, from_idx - 1)
        registry.release(t)
    return Latent(z, 0)


def invert(z0: Latent, sched: NoiseSchedule, backend: DenoiserBackend, cond: InpaintCond,
           iters: int = 5, registry: KVRegistry | None = None, stream=Stream.TAR) -> Latent:
    """Single-stream inversion with standard attention."""
    res = invert_streams({stream: StreamInput(z0, cond)}, sched, backend, iters, registry=registry)
    return res.latents[Stream(stream)]
