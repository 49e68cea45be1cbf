"""Embedded property checks run by ``geotransfer selftest``.

Each check compares the library against an independent reference (naive
loops, closed forms or elementwise selects) on the toy backend.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import diffusion as dif
from .backends.toy import ToyDenoiser, ToyLatentCodec
from .editing import ColorStats, color_shift_raw
from .imagemask import BinaryMask, Image, resize_mask_to
from .pipeline import PipelineConfig, blend_latents, harmonize, predicted_census
from .synthetic import scene


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def naive_attention(q, k, v):
    """Row-by-row softmax attention with explicit loops."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = [sum(q[i, j] * k[m, j] for j in range(d)) / math.sqrt(d) for m in range(k.shape[0])]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        s = sum(w)
        for m in range(k.shape[0]):
            out[i] += (w[m] / s) * v[m]
    return out


def _random_case(rng, with_extra=True):
    n, m, d = (int(x) for x in rng.integers(1, 17, size=3))
    m2 = int(rng.integers(0, 17)) if with_extra else 0
    dv = int(rng.integers(1, 17))
    q = rng.normal(size=(n, d))
    k, v = rng.normal(size=(m, d)), rng.normal(size=(m, dv))
    k2, v2 = rng.normal(size=(m2, d)), rng.normal(size=(m2, dv))
    return q, k, v, k2, v2


def check_attention_oracle(cases=200, seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        q, k, v, k2, v2 = _random_case(rng)
        t = attn.AttentionTensors(q, k, v)
        cat_k, cat_v = np.concatenate([k, k2]), np.concatenate([v, v2])
        ref_both = naive_attention(q, cat_k, cat_v)
        worst = max(worst,
                    np.abs(attn.self_attention(t) - naive_attention(q, k, v)).max(),
                    np.abs(attn.texture_aligning_attention(t, (k2, v2)) - ref_both).max(),
                    np.abs(attn.geometry_preserving_attention(t, (k2, v2)) - ref_both).max())
    return CheckResult("attention oracle", worst < 1e-6, f"{cases} cases/kernel, max err {worst:.2e}")


def check_reductions(seed=1) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(20):
        q, k, v, k2, v2 = _random_case(rng)
        t = attn.AttentionTensors(q, k, v)
        ref = attn.self_attention(t)
        empty = (np.zeros((0, q.shape[1])), np.zeros((0, v.shape[1])))
        ok &= np.array_equal(attn.texture_aligning_attention(t, empty), ref)
        ok &= np.array_equal(attn.geometry_preserving_attention(t, empty), ref)
        ok &= np.array_equal(attn.texture_aligning_attention(t, (k2, v2), "self_only"), ref)
        ok &= np.array_equal(attn.geometry_preserving_attention(t, (k2, v2), "self_only"), ref)
    return CheckResult("reduction identities", bool(ok), "bit-exact on 20 cases")


def check_color_shift(seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(50):
        img = Image(rng.random((12, 12, 3)))
        mask = BinaryMask(rng.random((12, 12)) < 0.4)
        cs, ct = ColorStats(tuple(rng.random(3))), ColorStats(tuple(rng.random(3)))
        ok &= np.array_equal(color_shift_raw(img.pixels, mask, cs, ct, 0.0), img.pixels)
        a = float(rng.random())
        out_a = color_shift_raw(img.pixels, mask, cs, ct, a) - img.pixels
        out_1 = color_shift_raw(img.pixels, mask, cs, ct, 1.0) - img.pixels
        ok &= np.abs(out_a - a * out_1).max() < 1e-6
    return CheckResult("colour shift", bool(ok), "identity at a=0, linear in a")


def check_blend(seed=3) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for i in range(50):
        g = dif.Latent(rng.normal(size=(6, 5, 4)))
        t = dif.Latent(rng.normal(size=(6, 5, 4)))
        bits = np.ones((6, 5)) if i == 0 else np.zeros((6, 5)) if i == 1 else rng.random((6, 5)) < 0.5
        m = BinaryMask(bits)
        out = blend_latents(g, t, m).data
        ref = np.empty_like(g.data)
        for y in range(6):
            for x in range(5):
                ref[y, x] = g.data[y, x] if m.bits[y, x] else t.data[y, x]
        ok &= np.array_equal(out, ref)
    return CheckResult("latent blend", bool(ok), "exact select on 50 triples")


def check_codec(seed=4) -> CheckResult:
    rng = np.random.default_rng(seed)
    codec = ToyLatentCodec()
    ortho = np.abs(codec.mixer.T @ codec.mixer - np.eye(codec.channels)).max()
    err = 0.0
    for _ in range(10):
        img = Image(rng.random((64, 64, 3)))
        err = max(err, np.abs(codec.decode(codec.encode(img)).pixels - img.pixels).max())
    return CheckResult("codec round trip", err < 1e-5 and ortho < 1e-6,
                       f"max err {err:.1e}, |M^T M - I| {ortho:.1e}")


def check_ddim_algebra(seed=5) -> CheckResult:
    rng = np.random.default_rng(seed)
    sched = dif.make_schedule(1000, 25)
    worst = 0.0
    for _ in range(20):
        z = rng.normal(size=(4, 4, 3))
        eps = rng.normal(size=z.shape)
        i = int(rng.integers(0, 25))
        zn = dif.invert_given_eps(z, eps, sched, i, i + 1)
        worst = max(worst, np.abs(dif.denoise_given_eps(zn, eps, sched, i + 1, i) - z).max())
    return CheckResult("DDIM inverse algebra", worst < 1e-6, f"max err {worst:.1e}")


def check_mask_resize(seed=6) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(20):
        m = BinaryMask(rng.random((32, 32)) < 0.3)
        ok &= resize_mask_to(m, 32, 32) == m
        for g in ((16, 16), (8, 8), (4, 4)):
            r = resize_mask_to(m, *g)
            ok &= set(np.unique(r.bits)) <= {0, 1}
    return CheckResult("mask resize", bool(ok), "binary, identity at equal size")


def fixed_point_statistics(latent_hw=16, seeds=20, T=25, latent_c=192):
    """Mean invert-then-sample latent MSE for 1 and 5 fixed-point iterations."""
    sched = dif.make_schedule(1000, T)
    den = ToyDenoiser((latent_hw, latent_hw, latent_c))
    mse = {1: [], 5: []}
    for s in range(seeds):
        rng = np.random.default_rng(s)
        z0 = dif.Latent(rng.uniform(-0.5, 0.5, (latent_hw, latent_hw, latent_c)))
        cond = dif.InpaintCond((rng.random((latent_hw, latent_hw)) < 0.5).astype(float),
                               rng.uniform(-0.5, 0.5, (latent_hw, latent_hw, latent_c)))
        for iters in mse:
            zT = dif.invert(z0, sched, den, cond, iters=iters)
            z_rt = dif.sample(zT, sched, den, cond)
            mse[iters].append(float(np.mean((z_rt.data - z0.data) ** 2)))
    return {k: float(np.mean(v)) for k, v in mse.items()}


def check_fixed_point() -> CheckResult:
    m = fixed_point_statistics()
    return CheckResult("fixed-point inversion benefit", m[5] <= m[1],
                       f"mean MSE iters=5 {m[5]:.2e} <= iters=1 {m[1]:.2e}")


def check_pipeline() -> CheckResult:
    src, mask, tar = scene(64)
    cfg = PipelineConfig(T=5, invert_iters=2, shift_x=6)
    a, b = harmonize(src, mask, tar, cfg), harmonize(src, mask, tar, cfg)
    census_ok = a.census == predicted_census(cfg, 2)
    same = a.output_image == b.output_image
    finite = bool(np.all(np.isfinite(a.output_image.pixels)))
    return CheckResult("pipeline smoke", census_ok and same and finite,
                       f"census {'ok' if census_ok else 'MISMATCH'}, deterministic {same}")


def run_selftest(quick: bool = False) -> list[CheckResult]:
    checks = [check_attention_oracle, check_reductions, check_color_shift, check_blend, check_codec,
              check_ddim_algebra, check_mask_resize, check_pipeline]
    if not quick:
        checks.append(check_fixed_point)
    results = []
    for fn in checks:
        t0 = time.perf_counter()
        try:
            r = fn()
        except Exception as e:  # a crash is a failed check, not a crashed selftest
            r = CheckResult(fn.__name__.removeprefix("check_").replace("_", " "), False,
                            f"{type(e).__name__}: {e}")
        r.detail += f" ({time.perf_counter() - t0:.1f}s)"
        results.append(r)
    return results
