"""End-to-end geometry transfer: editing, inversion, latent blending and
generation, plus the ablation grid."""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .attention import Ablation, KVRegistry, Stream
from .backends.sd_adapter import BACKENDS, load_backend
from .diffusion import (
    InpaintCond,
    Latent,
    StreamInput,
    generate,
    invert_streams,
    make_schedule,
)
from .editing import ColorMode, EditResult, build_edit, compose
from .imagemask import AffineTransform, BinaryMask, Image, resize_mask_to


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


TA_ABLATIONS = {"both": Ablation.BOTH, "target_only": Ablation.OTHER_ONLY, "geo_only": Ablation.SELF_ONLY}
GP_ABLATIONS = {"both": Ablation.BOTH, "src_only": Ablation.OTHER_ONLY, "self_only": Ablation.SELF_ONLY}


@dataclass(frozen=True)
class PipelineConfig:
    a: float = 0.5
    color_mode: str = "shift"
    T: int = 25
    invert_iters: int = 5
    ring_radius: int = 8
    shift_x: float = 0.0
    shift_y: float = 0.0
    scale: float = 1.0
    rotate: float = 0.0
    ta_ablation: str = "both"
    gp_ablation: str = "both"
    seed: int = 0
    backend: str = "toy"
    num_train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    custom_layers: tuple | None = None  # None: every self-attention layer
    paste_back: bool = False
    keep_latents: bool = False
    allow_empty_mask: bool = False
    disable_capture: tuple = ()

    def __post_init__(self):
        if self.custom_layers is not None:
            object.__setattr__(self, "custom_layers", tuple(int(x) for x in self.custom_layers))
        object.__setattr__(self, "disable_capture", tuple(str(s) for s in self.disable_capture))
        self.validate()

    def validate(self):
        def bad(msg):
            raise ConfigError(msg)

        if not isinstance(self.a, (int, float)) or not 0.0 <= self.a <= 1.0:
            bad(f"a must be in [0, 1], got {self.a!r}")
        if self.color_mode not in {m.value for m in ColorMode}:
            bad(f"color_mode must be one of none/shift/histogram, got {self.color_mode!r}")
        for name in ("T", "invert_iters", "num_train_steps"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                bad(f"{name} must be a positive integer, got {v!r}")
        if self.T > self.num_train_steps:
            bad("T cannot exceed num_train_steps")
        if not isinstance(self.ring_radius, int) or self.ring_radius < 1:
            bad(f"ring_radius must be an integer >= 1, got {self.ring_radius!r}")
        if self.ta_ablation not in TA_ABLATIONS:
            bad(f"ta_ablation must be one of {sorted(TA_ABLATIONS)}, got {self.ta_ablation!r}")
        if self.gp_ablation not in GP_ABLATIONS:
            bad(f"gp_ablation must be one of {sorted(GP_ABLATIONS)}, got {self.gp_ablation!r}")
        if self.backend not in BACKENDS:
            bad(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            bad("need 0 < beta_start <= beta_end < 1")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            bad(f"seed must be a non-negative integer, got {self.seed!r}")
        try:
            self.transform
        except ValueError as e:
            bad(str(e))
        for s in self.disable_capture:
            if s not in {x.value for x in Stream}:
                bad(f"unknown stream {s!r} in disable_capture")

    @property
    def transform(self) -> AffineTransform:
        return AffineTransform(self.shift_x, self.shift_y, self.scale, self.rotate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["custom_layers"] = None if self.custom_layers is None else list(self.custom_layers)
        d["disable_capture"] = list(self.disable_capture)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def with_(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


@dataclass
class RunArtifacts:
    output_image: Image
    pasted_image: Image
    edit: EditResult
    config: PipelineConfig
    timings_ms: dict = field(default_factory=dict)
    census: Counter = field(default_factory=Counter)
    latents: dict = field(default_factory=dict)
    label: str = ""
    missing_errors: int = 0

    def expected_census(self, num_layers: int) -> Counter:
        return predicted_census(self.config, num_layers)


def predicted_census(config: PipelineConfig, num_layers: int) -> Counter:
    """Router dispatches per (stream, mode) for one harmonize run."""
    per_inv = config.T * config.invert_iters * num_layers
    c = Counter({("src", "standard"): per_inv, ("tar", "standard"): per_inv,
                 ("geo", "texture_aligning"): per_inv})
    c[("out", "geometry_preserving")] = config.T * num_layers
    if GP_ABLATIONS[config.gp_ablation] is not Ablation.SELF_ONLY:
        c[("src", "standard")] += config.T * num_layers
    if config.custom_layers is not None:
        custom = sum(1 for l in range(num_layers) if l in config.custom_layers)
        for stream, mode, steps in (("geo", "texture_aligning", config.T * config.invert_iters),
                                    ("out", "geometry_preserving", config.T)):
            moved = steps * (num_layers - custom)
            c[(stream, mode)] -= moved
            c[(stream, "standard")] += moved
    return +c


def blend_latents(z_geo_T: Latent, z_tar_T: Latent, m_geo: BinaryMask) -> Latent:
    """Take geometry latents inside the latent mask and target latents outside."""
    if z_geo_T.shape != z_tar_T.shape:
        raise ValueError(f"latent shapes differ: {z_geo_T.shape} vs {z_tar_T.shape}")
    if m_geo.shape != z_geo_T.shape[:2]:
        raise ValueError(f"mask {m_geo.shape} does not match latent grid {z_geo_T.shape[:2]}")
    data = np.where(m_geo.as_bool()[..., None], z_geo_T.data, z_tar_T.data)
    return Latent(data, z_geo_T.step_index)


def make_backends(config: PipelineConfig, image_shape):
    codec_cls, denoiser_cls = load_backend(config.backend)
    codec = codec_cls(seed=config.seed)
    denoiser = denoiser_cls(codec.latent_shape(*image_shape), num_train_steps=config.num_train_steps,
                            beta_start=config.beta_start, beta_end=config.beta_end, seed=config.seed)
    return codec, denoiser


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e
        finally:
            self.timings[name] = round((time.perf_counter() - t0) * 1000.0, 3)


def _masked(image: Image, mask: BinaryMask) -> Image:
    return Image(np.where(mask.as_bool()[..., None], 0.0, image.pixels))


def harmonize(src: Image, src_mask: BinaryMask, tar: Image, config: PipelineConfig | None = None,
              codec=None, denoiser=None) -> RunArtifacts:
    """Transfer the geometry under ``src_mask`` from ``src`` onto ``tar``.

    ``codec`` and ``denoiser`` default to the backend named in ``config``,
    seeded with ``config.seed``.
    """
    config = config or PipelineConfig()
    st = _Stages()

    def check_inputs():
        if src.shape != tar.shape:
            raise ValueError(f"source {src.shape} and target {tar.shape} sizes differ")
        if src_mask.shape != src.shape:
            raise ValueError(f"mask {src_mask.shape} does not match source {src.shape}")

    st.run("validate", check_inputs)
    if codec is None or denoiser is None:
        codec, denoiser = st.run("backend", make_backends, config, tar.shape)

    edit = st.run("edit", build_edit, src, src_mask, tar, config.transform, config.a,
                  config.color_mode, config.ring_radius, allow_empty=config.allow_empty_mask)

    def encode_all():
        h, w, _ = codec.latent_shape(*tar.shape)
        m_src = resize_mask_to(src_mask, h, w)
        m_geo = resize_mask_to(edit.geometry_mask, h, w)
        z = {"src": codec.encode(src), "tar": codec.encode(tar), "geo": codec.encode(edit.geometry_image)}
        masked_tar = codec.encode(_masked(tar, edit.geometry_mask)).data
        conds = {
            "src": InpaintCond(m_src.bits, codec.encode(_masked(src, src_mask)).data),
            "tar": InpaintCond(np.zeros((h, w)), z["tar"].data),
            "geo": InpaintCond(m_geo.bits, masked_tar),
        }
        conds["out"] = conds["geo"]
        return z, conds, m_geo

    z0, conds, m_geo = st.run("encode", encode_all)

    inv_registry = KVRegistry(capture_disabled=config.disable_capture)
    sched = make_schedule(config.num_train_steps, config.T, config.beta_start, config.beta_end)
    inv = st.run(
        "inversion", invert_streams,
        {s: StreamInput(z0[s], conds[s]) for s in ("src", "tar", "geo")},
        sched, denoiser, config.invert_iters, TA_ABLATIONS[config.ta_ablation],
        config.custom_layers, inv_registry,
    )
    zT = {s.value: z for s, z in inv.latents.items()}
    z_out_T = st.run("blending", blend_latents, zT["geo"], zT["tar"], m_geo)

    gen_registry = KVRegistry(capture_disabled=config.disable_capture)
    z_out_0 = st.run(
        "generation", generate, z_out_T, zT["src"], src_mask, sched, denoiser, conds["out"],
        conds["src"], GP_ABLATIONS[config.gp_ablation], config.custom_layers, gen_registry,
    )

    def decode():
        img = codec.decode(z_out_0)
        if config.paste_back:
            img = compose(img, edit.geometry_mask, tar)
        return img

    out = st.run("decode", decode)
    census = inv_registry.census + gen_registry.census
    latents = {}
    if config.keep_latents:
        latents = {**{f"{k}_0": v for k, v in z0.items()}, **{f"{k}_T": v for k, v in zT.items()},
                   "out_T": z_out_T, "out_0": z_out_0}
    return RunArtifacts(out, edit.pasted_image, edit, config, st.timings, census, latents,
                        missing_errors=inv_registry.missing_errors + gen_registry.missing_errors)


ABLATION_AXES = {
    "color": [("a0.0", dict(color_mode="shift", a=0.0)),
              ("a0.5", dict(color_mode="shift", a=0.5)),
              ("a1.0", dict(color_mode="shift", a=1.0)),
              ("histogram", dict(color_mode="histogram"))],
    "ta": [(name, dict(ta_ablation=name)) for name in ("target_only", "geo_only", "both")],
    "gp": [(name, dict(gp_ablation=name)) for name in ("self_only", "src_only", "both")],
}


def ablation_conditions(axis: str = "all") -> list[tuple[str, dict]]:
    axes = list(ABLATION_AXES) if axis == "all" else [axis]
    out = []
    for ax in axes:
        if ax not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {ax!r}; expected color, ta, gp or all")
        out += [(f"{ax}-{name}", overrides) for name, overrides in ABLATION_AXES[ax]]
    return out


def run_ablation_suite(src: Image, src_mask: BinaryMask, tar: Image, base_config: PipelineConfig,
                       axis: str = "all") -> list[RunArtifacts]:
    """One run per ablation condition, each varying a single axis of ``base_config``."""
    runs = []
    for label, overrides in ablation_conditions(axis):
        art = harmonize(src, src_mask, tar, base_config.with_(**overrides))
        art.label = label
        runs.append(art)
    return runs
