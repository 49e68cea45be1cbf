"""Self-attention kernels with cross-stream key/value sharing, and the
per-layer hook through which a denoiser routes its self-attention calls.

Tensors are ``(..., tokens, d)``; any leading axes (e.g. heads) broadcast,
and extra keys/values are concatenated along the token axis per head.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np


class MissingRecordError(LookupError):
    """A cross-stream K/V record was read before its stream produced it."""


class DuplicateRecordError(RuntimeError):
    pass


class EmptyKeySetError(ValueError):
    pass


class Stream(str, Enum):
    SRC = "src"
    TAR = "tar"
    GEO = "geo"
    OUT = "out"


class Mode(str, Enum):
    STANDARD = "standard"
    TEXTURE_ALIGNING = "texture_aligning"
    GEOMETRY_PRESERVING = "geometry_preserving"


class Ablation(str, Enum):
    BOTH = "both"
    OTHER_ONLY = "other_only"  # drop the stream's own K/V
    SELF_ONLY = "self_only"    # drop the other stream's K/V


@dataclass(frozen=True)
class AttentionMode:
    mode: Mode = Mode.STANDARD
    ablation: Ablation = Ablation.BOTH

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "ablation", Ablation(self.ablation))

    @property
    def reads_other(self) -> bool:
        return self.mode is not Mode.STANDARD and self.ablation is not Ablation.SELF_ONLY


STANDARD = AttentionMode()


@dataclass(frozen=True, eq=False)
class AttentionTensors:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        q, k, v = (np.asarray(x, dtype=np.float64) for x in (self.Q, self.K, self.V))
        if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
            raise ValueError("Q, K, V must be at least 2-D (tokens, d)")
        if k.shape[-2] != v.shape[-2]:
            raise ValueError(f"K has {k.shape[-2]} tokens but V has {v.shape[-2]}")
        if q.shape[-1] != k.shape[-1] or q.shape[-1] < 1:
            raise ValueError(f"head dims differ: Q {q.shape[-1]}, K {k.shape[-1]}")
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "K", k)
        object.__setattr__(self, "V", v)

    @property
    def d(self) -> int:
        return self.Q.shape[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _attend(q, k, v) -> np.ndarray:
    if k.shape[-2] == 0:
        raise EmptyKeySetError("cannot attend over an empty key set")
    logits = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])
    return softmax(logits) @ v


def self_attention(t: AttentionTensors) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d)) V."""
    return _attend(t.Q, t.K, t.V)


def _check_extra(t: AttentionTensors, k2, v2):
    k2 = np.asarray(k2, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if k2.shape[-2] != v2.shape[-2]:
        raise ValueError("extra K and V token counts differ")
    if k2.shape[-2] and k2.shape[-1] != t.d:
        raise ValueError(f"extra K head dim {k2.shape[-1]} != {t.d}")
    if k2.shape[-2] and v2.shape[-1] != t.V.shape[-1]:
        raise ValueError("extra V feature dim does not match V")
    return k2, v2


def _shared_attention(t: AttentionTensors, extra, ablation) -> np.ndarray:
    ablation = Ablation(ablation)
    if ablation is Ablation.SELF_ONLY:
        return self_attention(t)
    k2, v2 = _check_extra(t, *extra)
    if ablation is Ablation.OTHER_ONLY:
        return _attend(t.Q, k2, v2)
    if k2.shape[-2] == 0:
        return self_attention(t)
    lead = np.broadcast_shapes(t.K.shape[:-2], k2.shape[:-2])
    k = np.concatenate([np.broadcast_to(t.K, lead + t.K.shape[-2:]),
                        np.broadcast_to(k2, lead + k2.shape[-2:])], axis=-2)
    v = np.concatenate([np.broadcast_to(t.V, lead + t.V.shape[-2:]),
                        np.broadcast_to(v2, lead + v2.shape[-2:])], axis=-2)
    return _attend(t.Q, k, v)


def texture_aligning_attention(geo: AttentionTensors, tar_kv, ablation=Ablation.BOTH) -> np.ndarray:
    """Geometry queries over [K_geo; K_tar] with values [V_geo; V_tar]."""
    return _shared_attention(geo, tar_kv, ablation)


def geometry_preserving_attention(out: AttentionTensors, src_kv_masked,
                                  ablation=Ablation.BOTH) -> np.ndarray:
    """Output queries over [K_out; K_src_hat] with values [V_out; V_src_hat].

    ``other_only`` attends to the masked source tokens alone and raises
    :class:`EmptyKeySetError` when none were selected.
    """
    return _shared_attention(out, src_kv_masked, ablation)


def select_masked_kv(kv, mask_flat) -> tuple[np.ndarray, np.ndarray]:
    """Keep token rows whose mask entry is non-zero, in order."""
    k, v = kv
    mask_flat = np.asarray(mask_flat).reshape(-1)
    if k.shape[-2] != mask_flat.size or v.shape[-2] != mask_flat.size:
        raise ValueError(f"{k.shape[-2]} tokens but mask has {mask_flat.size} entries")
    keep = mask_flat != 0
    return k[..., keep, :], v[..., keep, :]


# -- registry and routing ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class KVRecord:
    stream: Stream
    timestep: int
    layer: int
    K: np.ndarray
    V: np.ndarray
    iteration: int = 0

    @property
    def key(self):
        return (Stream(self.stream), self.timestep, self.layer, self.iteration)


class KVRegistry:
    """Write-once store of captured K/V keyed on
    (stream, timestep, layer, fixed-point iteration).

    ``capture_disabled`` lists streams whose records are never stored.
    ``census`` counts every dispatch per (stream, mode) and survives
    :meth:`release`.
    """

    def __init__(self, capture_disabled=()):
        self._records = {}
        self.capture_disabled = frozenset(Stream(s) for s in capture_disabled)
        self.census = Counter()
        self.missing_errors = 0

    def __len__(self):
        return len(self._records)

    def __contains__(self, key):
        return key in self._records

    def put(self, record: KVRecord):
        if Stream(record.stream) in self.capture_disabled:
            return
        if record.key in self._records:
            raise DuplicateRecordError(f"record {record.key} written twice")
        self._records[record.key] = record

    def get(self, stream, timestep, layer, iteration=0) -> KVRecord:
        key = (Stream(stream), timestep, layer, iteration)
        try:
            return self._records[key]
        except KeyError:
            self.missing_errors += 1
            raise MissingRecordError(
                f"no K/V for stream={key[0].value} t={timestep} layer={layer} iter={iteration}; "
                "the providing stream must run first"
            ) from None

    def release(self, timestep=None):
        """Drop stored records (all, or those of one timestep)."""
        if timestep is None:
            self._records.clear()
        else:
            for key in [k for k in self._records if k[1] == timestep]:
                del self._records[key]


def run_hooked(layer_call, registry: KVRegistry, route: AttentionMode, stream, timestep: int,
               layer: int, iteration: int = 0, other_stream=None, token_mask=None) -> np.ndarray:
    """Capture this stream's K/V, then dispatch to the kernel ``route`` selects.

    ``layer_call`` is either an :class:`AttentionTensors` or a zero-argument
    callable producing one (the backend's Q/K/V projection). For
    geometry-preserving routing the other stream's K/V rows are filtered by
    ``token_mask`` (flattened, one entry per token).
    """
    t = layer_call() if callable(layer_call) else layer_call
    stream = Stream(stream)
    registry.put(KVRecord(stream, timestep, layer, t.K, t.V, iteration))
    registry.census[(stream.value, route.mode.value)] += 1

    if not route.reads_other:
        return self_attention(t)
    if other_stream is None:
        other_stream = Stream.TAR if route.mode is Mode.TEXTURE_ALIGNING else Stream.SRC
    rec = registry.get(other_stream, timestep, layer, iteration)
    if route.mode is Mode.TEXTURE_ALIGNING:
        return texture_aligning_attention(t, (rec.K, rec.V), route.ablation)
    if token_mask is None:
        raise ValueError("geometry-preserving routing needs a token mask")
    return geometry_preserving_attention(t, select_masked_kv((rec.K, rec.V), token_mask),
                                         route.ablation)


class Router:
    """Binds run_hooked to one (stream, timestep, iteration) forward pass.

    The backend calls ``router(layer, tensors, grid)`` once per
    self-attention block; ``grid`` is the block's (H, W) token grid, used to
    pick the token mask for that resolution.
    """

    def __init__(self, registry: KVRegistry, stream, timestep: int, iteration: int = 0,
                 route: AttentionMode = STANDARD, layers=None, token_masks=None,
                 other_stream=None):
        self.registry = registry
        self.stream = Stream(stream)
        self.timestep = timestep
        self.iteration = iteration
        self.route = route
        self.layers = None if layers is None else frozenset(layers)
        self.token_masks = token_masks
        self.other_stream = other_stream
        self.calls = 0

    def __call__(self, layer: int, tensors, grid=None) -> np.ndarray:
        self.calls += 1
        route = self.route
        if self.layers is not None and layer not in self.layers:
            route = STANDARD
        mask = None
        if route.reads_other and route.mode is Mode.GEOMETRY_PRESERVING:
            mask = self.token_masks(layer, grid) if callable(self.token_masks) else self.token_masks[layer]
        return run_hooked(tensors, self.registry, route, self.stream, self.timestep, layer,
                          self.iteration, other_stream=self.other_stream, token_mask=mask)


def plain_router(layer: int, tensors, grid=None) -> np.ndarray:
    """Router that applies standard self-attention and records nothing."""
    t = tensors() if callable(tensors) else tensors
    return self_attention(t)
