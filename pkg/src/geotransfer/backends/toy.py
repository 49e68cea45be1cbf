"""Deterministic stand-ins for the VAE and the inpainting UNet.

Neither is trained. The codec is exactly invertible so latent-space tests
have pixel-exact expectations, and the denoiser is a small seeded network
whose self-attention blocks all go through the attention router.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..attention import AttentionTensors
from ..diffusion import InpaintCond, Latent
from ..imagemask import Image


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class ToyLatentCodec:
    """Space-to-depth by ``block`` followed by an orthogonal channel mix.

    A 512x512x3 image maps to a 64x64x192 latent with the default block 8.
    """

    def __init__(self, block: int = 8, seed: int = 0):
        if block < 1:
            raise ValueError("block must be >= 1")
        self.block = block
        self.channels = 3 * block * block
        self.mixer = _orthogonal(self.channels, np.random.default_rng([seed, 0xC0DEC]))
        self.mixer.setflags(write=False)

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        self._check(height, width)
        return height // self.block, width // self.block, self.channels

    def _check(self, height, width):
        if height % self.block or width % self.block:
            raise ValueError(f"image size {height}x{width} is not divisible by block {self.block}")

    def encode_array(self, pixels: np.ndarray) -> np.ndarray:
        H, W = pixels.shape[:2]
        self._check(H, W)
        b = self.block
        x = pixels.reshape(H // b, b, W // b, b, 3).transpose(0, 2, 1, 3, 4)
        return x.reshape(H // b, W // b, self.channels) @ self.mixer

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        h, w, c = z.shape
        if c != self.channels:
            raise ValueError(f"latent has {c} channels, codec expects {self.channels}")
        b = self.block
        x = (z @ self.mixer.T).reshape(h, w, b, b, 3).transpose(0, 2, 1, 3, 4)
        return x.reshape(h * b, w * b, 3)

    def encode(self, image: Image) -> Latent:
        return Latent(self.encode_array(image.pixels), 0)

    def decode(self, z: Latent) -> Image:
        return Image.clamped(self.decode_array(z.data))


def _sinusoidal(num_steps: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.arange(num_steps)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


def auto_strides(h: int, w: int, max_tokens: int = 256) -> tuple[int, int]:
    s = 1
    while (h // s) * (w // s) > max_tokens and h % (4 * s) == 0 and w % (4 * s) == 0:
        s *= 2
    if h % (2 * s) or w % (2 * s):
        raise ValueError(f"latent grid {h}x{w} cannot host two attention resolutions")
    return s, 2 * s


def _pool(x, s):
    if s == 1:
        return x
    h, w, c = x.shape
    return x.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))


def _unpool(x, s):
    if s == 1:
        return x
    h, w, c = x.shape
    return np.broadcast_to(x[:, None, :, None, :], (h, s, w, s, c)).reshape(h * s, w * s, c)


class ToyDenoiser:
    """Seeded epsilon-predictor with the inpainting input layout.

    The prediction is the exact posterior-mean noise for a Gaussian prior
    ``N(mu, prior_std**2)`` on the clean latent::

        eps = sqrt(1 - ab) * (z - sqrt(ab) * mu) / (ab * prior_std**2 + 1 - ab)

    Outside the conditioning mask ``mu`` is the masked-image latent. Inside
    it, ``mu`` is the mean of the self-attention block outputs, whose values
    are the shrunken latent content ``sqrt(ab) * z`` pooled to each block's
    grid; queries and keys come from a seeded pointwise stem over
    ``[z, mask, masked-image latent]`` plus a timestep embedding. Sharing
    keys/values across streams therefore moves content between them.

    By default the blocks sit at strides ``(s, 2s)``, ``s`` being the
    smallest power of two that keeps the first block at or under
    ``max_tokens`` tokens, i.e. grids ``(h, w)`` and ``(h/2, w/2)`` for
    small latents.
    """

    def __init__(self, latent_shape, hidden: int = 32, head_dim: int = 16, heads: int = 1,
                 strides=None, max_tokens: int = 256, num_train_steps: int = 1000,
                 beta_start: float = 0.00085, beta_end: float = 0.012, prior_std: float = 0.5,
                 seed: int = 0):
        h, w, c = latent_shape
        if strides is None:
            strides = auto_strides(h, w, max_tokens)
        for s in strides:
            if h % s or w % s:
                raise ValueError(f"latent grid {h}x{w} not divisible by attention stride {s}")
        if c % heads:
            raise ValueError(f"{c} latent channels cannot be split over {heads} heads")
        self.latent_shape = (h, w, c)
        self.hidden, self.head_dim, self.heads = hidden, head_dim, heads
        self.strides = tuple(strides)
        self.attention_layers = {i: (h // s, w // s) for i, s in enumerate(self.strides)}
        self.prior_var = prior_std ** 2
        betas = np.linspace(beta_start, beta_end, num_train_steps)
        self.alpha_bar = np.cumprod(1.0 - betas)

        rng = np.random.default_rng([seed, 0x70D])
        fan_in = 2 * c + 1
        self.w_in = rng.standard_normal((fan_in, hidden)) * (1.5 / np.sqrt(fan_in))
        self.b_in = rng.standard_normal(hidden) * 0.1
        self.temb = 0.5 * _sinusoidal(num_train_steps, hidden)
        inner = heads * head_dim
        self.blocks = [
            {"q": rng.standard_normal((hidden, inner)) * (2.0 / np.sqrt(hidden)),
             "k": rng.standard_normal((hidden, inner)) * (2.0 / np.sqrt(hidden))}
            for _ in self.strides
        ]
        for arr in [self.w_in, self.b_in, self.temb, self.alpha_bar] + [a for b in self.blocks for a in b.values()]:
            arr.setflags(write=False)
        self._cond_cache = {}

    def _split(self, x):
        n = x.shape[0]
        return x.reshape(n, self.heads, -1).transpose(1, 0, 2)

    def _cond_term(self, cond: InpaintCond) -> np.ndarray:
        # the mask and masked-image inputs are fixed per stream: project once
        hit = self._cond_cache.get(id(cond))
        if hit is not None and hit[0] is cond:
            return hit[1]
        c = self.latent_shape[2]
        base = min(self.strides)
        term = (_pool(cond.mask_latent[..., None], base) * self.w_in[c]
                + _pool(cond.masked_image_latent, base) @ self.w_in[c + 1:] + self.b_in)
        if len(self._cond_cache) >= 8:
            self._cond_cache.pop(next(iter(self._cond_cache)))
        self._cond_cache[id(cond)] = (cond, term)
        return term

    def predict_noise(self, z, t: int, cond: InpaintCond, router) -> np.ndarray:
        z = z.data if isinstance(z, Latent) else np.asarray(z, dtype=np.float64)
        if z.shape != self.latent_shape:
            raise ValueError(f"latent shape {z.shape} != backend shape {self.latent_shape}")
        if cond.masked_image_latent.shape != self.latent_shape:
            raise ValueError("conditioning latent shape does not match the backend")
        H, W, c = self.latent_shape
        ab = float(self.alpha_bar[int(t)])
        base = min(self.strides)
        zb = _pool(z, base)
        feat = np.tanh(zb @ self.w_in[:c] + self._cond_term(cond) + self.temb[int(t)])
        feat = 0.5 * (feat + ndimage.uniform_filter(feat, size=(3, 3, 1), mode="nearest"))
        content = np.sqrt(ab) * zb

        mu_attn = np.zeros_like(zb)
        for layer, (stride, blk) in enumerate(zip(self.strides, self.blocks)):
            gh, gw = H // stride, W // stride
            f = _pool(feat, stride // base).reshape(gh * gw, -1)
            v = _pool(content, stride // base).reshape(gh * gw, c)
            tensors = AttentionTensors(self._split(f @ blk["q"]), self._split(f @ blk["k"]), self._split(v))
            out = np.asarray(router(layer, tensors, (gh, gw)))
            mu_attn += _unpool(out.transpose(1, 0, 2).reshape(gh, gw, c), stride // base)
        mu_attn /= len(self.strides)

        # eps = k * (z - sqrt(ab) * mu), mu = c + m * (mu_attn - c), in place
        k = np.sqrt(1.0 - ab) / (ab * self.prior_var + 1.0 - ab)
        cimg = cond.masked_image_latent
        mu = _unpool(mu_attn, base) - cimg
        mu *= cond.mask_latent[..., None]
        mu += cimg
        mu *= k * np.sqrt(ab)
        eps = z * k
        eps -= mu
        return eps
