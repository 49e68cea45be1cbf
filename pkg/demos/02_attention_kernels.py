# # The three attention kernels
#
# Plain self-attention, plus two variants that append another stream's keys
# and values. We check them against a loop-by-loop reference.

# %%
import numpy as np

from geotransfer.attention import (
    AttentionTensors,
    geometry_preserving_attention,
    select_masked_kv,
    self_attention,
    texture_aligning_attention,
)
from geotransfer.selftest import naive_attention

rng = np.random.default_rng(0)
geo = AttentionTensors(rng.normal(size=(6, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8)))
tar_k, tar_v = rng.normal(size=(10, 8)), rng.normal(size=(10, 8))

out = texture_aligning_attention(geo, (tar_k, tar_v))
ref = naive_attention(geo.Q, np.vstack([geo.K, tar_k]), np.vstack([geo.V, tar_v]))
print("texture-aligning vs reference:", np.abs(out - ref).max())

# %% [markdown]
# Ablations drop one half of the key set. `self_only` is exactly plain
# self-attention; `other_only` reads only the other stream.

# %%
print("self_only == self_attention:",
      np.array_equal(texture_aligning_attention(geo, (tar_k, tar_v), "self_only"), self_attention(geo)))

# %% [markdown]
# For the output stream, source keys are first filtered to the tokens under
# the source mask. An empty selection falls back to self-attention.

# %%
mask = np.array([0, 1, 1, 0, 0, 0, 0, 1, 0, 0])
k_hat, v_hat = select_masked_kv((tar_k, tar_v), mask)
print("kept", len(k_hat), "of", len(tar_k), "source tokens")
empty = select_masked_kv((tar_k, tar_v), np.zeros(10))
print("empty selection == self_attention:",
      np.array_equal(geometry_preserving_attention(geo, empty), self_attention(geo)))
