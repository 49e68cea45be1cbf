# # Building the geometry image
#
# A wooden board with a drilled hole, and a sheet of brushed metal. We cut
# the hole out of the wood, move it, and recolour it toward the metal.

# %%
import numpy as np
from pathlib import Path

from geotransfer import AffineTransform, write_image
from geotransfer.editing import build_edit, ring_mean_color
from geotransfer.synthetic import scene

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

src, mask, tar = scene(128)
print("source mask covers", mask.count(), "pixels")

# %% [markdown]
# Colour statistics come from a thin ring just outside each mask, so the
# hole's own shading never leaks into them.

# %%
print("wood ring mean ", np.round(ring_mean_color(src, mask, 8).mean_rgb, 3))
print("metal ring mean", np.round(ring_mean_color(tar, mask, 8).mean_rgb, 3))

t = AffineTransform(dx=20, dy=-10, scale=0.8, rotation=15)
for a in (0.0, 0.5, 1.0):
    edit = build_edit(src, mask, tar, t, a=a)
    sel = edit.geometry_mask.as_bool()
    print(f"a={a}: {edit.geometry_mask.count()} px pasted, "
          f"patch mean {np.round(edit.geometry_image.pixels[sel].mean(axis=0), 3)}")
    write_image(edit.pasted_image, out / f"pasted_a{a}.png")

# %% [markdown]
# Histogram matching is the alternative to the uniform shift. It maps each
# channel of the patch onto the target's distribution around the paste site.

# %%
edit = build_edit(src, mask, tar, t, color_mode="histogram")
sel = edit.geometry_mask.as_bool()
print("patch mean after matching", np.round(edit.geometry_image.pixels[sel].mean(axis=0), 3))
print("target mean              ", np.round(tar.pixels.reshape(-1, 3).mean(axis=0), 3))
write_image(edit.pasted_image, out / "pasted_histogram.png")
