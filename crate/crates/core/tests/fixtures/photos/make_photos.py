"""Writes 24 square 128 px crops of the scikit-image sample photographs."""
import numpy as np
import skimage.data as d
from PIL import Image

rng = np.random.default_rng(3)
names = ["astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field", "retina", "colorwheel"]
for name in names:
    im = getattr(d, name)()
    h, w = im.shape[:2]
    for j in range(3):
        s = int(min(h, w) * rng.uniform(0.5, 0.9))
        y = rng.integers(0, h - s + 1)
        x = rng.integers(0, w - s + 1)
        crop = Image.fromarray(im[y : y + s, x : x + s, :3]).resize((128, 128), Image.LANCZOS)
        crop.save(f"{name}_{j}.png")
