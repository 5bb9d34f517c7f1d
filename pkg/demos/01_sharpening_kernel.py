"""Tour of the 3x3 Laplacian sharpening kernel.

The kernel sums to zero, so it annihilates constant regions and responds
only to intensity transitions.  Applied depthwise it sharpens every channel
of a feature map independently without adding a single learnable parameter.

Run:  python3 demos/01_sharpening_kernel.py
"""

import os

import numpy as np

from sharpseg.data import SyntheticConfig, generate_sample, write_pgm
from sharpseg.model import SHARP_KERNEL
from sharpseg.ops import depthwise_sharp

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

print("kernel:")
print(SHARP_KERNEL)
print("sum of taps:", SHARP_KERNEL.sum(), "(zero -> flat regions vanish)")

# 1. constants vanish on the interior
flat = np.full((1, 1, 6, 6), 0.7, dtype=np.float32)
resp = depthwise_sharp(flat, SHARP_KERNEL)
print("\nconstant input, response interior:")
print(resp[0, 0, 1:-1, 1:-1])

# 2. a single impulse echoes the kernel itself
impulse = np.zeros((1, 1, 7, 7), dtype=np.float32)
impulse[0, 0, 3, 3] = 1.0
resp = depthwise_sharp(impulse, SHARP_KERNEL)
print("\nimpulse response (the kernel, centered):")
print(resp[0, 0, 2:5, 2:5])

# 3. on a blurry image: edge response and additive sharpening
sample = generate_sample(SyntheticConfig(n_samples=1, h=64, w=64,
                                         boundary_blur_sigma=2.0, seed=3), 0)
image = sample.image
edges = depthwise_sharp(image, SHARP_KERNEL)
sharpened = np.clip(image + edges, 0.0, 1.0)  # S = I + K*I

write_pgm(os.path.join(out_dir, "kernel_input.pgm"), image)
write_pgm(os.path.join(out_dir, "kernel_edges.pgm"),
          np.clip(edges, 0.0, 1.0))
write_pgm(os.path.join(out_dir, "kernel_sharpened.pgm"), sharpened)
print(f"\nwrote input / edge response / sharpened PGMs to {out_dir}")
print("edge response concentrates at the blurred boundary:",
      f"mean |response| {np.abs(edges).mean():.4f},",
      f"max {np.abs(edges).max():.4f}")
