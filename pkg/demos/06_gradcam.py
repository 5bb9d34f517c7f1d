"""Grad-CAM heatmaps at every skip-fusion depth of a trained network.

The heatmap weights each fused channel by the spatial mean of the class
score's gradient, keeps the positive part of the weighted sum, and scales
it to [0, 1].  Layer 1 is the full-resolution fusion, layer 4 the deepest.

Run:  python3 demos/06_gradcam.py        (about a minute)
"""

import os

from sharpseg.data import SyntheticConfig, generate_synthetic, write_pgm
from sharpseg.metrics import grad_cam
from sharpseg.model import ModelConfig, build_model
from sharpseg.train import TrainConfig, train

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

samples, _ = generate_synthetic(SyntheticConfig(
    n_samples=10, h=64, w=64, num_classes=2, boundary_blur_sigma=1.5, seed=1))

model = build_model(ModelConfig(in_channels=1, num_classes=1,
                                widths=(8, 16, 32, 64, 128),
                                connection="sharp", seed=0))
train(model, samples[:8], samples[8:],
      TrainConfig(max_epochs=25, patience=25, seed=0), jaccard_goal=0.9)

probe = samples[8]
write_pgm(os.path.join(out_dir, "gradcam_input.pgm"), probe.image)
write_pgm(os.path.join(out_dir, "gradcam_mask.pgm"), probe.mask)
for layer in (1, 2, 3, 4):
    cam = grad_cam(model, probe.image, layer, target_class=0)
    path = os.path.join(out_dir, f"gradcam_layer{layer}.pgm")
    write_pgm(path, cam)
    print(f"layer {layer}: heatmap range [{cam.min():.3f}, {cam.max():.3f}] "
          f"-> {path}")
