"""Overfit a small sharpening-connection network on ten synthetic samples.

A segmentation engine that cannot drive its training set to near-perfect
Jaccard is broken somewhere; this is the cheapest end-to-end health check
of forward, backward, Adam, and the metrics in one loop.

Run:  python3 demos/04_overfit_training.py        (about a minute)
"""

from sharpseg.data import SyntheticConfig, generate_synthetic
from sharpseg.model import ModelConfig, build_model
from sharpseg.train import TrainConfig, train

samples, _ = generate_synthetic(SyntheticConfig(
    n_samples=10, h=64, w=64, num_classes=2, boundary_blur_sigma=1.0, seed=0))

model = build_model(ModelConfig(in_channels=1, num_classes=1,
                                widths=(8, 16, 32, 64, 128),
                                connection="sharp", seed=0))

result = train(model, samples, samples,
               TrainConfig(max_epochs=60, patience=60, seed=0),
               jaccard_goal=0.95)

print("epoch  train_loss  jaccard  dice")
for row in result.history:
    print(f"{row.epoch:5d}  {row.train_loss:10.4f}  {row.val_jaccard:7.4f}"
          f"  {row.val_dice:6.4f}")
print(f"\nreached Jaccard {result.history[-1].val_jaccard:.4f} after "
      f"{len(result.history)} epochs")
