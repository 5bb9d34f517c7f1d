"""Architecture walkthrough: layer table, parameter counts, width scaling.

The default encoder runs 32-512 filters; the wide variant scales uniformly
to 35-560.  Swapping plain skip connections for sharpening blocks changes
the parameter count by exactly zero.

Run:  python3 demos/03_architecture_and_params.py
"""

import numpy as np

from sharpseg.model import ModelConfig, build_model, count_params, forward

for widths, label in [((32, 64, 128, 256, 512), "default"),
                      ((35, 70, 140, 280, 560), "wide")]:
    plain = build_model(ModelConfig(in_channels=3, num_classes=1,
                                    widths=widths, connection="plain"))
    sharp = build_model(ModelConfig(in_channels=3, num_classes=1,
                                    widths=widths, connection="sharp"))
    print(f"{label} widths {widths}")
    print(f"  plain: {count_params(plain):,} parameters")
    print(f"  sharp: {count_params(sharp):,} parameters "
          f"(difference: {count_params(sharp) - count_params(plain)})")

print("\nper-layer table (default widths):")
model = build_model(ModelConfig())
for name, p in model.params.items():
    if name.endswith(".kernel"):
        bias = model.params[name.replace(".kernel", ".bias")]
        print(f"  {name.removesuffix('.kernel'):12s} kernel {str(p.value.shape):20s} "
              f"-> {p.value.size + bias.value.size:>9,} params")

x = np.zeros((1, 3, 192, 256), dtype=np.float32)
print(f"\nforward pass {x.shape} -> {forward(model, x).shape}")
