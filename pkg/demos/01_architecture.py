"""
Network variants at a glance
============================

Walks through the symbolic shape chain of the two full-size variants and
the small Toy variant, and counts their parameters.  Nothing is
allocated except for Toy, so this runs in a second.
"""

from voxrecon.model import build_config, init_model

# both start from the same slice of VGG16 on 224-pixel images.  F closes
# with a light head and 2048 features; A keeps 512 channels longer, ends
# with 16384 features and adds the refiner.  Both decode to 32^3.
for variant in ("F", "A"):
    cfg = build_config(variant)
    print(f"{variant}: {cfg.param_count():,} parameters, feature length {cfg.feature_len}")

# the shape chain is computed without touching any weights
cfg = build_config("A")
for name in ("enc.flatten", "dec.reshape", "dec.up1.conv", "dec.up4.conv", "dec.head.act",
             "ref.enc1.conv", "ref.enc3.pool", "ref.fc1", "ref.fc2", "ref.dec3.act"):
    print(f"  {name:16s} {cfg.shapes[name]}")

# Toy keeps the wiring but shrinks channels so it trains on a laptop CPU
toy = build_config("Toy", 32, refiner=True)
params = init_model(toy, seed=0)
print(f"Toy: {toy.param_count():,} parameters in {len(list(params.trainable()))} tensors")
